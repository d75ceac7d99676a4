#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leproto/tensor.hpp"

// Manifest + blob array container.
//
//   <dir>/manifest.json   {"format": "leproto-arrays", "version": 1,
//                          "meta": {...},
//                          "entries": [{"name", "shape", "dtype", "file",
//                                       "offset", ...extra fields}]}
//   <dir>/blobs.bin       raw little-endian IEEE-754 values, entries back to back
//
// dtype is "f32" or "f64". Readers honour each entry's "file" and "offset",
// so hand-written containers may split blobs across files.
namespace leproto::container {

enum class DType { kF32, kF64 };

std::string dtype_name(DType d);
DType parse_dtype(const std::string& s);

struct NamedArray {
  std::string name;
  Tensor data;
  DType dtype = DType::kF32;
  nlohmann::json extra = nlohmann::json::object();
};

struct Entry {
  std::string name;
  Shape shape;
  DType dtype = DType::kF32;
  std::string file;
  std::uint64_t offset = 0;
  nlohmann::json extra = nlohmann::json::object();
};

struct Manifest {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Entry> entries;
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "blobs.bin";

class ContainerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write(const std::filesystem::path& dir, const std::vector<NamedArray>& arrays,
           const nlohmann::json& meta = nlohmann::json::object());

Manifest read_manifest(const std::filesystem::path& dir);
Tensor read_entry(const std::filesystem::path& dir, const Entry& entry);

}  // namespace leproto::container
