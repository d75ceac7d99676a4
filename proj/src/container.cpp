#include "leproto/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace leproto::container {
namespace fs = std::filesystem;

namespace {

template <typename U>
void put_le(std::string& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

std::size_t element_bytes(DType d) { return d == DType::kF32 ? 4 : 8; }

}  // namespace

std::string dtype_name(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  throw ContainerError("unsupported dtype: " + s);
}

void write(const fs::path& dir, const std::vector<NamedArray>& arrays, const nlohmann::json& meta) {
  fs::create_directories(dir);
  std::string blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& a : arrays) {
    nlohmann::json e = a.extra.is_object() ? a.extra : nlohmann::json::object();
    e["name"] = a.name;
    e["shape"] = a.data.shape();
    e["dtype"] = dtype_name(a.dtype);
    e["file"] = kBlobFile;
    e["offset"] = blob.size();
    for (double v : a.data.data()) {
      if (a.dtype == DType::kF32) {
        put_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put_le(blob, std::bit_cast<std::uint64_t>(v));
      }
    }
    entries.push_back(std::move(e));
  }
  nlohmann::json manifest = {{"format", "leproto-arrays"}, {"version", 1}, {"meta", meta}, {"entries", entries}};
  {
    std::ofstream f(dir / kBlobFile, std::ios::binary | std::ios::trunc);
    if (!f) throw ContainerError("cannot write " + (dir / kBlobFile).string());
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  std::ofstream f(dir / kManifestFile, std::ios::trunc);
  if (!f) throw ContainerError("cannot write " + (dir / kManifestFile).string());
  f << manifest.dump(2) << '\n';
}

Manifest read_manifest(const fs::path& dir) {
  std::ifstream f(dir / kManifestFile);
  if (!f) throw ContainerError("missing manifest: " + (dir / kManifestFile).string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ContainerError("malformed manifest " + (dir / kManifestFile).string() + ": " + e.what());
  }
  Manifest m;
  if (j.contains("meta")) m.meta = j["meta"];
  for (const auto& e : j.at("entries")) {
    Entry en;
    en.name = e.at("name").get<std::string>();
    en.shape = e.at("shape").get<Shape>();
    en.dtype = parse_dtype(e.at("dtype").get<std::string>());
    en.file = e.value("file", std::string(kBlobFile));
    en.offset = e.value("offset", std::uint64_t{0});
    en.extra = e;
    for (const char* k : {"name", "shape", "dtype", "file", "offset"}) en.extra.erase(k);
    m.entries.push_back(std::move(en));
  }
  return m;
}

Tensor read_entry(const fs::path& dir, const Entry& entry) {
  std::ifstream f(dir / entry.file, std::ios::binary);
  if (!f) throw ContainerError("missing blob file: " + (dir / entry.file).string());
  std::size_t count = shape_size(entry.shape);
  std::size_t nbytes = count * element_bytes(entry.dtype);
  std::vector<unsigned char> buf(nbytes);
  f.seekg(static_cast<std::streamoff>(entry.offset));
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(nbytes));
  if (static_cast<std::size_t>(f.gcount()) != nbytes) {
    throw ContainerError("truncated blob for entry " + entry.name);
  }
  Tensor t(entry.shape);
  for (std::size_t i = 0; i < count; ++i) {
    if (entry.dtype == DType::kF32) {
      t[i] = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(buf.data() + 4 * i)));
    } else {
      t[i] = std::bit_cast<double>(get_le<std::uint64_t>(buf.data() + 8 * i));
    }
  }
  return t;
}

}  // namespace leproto::container
