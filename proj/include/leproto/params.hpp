#pragma once

#include <map>
#include <string>
#include <vector>

#include "leproto/autograd.hpp"

namespace leproto {

enum class ParamRole {
  kFrozen,     // base backbone weights; never receive gradients
  kTrainable,  // decayed by the optimizer
  kNoDecay,    // trainable, excluded from weight decay (layer norms, concept bank)
};

struct ParamEntry {
  std::string name;
  Var var;
  ParamRole role;
};

// Insertion-ordered registry of named parameters. Modules register their
// leaves here and keep the returned handles.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init, ParamRole role);

  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return by_name_.count(name) > 0; }

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t count_elements() const;
  std::size_t count_trainable_elements() const;

  void zero_grad();

  // Overwrites values by name; shapes must match and every stored name must be present.
  void load_values(const std::map<std::string, Tensor>& values);

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> by_name_;
};

}  // namespace leproto
