#include "leproto/params.hpp"

#include <stdexcept>

namespace leproto {

Var ParamStore::add(const std::string& name, Tensor init, ParamRole role) {
  if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Var v = leaf(std::move(init), role != ParamRole::kFrozen);
  by_name_[name] = entries_.size();
  entries_.push_back({name, v, role});
  return v;
}

const Var& ParamStore::get(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].var;
}

std::size_t ParamStore::count_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

std::size_t ParamStore::count_trainable_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.role != ParamRole::kFrozen) n += e.var.value().size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

void ParamStore::load_values(const std::map<std::string, Tensor>& values) {
  for (auto& e : entries_) {
    auto it = values.find(e.name);
    if (it == values.end()) throw std::runtime_error("checkpoint is missing parameter " + e.name);
    if (it->second.shape() != e.var.shape()) {
      throw ShapeError("checkpoint shape mismatch for " + e.name + ": " + shape_string(it->second.shape()) +
                       " vs " + shape_string(e.var.shape()));
    }
    e.var.mutable_value() = it->second;
  }
}

}  // namespace leproto
