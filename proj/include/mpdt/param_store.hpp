#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mpdt/tensor.hpp"

namespace mpdt {

// Named trainable tensors in insertion order. Holds model weights and, for the
// learned-prompt variants, the prompt blocks.
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  // Returns a handle sharing storage with the stored parameter.
  Tensor<T> add(std::string name, Tensor<T> tensor) {
    if (index_.contains(name)) throw ContractError("parameter '" + name + "' registered twice");
    tensor.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(tensor));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor<T>& get(const std::string& name) const { return entries_[lookup(name)].second; }
  Tensor<T>& get(const std::string& name) { return entries_[lookup(name)].second; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  // FNV-1a over names, shapes and value bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const void* data, std::size_t len) {
      const auto* p = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [name, t] : entries_) {
      feed(name.data(), name.size());
      for (std::size_t d : t.shape()) feed(&d, sizeof d);
      feed(t.values().data(), t.numel() * sizeof(T));
    }
    return h;
  }

  // Deep copy with fresh leaves (no grads, no shared storage).
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) out.add(name, t.detach());
    return out;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : entries_) {
      std::vector<U> vals(t.values().begin(), t.values().end());
      out.add(name, Tensor<U>(t.shape(), std::move(vals)));
    }
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// backward(loss), then zero-filled grads for parameters the loss never reached.
template <typename T>
void backward(const Tensor<T>& loss, ParamStore<T>& store) {
  backward(loss);
  for (auto& [_, t] : store.entries()) {
    if (!t.has_grad()) t.zero_grad();
  }
}

}  // namespace mpdt
