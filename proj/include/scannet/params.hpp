#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "scannet/autograd.hpp"
#include "scannet/config.hpp"
#include "scannet/tensor.hpp"

namespace scannet {

enum class Init { zeros, ones, he_normal, xavier_normal };

/// Named parameter arrays with matching gradient buffers, in insertion order.
/// Shared weights are a single entry referenced from several places.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
  };

  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed), rng_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Tensor<T>& add(const std::string& name, Shape shape, Init init, int fan_in = 0, int fan_out = 0) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter '" + name + "'");
    Entry e{name, Tensor<T>(shape), Tensor<T>(shape)};
    double stddev = 0;
    switch (init) {
      case Init::zeros: break;
      case Init::ones: std::fill(e.value.data.begin(), e.value.data.end(), T(1)); break;
      case Init::he_normal: stddev = std::sqrt(2.0 / std::max(1, fan_in)); break;
      case Init::xavier_normal: stddev = std::sqrt(2.0 / std::max(1, fan_in + fan_out)); break;
    }
    if (stddev > 0) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& v : e.value.data) v = static_cast<T>(dist(rng_));
    }
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& value(const std::string& name) { return entries_.at(lookup(name)).value; }
  const Tensor<T>& value(const std::string& name) const { return entries_.at(lookup(name)).value; }
  Tensor<T>& grad(const std::string& name) { return entries_.at(lookup(name)).grad; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Hash over names, shapes and raw values.
  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64(nullptr, 0);
    for (const auto& e : entries_) {
      h = fnv1a64(e.name.data(), e.name.size(), h);
      h = fnv1a64(e.value.shape.data(), e.value.shape.size() * sizeof(int), h);
      h = fnv1a64(e.value.data.data(), e.value.data.size() * sizeof(T), h);
    }
    return h;
  }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out(seed_);
    for (const auto& e : entries_) {
      auto& v = out.add(e.name, e.value.shape, Init::zeros);
      v = e.value.template cast<U>();
    }
    return out;
  }

  /// Binary blob: count, then (name, rank, dims, values as double) per entry.
  void write(std::ostream& os) const {
    put<std::uint64_t>(os, entries_.size());
    for (const auto& e : entries_) {
      put<std::uint64_t>(os, e.name.size());
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
      for (int d : e.value.shape) put<std::int32_t>(os, d);
      for (T v : e.value.data) put<double>(os, static_cast<double>(v));
    }
  }

  /// Reads into a fresh store; the layout must match this store's names and shapes exactly.
  void read_values(std::istream& is) {
    std::vector<Tensor<T>> loaded;
    const auto count = get<std::uint64_t>(is);
    if (count != entries_.size())
      throw DataError("checkpoint has " + std::to_string(count) + " parameters, model expects " +
                      std::to_string(entries_.size()));
    for (const auto& e : entries_) {
      const auto len = get<std::uint64_t>(is);
      if (len > 4096) throw DataError("corrupt checkpoint: implausible name length");
      std::string name(len, '\0');
      is.read(name.data(), static_cast<std::streamsize>(len));
      if (!is || name != e.name) throw DataError("checkpoint parameter '" + name + "' where '" + e.name + "' expected");
      const auto rank = get<std::uint32_t>(is);
      if (rank > 8) throw DataError("corrupt checkpoint: implausible rank");
      Shape s(rank);
      for (auto& d : s) d = get<std::int32_t>(is);
      if (s != e.value.shape)
        throw DataError("checkpoint shape " + shape_str(s) + " for '" + name + "', expected " + shape_str(e.value.shape));
      Tensor<T> t(s);
      for (auto& v : t.data) v = static_cast<T>(get<double>(is));
      loaded.push_back(std::move(t));
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].value = std::move(loaded[i]);
  }

  template <typename V>
  static void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  template <typename V>
  static V get(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError("corrupt checkpoint: unexpected end of data");
    return v;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  std::uint64_t seed_;
  std::mt19937_64 rng_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Binds parameters onto a tape once each; repeated lookups reuse the same node.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, ParameterStore<T>& params, bool with_grad = true)
      : tape_(tape), params_(params), with_grad_(with_grad) {}

  Var operator()(const std::string& name) {
    const auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = tape_.parameter(params_.value(name), with_grad_ ? &params_.grad(name) : nullptr);
    bound_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }
  ParameterStore<T>& params() { return params_; }

 private:
  Tape<T>& tape_;
  ParameterStore<T>& params_;
  bool with_grad_;
  std::map<std::string, Var> bound_;
};

}  // namespace scannet
