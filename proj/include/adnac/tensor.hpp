#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "adnac/error.hpp"

namespace adnac {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

// Dense row-major array. Rank is 0 (scalar), 2 (channels, time) or
// 3 (batch, channels, time) in practice but nothing here depends on that.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool empty() const { return data.empty(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  T item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  T& at3(std::size_t b, std::size_t c, std::size_t t) { return data[(b * shape[1] + c) * shape[2] + t]; }
  T at3(std::size_t b, std::size_t c, std::size_t t) const { return data[(b * shape[1] + c) * shape[2] + t]; }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out;
  out.shape = t.shape;
  out.data.assign(t.data.begin(), t.data.end());
  return out;
}

// Trainable (or frozen) named array. Gradients accumulate into `grad`.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  void zero_grad() { grad = Tensor<T>(value.shape); }
};

// Ordered, name-indexed collection of parameters with stable addresses.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& o) { *this = o; }
  ParamStore& operator=(const ParamStore& o) {
    if (this == &o) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : o.params_) {
      auto& q = add(p->name, p->value);
      q.frozen = p->frozen;
    }
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = std::move(value);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void set_frozen(bool frozen) {
    for (auto& p : params_) p->frozen = frozen;
  }

  std::vector<Parameter<T>*> pointers() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  // Order- and name-sensitive checksum of the raw parameter bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ull;
    auto feed = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001B3ull;
      }
    };
    for (const auto& p : params_) {
      feed(p->name.data(), p->name.size());
      feed(p->value.data.data(), p->value.data.size() * sizeof(T));
    }
    return h;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p->name, tensor_cast<U>(p->value)).frozen = p->frozen;
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace adnac
