#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mantis/rng.hpp"
#include "mantis/tensor.hpp"

namespace mantis {

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered, named view over trainable leaves. Order is the registration
/// order and defines checkpoint layout and optimizer state layout.
template <typename T>
class ParameterList {
 public:
  void add(std::string name, const Tensor<T>& tensor) {
    items_.push_back({std::move(name), tensor});
  }
  void append(const ParameterList& other, std::string_view prefix = {}) {
    for (const auto& p : other.items_) items_.push_back({std::string(prefix) + p.name, p.tensor});
  }

  std::size_t size() const { return items_.size(); }
  const std::vector<NamedParameter<T>>& items() const { return items_; }
  std::vector<NamedParameter<T>>& items() { return items_; }

  const Tensor<T>* find(std::string_view name) const {
    for (const auto& p : items_)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedParameter<T>> items_;
};

template <typename T>
Tensor<T> uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> normal_parameter(Shape shape, double stddev, Rng& rng) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(stddev * rng.normal());
  return Tensor<T>::from(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> zero_parameter(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> constant_parameter(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

/// Overwrites a leaf's values with zeros in place.
template <typename T>
void fill_zero(Tensor<T>& t) {
  for (auto& v : t.mutable_data()) v = T(0);
}

}  // namespace mantis
