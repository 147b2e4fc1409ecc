#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "flowdpt/ndgrad/array.hpp"

namespace flowdpt::nd {

struct Parameter {
  std::string name;
  Array value;
  std::size_t index = 0;  // position in the owning store
};

// Owns learnable leaves in insertion order. Addresses are stable, so layers
// keep raw Parameter pointers for the lifetime of the store.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Array init);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  Parameter& at(std::size_t i) { return *params_.at(i); }
  const Parameter& at(std::size_t i) const { return *params_.at(i); }
  std::size_t total_elements() const;

  std::vector<Array> snapshot() const;
  void restore(const std::vector<Array>& values);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// Per-parameter gradient buffers aligned with a store's order.
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(const ParameterStore& store);

  std::size_t size() const { return grads_.size(); }
  Array& operator[](std::size_t i) { return grads_[i]; }
  const Array& operator[](std::size_t i) const { return grads_[i]; }

  void zero();
  double global_norm() const;

 private:
  std::vector<Array> grads_;
};

}  // namespace flowdpt::nd
