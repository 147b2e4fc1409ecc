#include "flowdpt/ndgrad/parameters.hpp"

#include <cmath>
#include <stdexcept>

namespace flowdpt::nd {

Parameter& ParameterStore::add(std::string name, Array init) {
  if (by_name_.contains(name)) {
    throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
  }
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(init);
  p->index = params_.size();
  by_name_.emplace(std::move(name), p->index);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::get(std::string_view name) {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) {
    throw std::out_of_range("ParameterStore: unknown parameter '" + std::string(name) + "'");
  }
  return *params_[it->second];
}

const Parameter& ParameterStore::get(std::string_view name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

bool ParameterStore::contains(std::string_view name) const {
  return by_name_.contains(std::string(name));
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

std::vector<Array> ParameterStore::snapshot() const {
  std::vector<Array> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void ParameterStore::restore(const std::vector<Array>& values) {
  if (values.size() != params_.size()) {
    throw std::invalid_argument("ParameterStore::restore: parameter count mismatch");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i]->value.shape()) {
      throw ShapeError("ParameterStore::restore(" + params_[i]->name + ")",
                       params_[i]->value.shape(), values[i].shape());
    }
    params_[i]->value = values[i];
  }
}

GradientSet::GradientSet(const ParameterStore& store) {
  grads_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    grads_.emplace_back(store.at(i).value.shape(), 0.0);
  }
}

void GradientSet::zero() {
  for (auto& g : grads_) g.fill(0.0);
}

double GradientSet::global_norm() const {
  double sq = 0.0;
  for (const auto& g : grads_) {
    for (double x : g.data()) sq += x * x;
  }
  return std::sqrt(sq);
}

}  // namespace flowdpt::nd
