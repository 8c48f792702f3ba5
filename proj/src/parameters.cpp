#include "trisk/parameters.hpp"

#include <stdexcept>

namespace trisk {

std::size_t ParameterSet::add(std::string name, Matrix init, bool decay) {
  if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  by_name_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(init), decay});
  return params_.size() - 1;
}

std::size_t ParameterSet::index(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return it->second;
}

bool ParameterSet::contains(std::string_view name) const { return by_name_.count(std::string(name)) != 0; }

Gradients ParameterSet::zeros_like() const {
  Gradients grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  return grads;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

bool ParameterSet::all_finite() const {
  for (const auto& p : params_)
    if (!p.value.allFinite()) return false;
  return true;
}

void ParameterSet::set_zero() {
  for (auto& p : params_) p.value.setZero();
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.decay != b.decay || a.value.rows() != b.value.rows() ||
        a.value.cols() != b.value.cols() || a.value != b.value)
      return false;
  }
  return true;
}

void zero(Gradients& grads) {
  for (auto& g : grads) g.setZero();
}

void accumulate(Gradients& into, const Gradients& from) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

}  // namespace trisk
