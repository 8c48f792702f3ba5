#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace trisk {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  bool decay = true;  // subject to decoupled weight decay
};

/// Gradient buffers aligned index-for-index with a ParameterSet.
using Gradients = std::vector<Matrix>;

/// Ordered, named collection of every learnable array of a model.
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix init, bool decay = true);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t index(std::string_view name) const;  // throws std::out_of_range
  bool contains(std::string_view name) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  Gradients zeros_like() const;
  std::size_t scalar_count() const;
  bool all_finite() const;
  void set_zero();

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

void zero(Gradients& grads);
void accumulate(Gradients& into, const Gradients& from);

}  // namespace trisk
