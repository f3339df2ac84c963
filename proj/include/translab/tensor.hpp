#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace translab {

// Dense row-major tensor of doubles. The gradient buffer is either empty or
// exactly the size of values.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(std::vector<int> shape_in, std::vector<double> values_in);

  static Tensor zeros(std::vector<int> shape_in);
  static Tensor full(std::vector<int> shape_in, double fill);

  std::size_t size() const { return values.size(); }
  int dim(std::size_t i) const { return shape[i]; }
  int rank() const { return static_cast<int>(shape.size()); }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  // 2-D accessors for (rows, cols) tensors.
  double& at(int r, int c) { return values[static_cast<std::size_t>(r) * shape[1] + c]; }
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * shape[1] + c]; }

  void alloc_grad();
  void zero_grad();
  bool has_grad() const { return !grad.empty(); }
  bool all_finite() const;

  // Throws std::invalid_argument when shape/values/grad disagree.
  void check_invariants() const;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
bool same_shape(const Tensor& a, const Tensor& b);

// Row view helpers for (batch, features) tensors.
inline const double* row_ptr(const Tensor& t, int row) {
  return t.values.data() + static_cast<std::size_t>(row) * t.shape[1];
}
inline double* row_ptr(Tensor& t, int row) {
  return t.values.data() + static_cast<std::size_t>(row) * t.shape[1];
}

}  // namespace translab
