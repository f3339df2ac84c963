#include "translab/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace translab {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor shape has negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> values_in)
    : shape(std::move(shape_in)), values(std::move(values_in)) {
  check_invariants();
}

Tensor Tensor::zeros(std::vector<int> shape_in) {
  Tensor t;
  std::size_t n = shape_numel(shape_in);
  t.shape = std::move(shape_in);
  t.values.assign(n, 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape_in, double fill) {
  Tensor t = zeros(std::move(shape_in));
  for (double& v : t.values) v = fill;
  return t;
}

void Tensor::alloc_grad() { grad.assign(values.size(), 0.0); }

void Tensor::zero_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  else grad.assign(grad.size(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_invariants() const {
  if (values.size() != shape_numel(shape))
    throw std::invalid_argument("tensor values length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  if (!grad.empty() && grad.size() != values.size())
    throw std::invalid_argument("tensor gradient size does not match values");
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace translab
