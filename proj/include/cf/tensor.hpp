#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cf/error.hpp"

namespace cf {

using NodeId = std::int64_t;
inline constexpr NodeId kNoNode = -1;

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// Dense row-major tensor of 64-bit floats. Values are treated as immutable
// once an op has consumed them. `node` links the tensor to the tape entry
// that produced it; constants carry kNoNode.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  NodeId node = kNoNode;
  bool requires_grad = false;

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1; }

  double item() const {
    if (data.size() != 1) throw ShapeError("item() on non-scalar tensor");
    return data[0];
  }

  double& operator()(std::size_t i) { return data[i]; }
  double operator()(std::size_t i) const { return data[i]; }
  double& operator()(std::size_t i, std::size_t j) {
    return data[i * shape[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
  }
  double& operator()(std::size_t n, std::size_t c, std::size_t h,
                     std::size_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  double operator()(std::size_t n, std::size_t c, std::size_t h,
                    std::size_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
};

// Validated constant constructors. Shape/data mismatch -> SizeError,
// non-finite entries -> DataError.
Tensor tensor(std::vector<std::size_t> shape, std::vector<double> data);
Tensor zeros(std::vector<std::size_t> shape);
Tensor full(std::vector<std::size_t> shape, double value);
Tensor scalar(double value);

void check_all_finite(const std::vector<double>& data, const char* what);

}  // namespace cf
