#include "cf/tensor.hpp"

#include <cmath>
#include <string>

namespace cf {

void check_all_finite(const std::vector<double>& data, const char* what) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw DataError(std::string(what) + " has non-finite entry at index " +
                      std::to_string(i));
    }
  }
}

Tensor tensor(std::vector<std::size_t> shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw SizeError("shape holds " + std::to_string(shape_numel(shape)) +
                    " elements but data holds " + std::to_string(data.size()));
  }
  check_all_finite(data, "tensor data");
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::move(data);
  return t;
}

Tensor zeros(std::vector<std::size_t> shape) {
  Tensor t;
  t.data.assign(shape_numel(shape), 0.0);
  t.shape = std::move(shape);
  return t;
}

Tensor full(std::vector<std::size_t> shape, double value) {
  Tensor t;
  t.data.assign(shape_numel(shape), value);
  t.shape = std::move(shape);
  return t;
}

Tensor scalar(double value) { return full({}, value); }

}  // namespace cf
