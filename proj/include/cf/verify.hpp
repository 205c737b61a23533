#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cf/tensor.hpp"

namespace cf::verify {

// Oracles used by tests and the acceptance suite. Everything here is
// deliberately naive: scalar arithmetic and textbook loops only, sharing no
// code with the implementations it checks.

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_coordinate;  // "<param>[<index>]"
  std::size_t coordinates_checked = 0;

  bool passes(double rel_tol, double abs_tol) const;
};

// One named parameter block: `data` is perturbed in place, `grad` holds the
// analytic gradient being checked.
struct ParamView {
  std::string name;
  double* data = nullptr;
  std::size_t size = 0;
  const double* grad = nullptr;
};

// Central differences (f(t+e) - f(t-e)) / 2e per coordinate, compared
// against the supplied analytic gradients. The loss callable must be a
// deterministic function of the parameter storage; two identical
// evaluations are demanded up front (OracleError otherwise).
FiniteDiffReport finite_diff(const std::function<double()>& loss,
                             std::vector<ParamView> params, double epsilon);

// Seven-nested-loop convolution reference, cross-correlation convention.
Tensor naive_conv_forward(const Tensor& input, const Tensor& kernel,
                          std::int64_t stride, std::int64_t padding);

// Textbook i/j/k matrix product with a local accumulator.
Tensor naive_matmul(const Tensor& a, const Tensor& b);

// Theorem-1 optimum D*(x) = p_l(x) / (p_l(x) + p_u(x)) on a shared finite
// support. Bins where both masses are zero are undefined and reported as
// NaN. Values are canonicalized so that discriminator_optimum(a, b)[i] ==
// 1 - discriminator_optimum(b, a)[i] holds bit-exactly.
std::vector<double> discriminator_optimum(const std::vector<double>& p_labeled,
                                          const std::vector<double>& p_unlabeled);

}  // namespace cf::verify
