#include "cf/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cf/error.hpp"

namespace cf::verify {

bool FiniteDiffReport::passes(double rel_tol, double abs_tol) const {
  return max_abs_error <= abs_tol || max_rel_error <= rel_tol;
}

FiniteDiffReport finite_diff(const std::function<double()>& loss,
                             std::vector<ParamView> params, double epsilon) {
  if (epsilon <= 0.0) throw OracleError("finite_diff epsilon must be positive");
  const double f0 = loss();
  const double f1 = loss();
  if (f0 != f1) {
    throw OracleError("loss function is not deterministic: " +
                      std::to_string(f0) + " vs " + std::to_string(f1));
  }

  FiniteDiffReport report;
  double worst_score = -1.0;
  for (const ParamView& p : params) {
    for (std::size_t i = 0; i < p.size; ++i) {
      const double saved = p.data[i];
      p.data[i] = saved + epsilon;
      const double hi = loss();
      p.data[i] = saved - epsilon;
      const double lo = loss();
      p.data[i] = saved;

      const double fd = (hi - lo) / (2.0 * epsilon);
      const double ad = p.grad != nullptr ? p.grad[i] : 0.0;
      const double abs_err = std::abs(fd - ad);
      const double denom = std::max(std::abs(fd), std::abs(ad));
      const double rel_err = denom > 0.0 ? abs_err / denom : 0.0;

      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, rel_err);
      ++report.coordinates_checked;
      // Track the coordinate that is worst under the pass rule
      // (absolute OR relative agreement).
      const double score = std::min(abs_err, rel_err);
      if (score > worst_score) {
        worst_score = score;
        report.worst_coordinate = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

Tensor naive_conv_forward(const Tensor& input, const Tensor& kernel,
                          std::int64_t stride, std::int64_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("naive_conv_forward expects NCHW input and OIHW kernel");
  }
  if (input.shape[1] != kernel.shape[1]) {
    throw SizeError("naive_conv_forward channel mismatch");
  }
  const std::int64_t n_batch = static_cast<std::int64_t>(input.shape[0]);
  const std::int64_t in_c = static_cast<std::int64_t>(input.shape[1]);
  const std::int64_t h = static_cast<std::int64_t>(input.shape[2]);
  const std::int64_t w = static_cast<std::int64_t>(input.shape[3]);
  const std::int64_t out_c = static_cast<std::int64_t>(kernel.shape[0]);
  const std::int64_t kh = static_cast<std::int64_t>(kernel.shape[2]);
  const std::int64_t kw = static_cast<std::int64_t>(kernel.shape[3]);
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw SizeError("naive_conv_forward kernel larger than padded input");
  }
  const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw SizeError("naive_conv_forward empty output");

  Tensor out = zeros({static_cast<std::size_t>(n_batch),
                      static_cast<std::size_t>(out_c),
                      static_cast<std::size_t>(oh),
                      static_cast<std::size_t>(ow)});
  for (std::int64_t n = 0; n < n_batch; ++n) {
    for (std::int64_t o = 0; o < out_c; ++o) {
      for (std::int64_t y = 0; y < oh; ++y) {
        for (std::int64_t x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < in_c; ++c) {
            for (std::int64_t dy = 0; dy < kh; ++dy) {
              for (std::int64_t dx = 0; dx < kw; ++dx) {
                const std::int64_t iy = y * stride + dy - padding;
                const std::int64_t ix = x * stride + dx - padding;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += input.data[(((n * in_c + c) * h) + iy) * w + ix] *
                       kernel.data[(((o * in_c + c) * kh) + dy) * kw + dx];
              }
            }
          }
          out.data[(((n * out_c + o) * oh) + y) * ow + x] = acc;
        }
      }
    }
  }
  return out;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
    throw SizeError("naive_matmul dimension mismatch");
  }
  const std::size_t n = a.shape[0], m = a.shape[1], p = b.shape[1];
  Tensor out = zeros({n, p});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        acc += a.data[i * m + k] * b.data[k * p + j];
      }
      out.data[i * p + j] = acc;
    }
  }
  return out;
}

std::vector<double> discriminator_optimum(
    const std::vector<double>& p_labeled,
    const std::vector<double>& p_unlabeled) {
  if (p_labeled.size() != p_unlabeled.size()) {
    throw OracleError("discriminator_optimum histograms have different supports");
  }
  std::vector<double> out(p_labeled.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = p_labeled[i];
    const double b = p_unlabeled[i];
    if (a < 0.0 || b < 0.0) {
      throw OracleError("histogram mass must be nonnegative");
    }
    if (a == 0.0 && b == 0.0) {
      out[i] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    // Evaluate the smaller ratio and take complements once. 1 - w is exact
    // for w in [0.5, 1], so the pair (q, w) satisfies q + w == 1 bitwise
    // and the swapped-arguments symmetry holds with no tolerance.
    const double q_raw = std::min(a, b) / (a + b);
    const double w = 1.0 - q_raw;
    const double q = 1.0 - w;
    out[i] = a <= b ? q : w;
  }
  return out;
}

}  // namespace cf::verify
