#include "cf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

namespace cf {
namespace {

using i64 = std::int64_t;

constexpr double kSigmoidClamp = 1e-15;

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kRelu: return "relu";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kAbs: return "abs";
    case OpKind::kScale: return "scale";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kSum: return "sum";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kMean: return "mean";
    case OpKind::kMeanAxis: return "mean_axis";
    case OpKind::kMax: return "max";
    case OpKind::kMaxAxis: return "max_axis";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kDense: return "dense";
    case OpKind::kScaledNorm: return "scaled_norm";
    case OpKind::kMaxPool: return "max_pool";
    case OpKind::kAvgPool: return "avg_pool";
    case OpKind::kSoftmaxTau: return "softmax_tau";
    case OpKind::kLogSoftmaxTau: return "log_softmax_tau";
  }
  return "?";
}

i64 div_ceil(i64 a, i64 b) { return a > 0 ? (a + b - 1) / b : a / b; }
i64 div_floor(i64 a, i64 b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

Tensor bare(std::vector<std::size_t> shape, std::vector<double> data) {
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::move(data);
  return t;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw SizeError(std::string(op) + " operands have different shapes");
  }
}

// ---------------------------------------------------------------------------
// Forward kernels. Pure functions of their operands; shared between op
// execution and tape replay so both take exactly the same rounding path.
// ---------------------------------------------------------------------------

template <typename F>
Tensor map2(const Tensor& a, const Tensor& b, F f) {
  Tensor out = bare(a.shape, std::vector<double>(a.data.size()));
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    out.data[i] = f(a.data[i], b.data[i]);
  }
  return out;
}

template <typename F>
Tensor map1(const Tensor& x, F f) {
  Tensor out = bare(x.shape, std::vector<double>(x.data.size()));
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = f(x.data[i]);
  return out;
}

double stable_sigmoid(double x) {
  double v;
  if (x >= 0.0) {
    v = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    v = e / (1.0 + e);
  }
  return std::min(std::max(v, kSigmoidClamp), 1.0 - kSigmoidClamp);
}

Tensor k_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.shape[0], m = a.shape[1], p = b.shape[1];
  Tensor out = zeros({n, p});
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = &a.data[i * m];
    double* orow = &out.data[i * p];
    for (std::size_t k = 0; k < m; ++k) {
      const double aik = arow[k];
      const double* brow = &b.data[k * p];
      for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor k_conv2d(const Tensor& in, const Tensor& ker, const Tensor* bias,
                i64 stride, i64 pad) {
  const i64 n_batch = static_cast<i64>(in.shape[0]);
  const i64 in_c = static_cast<i64>(in.shape[1]);
  const i64 h = static_cast<i64>(in.shape[2]);
  const i64 w = static_cast<i64>(in.shape[3]);
  const i64 out_c = static_cast<i64>(ker.shape[0]);
  const i64 kh = static_cast<i64>(ker.shape[2]);
  const i64 kw = static_cast<i64>(ker.shape[3]);
  const i64 oh = (h + 2 * pad - kh) / stride + 1;
  const i64 ow = (w + 2 * pad - kw) / stride + 1;

  Tensor out = zeros({static_cast<std::size_t>(n_batch),
                      static_cast<std::size_t>(out_c),
                      static_cast<std::size_t>(oh),
                      static_cast<std::size_t>(ow)});
  for (i64 n = 0; n < n_batch; ++n) {
    for (i64 o = 0; o < out_c; ++o) {
      double* out_plane = &out.data[((n * out_c + o) * oh) * ow];
      if (bias != nullptr) {
        const double b = bias->data[static_cast<std::size_t>(o)];
        for (i64 i = 0; i < oh * ow; ++i) out_plane[i] = b;
      }
      for (i64 c = 0; c < in_c; ++c) {
        const double* in_plane = &in.data[((n * in_c + c) * h) * w];
        for (i64 dy = 0; dy < kh; ++dy) {
          for (i64 dx = 0; dx < kw; ++dx) {
            const double wgt = ker.data[(((o * in_c + c) * kh + dy) * kw) + dx];
            const i64 y_lo = std::max<i64>(0, div_ceil(pad - dy, stride));
            const i64 y_hi = std::min<i64>(oh - 1, div_floor(h - 1 + pad - dy, stride));
            const i64 x_lo = std::max<i64>(0, div_ceil(pad - dx, stride));
            const i64 x_hi = std::min<i64>(ow - 1, div_floor(w - 1 + pad - dx, stride));
            for (i64 y = y_lo; y <= y_hi; ++y) {
              const double* in_row = in_plane + (y * stride + dy - pad) * w;
              double* out_row = out_plane + y * ow;
              for (i64 x = x_lo; x <= x_hi; ++x) {
                out_row[x] += wgt * in_row[x * stride + dx - pad];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor k_dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.shape[0], f = x.shape[1], u = w.shape[1];
  Tensor out = zeros({n, u});
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out.data[i * u];
    for (std::size_t j = 0; j < u; ++j) orow[j] = b.data[j];
    const double* xrow = &x.data[i * f];
    for (std::size_t k = 0; k < f; ++k) {
      const double xv = xrow[k];
      const double* wrow = &w.data[k * u];
      for (std::size_t j = 0; j < u; ++j) orow[j] += xv * wrow[j];
    }
  }
  return out;
}

// Layout helper for single-axis reductions: collapse to [outer, len, inner].
struct AxisSpan {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSpan axis_span(const std::vector<std::size_t>& shape, std::size_t axis) {
  AxisSpan s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<std::size_t> drop_axis(const std::vector<std::size_t>& shape,
                                   std::size_t axis) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  return out;
}

Tensor k_sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data) acc += v;
  return bare({}, {acc});
}

Tensor k_sum_axis(const Tensor& x, std::size_t axis) {
  const AxisSpan s = axis_span(x.shape, axis);
  Tensor out = zeros(drop_axis(x.shape, axis));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.len; ++k) {
      const double* src = &x.data[(o * s.len + k) * s.inner];
      double* dst = &out.data[o * s.inner];
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return out;
}

Tensor k_mean(const Tensor& x) {
  Tensor s = k_sum(x);
  s.data[0] /= static_cast<double>(x.data.size());
  return s;
}

Tensor k_mean_axis(const Tensor& x, std::size_t axis) {
  Tensor s = k_sum_axis(x, axis);
  const double inv = 1.0 / static_cast<double>(x.shape[axis]);
  for (double& v : s.data) v *= inv;
  return s;
}

Tensor k_max(const Tensor& x) {
  double best = x.data[0];
  for (double v : x.data) {
    if (v > best) best = v;
  }
  return bare({}, {best});
}

Tensor k_max_axis(const Tensor& x, std::size_t axis) {
  const AxisSpan s = axis_span(x.shape, axis);
  Tensor out = zeros(drop_axis(x.shape, axis));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double best = x.data[(o * s.len) * s.inner + i];
      for (std::size_t k = 1; k < s.len; ++k) {
        const double v = x.data[(o * s.len + k) * s.inner + i];
        if (v > best) best = v;
      }
      out.data[o * s.inner + i] = best;
    }
  }
  return out;
}

Tensor k_concat_rows(const Tensor& a, const Tensor& b) {
  std::vector<std::size_t> shape = a.shape;
  shape[0] = a.shape[0] + b.shape[0];
  std::vector<double> data;
  data.reserve(a.data.size() + b.data.size());
  data.insert(data.end(), a.data.begin(), a.data.end());
  data.insert(data.end(), b.data.begin(), b.data.end());
  return bare(std::move(shape), std::move(data));
}

Tensor k_scaled_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     const std::vector<double>& mean,
                     const std::vector<double>& invstd) {
  const std::size_t n = x.shape[0], c = x.shape[1], plane = x.shape[2] * x.shape[3];
  Tensor out = bare(x.shape, std::vector<double>(x.data.size()));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double g = gamma.data[ch], s = invstd[ch], m = mean[ch],
                   bt = beta.data[ch];
      const double* src = &x.data[(b * c + ch) * plane];
      double* dst = &out.data[(b * c + ch) * plane];
      for (std::size_t i = 0; i < plane; ++i) {
        dst[i] = g * ((src[i] - m) * s) + bt;
      }
    }
  }
  return out;
}

void channel_stats(const Tensor& x, std::vector<double>* mean,
                   std::vector<double>* var) {
  const std::size_t n = x.shape[0], c = x.shape[1], plane = x.shape[2] * x.shape[3];
  const double inv_m = 1.0 / static_cast<double>(n * plane);
  mean->assign(c, 0.0);
  var->assign(c, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = &x.data[(b * c + ch) * plane];
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += src[i];
      (*mean)[ch] += acc;
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) (*mean)[ch] *= inv_m;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double m = (*mean)[ch];
      const double* src = &x.data[(b * c + ch) * plane];
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = src[i] - m;
        acc += d * d;
      }
      (*var)[ch] += acc;
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) (*var)[ch] *= inv_m;
}

template <bool kIsMax>
Tensor k_pool(const Tensor& x, std::size_t window, std::size_t stride) {
  const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const std::size_t oh = (h - window) / stride + 1;
  const std::size_t ow = (w - window) / stride + 1;
  Tensor out = zeros({n, c, oh, ow});
  const double inv_area = 1.0 / static_cast<double>(window * window);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = &x.data[(b * c + ch) * h * w];
      double* dst = &out.data[(b * c + ch) * oh * ow];
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xo = 0; xo < ow; ++xo) {
          const std::size_t y0 = y * stride, x0 = xo * stride;
          if (kIsMax) {
            double best = plane[y0 * w + x0];
            for (std::size_t dy = 0; dy < window; ++dy) {
              for (std::size_t dx = 0; dx < window; ++dx) {
                const double v = plane[(y0 + dy) * w + (x0 + dx)];
                if (v > best) best = v;
              }
            }
            dst[y * ow + xo] = best;
          } else {
            double acc = 0.0;
            for (std::size_t dy = 0; dy < window; ++dy) {
              for (std::size_t dx = 0; dx < window; ++dx) {
                acc += plane[(y0 + dy) * w + (x0 + dx)];
              }
            }
            dst[y * ow + xo] = acc * inv_area;
          }
        }
      }
    }
  }
  return out;
}

template <bool kLog>
Tensor k_softmax(const Tensor& logits, double tau) {
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  Tensor out = bare(logits.shape, std::vector<double>(logits.data.size()));
  std::vector<double> row(k);
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = &logits.data[i * k];
    double* dst = &out.data[i * k];
    double hi = src[0];
    for (std::size_t j = 1; j < k; ++j) hi = std::max(hi, src[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = (src[j] - hi) / tau;
      denom += std::exp(row[j]);
    }
    if (kLog) {
      const double lse = std::log(denom);
      for (std::size_t j = 0; j < k; ++j) dst[j] = row[j] - lse;
    } else {
      const double inv = 1.0 / denom;
      for (std::size_t j = 0; j < k; ++j) dst[j] = std::exp(row[j]) * inv;
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Recording
// ---------------------------------------------------------------------------

NodeId Tape::record(TapeNode node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

Tensor Tape::result(OpKind kind, std::vector<const Tensor*> operands,
                    Tensor value, std::vector<double> fargs,
                    std::vector<std::int64_t> iargs) {
  for (double v : value.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name(kind)) +
                         " produced a non-finite value");
    }
  }
  bool needs_grad = false;
  for (const Tensor* t : operands) {
    if (t->requires_grad) needs_grad = true;
  }
  if (!needs_grad) return value;

  TapeNode node;
  node.kind = kind;
  node.fargs = std::move(fargs);
  node.iargs = std::move(iargs);
  for (const Tensor* t : operands) {
    if (t->requires_grad) {
      if (t->node < 0 || t->node >= static_cast<NodeId>(nodes_.size())) {
        throw DataError("operand does not belong to this tape");
      }
      node.inputs.push_back(t->node);
    } else {
      node.inputs.push_back(kNoNode);
      node.saved.push_back(bare(t->shape, t->data));
    }
  }
  node.value = bare(value.shape, value.data);
  const NodeId id = record(std::move(node));
  value.node = id;
  value.requires_grad = true;
  return value;
}

const Tensor& Tape::operand(const TapeNode& node, std::size_t slot) const {
  if (node.inputs[slot] >= 0) {
    return nodes_[static_cast<std::size_t>(node.inputs[slot])].value;
  }
  std::size_t const_index = 0;
  for (std::size_t i = 0; i < slot; ++i) {
    if (node.inputs[i] == kNoNode) ++const_index;
  }
  return node.saved[const_index];
}

const TapeNode& Tape::node(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
    throw SizeError("node id out of range");
  }
  return nodes_[static_cast<std::size_t>(id)];
}

Tensor Tape::create(std::vector<std::size_t> shape, std::vector<double> data,
                    bool requires_grad) {
  Tensor t = tensor(std::move(shape), std::move(data));
  if (requires_grad) {
    TapeNode node;
    node.kind = OpKind::kLeaf;
    node.value = bare(t.shape, t.data);
    t.node = record(std::move(node));
    t.requires_grad = true;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return result(OpKind::kAdd, {&a, &b},
                map2(a, b, [](double x, double y) { return x + y; }), {}, {});
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return result(OpKind::kSub, {&a, &b},
                map2(a, b, [](double x, double y) { return x - y; }), {}, {});
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return result(OpKind::kMul, {&a, &b},
                map2(a, b, [](double x, double y) { return x * y; }), {}, {});
}

Tensor Tape::relu(const Tensor& x) {
  return result(OpKind::kRelu, {&x},
                map1(x, [](double v) { return v > 0.0 ? v : 0.0; }), {}, {});
}

Tensor Tape::log(const Tensor& x) {
  for (double v : x.data) {
    if (v <= 0.0) throw DomainError("log of nonpositive value");
  }
  return result(OpKind::kLog, {&x},
                map1(x, [](double v) { return std::log(v); }), {}, {});
}

Tensor Tape::exp(const Tensor& x) {
  return result(OpKind::kExp, {&x},
                map1(x, [](double v) { return std::exp(v); }), {}, {});
}

Tensor Tape::abs(const Tensor& x) {
  return result(OpKind::kAbs, {&x},
                map1(x, [](double v) { return std::abs(v); }), {}, {});
}

Tensor Tape::scale(const Tensor& x, double c) {
  if (!std::isfinite(c)) throw DataError("scale factor is not finite");
  return result(OpKind::kScale, {&x},
                map1(x, [c](double v) { return c * v; }), {c}, {});
}

Tensor Tape::sigmoid(const Tensor& x) {
  return result(OpKind::kSigmoid, {&x}, map1(x, stable_sigmoid), {}, {});
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands");
  }
  if (a.shape[1] != b.shape[0]) {
    throw SizeError("matmul inner dimensions disagree: " +
                    std::to_string(a.shape[1]) + " vs " +
                    std::to_string(b.shape[0]));
  }
  return result(OpKind::kMatmul, {&a, &b}, k_matmul(a, b), {}, {});
}

namespace {
void validate_conv(const Tensor& input, const Tensor& kernel, i64 stride,
                   i64 padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError("conv2d expects NCHW input and OIHW kernel");
  }
  if (stride < 1) throw SizeError("conv2d stride must be >= 1");
  if (padding < 0) throw SizeError("conv2d padding must be >= 0");
  if (input.shape[1] != kernel.shape[1]) {
    throw SizeError("conv2d channel mismatch: input has " +
                    std::to_string(input.shape[1]) + ", kernel expects " +
                    std::to_string(kernel.shape[1]));
  }
  const i64 h = static_cast<i64>(input.shape[2]);
  const i64 w = static_cast<i64>(input.shape[3]);
  const i64 kh = static_cast<i64>(kernel.shape[2]);
  const i64 kw = static_cast<i64>(kernel.shape[3]);
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw SizeError("conv2d kernel larger than padded input");
  }
  if ((h + 2 * padding - kh) / stride + 1 < 1 ||
      (w + 2 * padding - kw) / stride + 1 < 1) {
    throw SizeError("conv2d output would be empty");
  }
}
}  // namespace

Tensor Tape::conv2d(const Tensor& input, const Tensor& kernel,
                    std::int64_t stride, std::int64_t padding) {
  validate_conv(input, kernel, stride, padding);
  return result(OpKind::kConv2d, {&input, &kernel},
                k_conv2d(input, kernel, nullptr, stride, padding), {},
                {stride, padding, /*has_bias=*/0});
}

Tensor Tape::conv2d(const Tensor& input, const Tensor& kernel,
                    const Tensor& bias, std::int64_t stride,
                    std::int64_t padding) {
  validate_conv(input, kernel, stride, padding);
  if (bias.rank() != 1 || bias.shape[0] != kernel.shape[0]) {
    throw SizeError("conv2d bias must have one entry per output channel");
  }
  return result(OpKind::kConv2d, {&input, &kernel, &bias},
                k_conv2d(input, kernel, &bias, stride, padding), {},
                {stride, padding, /*has_bias=*/1});
}

Tensor Tape::sum(const Tensor& x) {
  return result(OpKind::kSum, {&x}, k_sum(x), {}, {});
}

Tensor Tape::sum(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw SizeError("sum axis out of range");
  return result(OpKind::kSumAxis, {&x}, k_sum_axis(x, axis), {},
                {static_cast<i64>(axis)});
}

Tensor Tape::mean(const Tensor& x) {
  if (x.numel() == 0) throw DataError("mean of empty tensor");
  return result(OpKind::kMean, {&x}, k_mean(x), {}, {});
}

Tensor Tape::mean(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw SizeError("mean axis out of range");
  if (x.shape[axis] == 0) throw DataError("mean over empty axis");
  return result(OpKind::kMeanAxis, {&x}, k_mean_axis(x, axis), {},
                {static_cast<i64>(axis)});
}

Tensor Tape::max(const Tensor& x) {
  if (x.numel() == 0) throw DataError("max of empty tensor");
  return result(OpKind::kMax, {&x}, k_max(x), {}, {});
}

Tensor Tape::max(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw SizeError("max axis out of range");
  if (x.shape[axis] == 0) throw DataError("max over empty axis");
  return result(OpKind::kMaxAxis, {&x}, k_max_axis(x, axis), {},
                {static_cast<i64>(axis)});
}

Tensor Tape::reshape(const Tensor& x, std::vector<std::size_t> shape) {
  if (shape_numel(shape) != x.numel()) {
    throw SizeError("reshape changes element count");
  }
  Tensor out = bare(shape, x.data);
  return result(OpKind::kReshape, {&x}, std::move(out), {}, {});
}

Tensor Tape::concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank()) {
    throw ShapeError("concat_rows expects equal-rank tensors");
  }
  for (std::size_t i = 1; i < a.rank(); ++i) {
    if (a.shape[i] != b.shape[i]) {
      throw SizeError("concat_rows trailing dimensions disagree");
    }
  }
  return result(OpKind::kConcatRows, {&a, &b}, k_concat_rows(a, b), {},
                {static_cast<i64>(a.shape[0])});
}

Tensor Tape::dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("dense expects x [N,F], w [F,U], b [U]");
  }
  if (x.shape[1] != w.shape[0]) {
    throw SizeError("dense width mismatch: input has " +
                    std::to_string(x.shape[1]) + " features, weight expects " +
                    std::to_string(w.shape[0]));
  }
  if (b.shape[0] != w.shape[1]) {
    throw SizeError("dense bias width mismatch");
  }
  return result(OpKind::kDense, {&x, &w, &b}, k_dense(x, w, b), {}, {});
}

Tensor Tape::scaled_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta,
                         const std::vector<double>& running_mean,
                         const std::vector<double>& running_var, double eps,
                         bool use_batch_stats,
                         NormBatchStats* batch_stats_out) {
  if (x.rank() != 4) throw ShapeError("scaled_norm expects NCHW input");
  const std::size_t c = x.shape[1];
  if (gamma.numel() != c || beta.numel() != c) {
    throw SizeError("scaled_norm channel mismatch: input has " +
                    std::to_string(c) + " channels, gamma has " +
                    std::to_string(gamma.numel()));
  }
  if (x.shape[0] == 0) throw DataError("scaled_norm on an empty batch");
  if (eps <= 0.0) throw ConfigError("scaled_norm eps must be positive");

  std::vector<double> mean, var;
  if (use_batch_stats) {
    channel_stats(x, &mean, &var);
    if (batch_stats_out != nullptr) {
      batch_stats_out->mean = mean;
      batch_stats_out->var = var;
    }
  } else {
    if (running_mean.size() != c || running_var.size() != c) {
      throw SizeError("scaled_norm running statistics length mismatch");
    }
    mean = running_mean;
    var = running_var;
  }
  for (double v : var) {
    if (v < 0.0) throw DataError("scaled_norm variance is negative");
  }
  std::vector<double> invstd(c);
  for (std::size_t i = 0; i < c; ++i) invstd[i] = 1.0 / std::sqrt(var[i] + eps);

  Tensor value = k_scaled_norm(x, gamma, beta, mean, invstd);
  Tensor out = result(OpKind::kScaledNorm, {&x, &gamma, &beta},
                      std::move(value), {eps},
                      {use_batch_stats ? i64{1} : i64{0}});
  if (out.node != kNoNode) {
    TapeNode& node = nodes_[static_cast<std::size_t>(out.node)];
    node.saved.push_back(bare({c}, mean));
    node.saved.push_back(bare({c}, invstd));
  }
  return out;
}

Tensor Tape::max_pool(const Tensor& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("max_pool expects NCHW input");
  if (window < 1 || stride < 1) throw SizeError("pool window/stride must be >= 1");
  if (x.shape[2] < window || x.shape[3] < window) {
    throw SizeError("pool window larger than input");
  }
  return result(OpKind::kMaxPool, {&x}, k_pool<true>(x, window, stride), {},
                {static_cast<i64>(window), static_cast<i64>(stride)});
}

Tensor Tape::avg_pool(const Tensor& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("avg_pool expects NCHW input");
  if (window < 1 || stride < 1) throw SizeError("pool window/stride must be >= 1");
  if (x.shape[2] < window || x.shape[3] < window) {
    throw SizeError("pool window larger than input");
  }
  return result(OpKind::kAvgPool, {&x}, k_pool<false>(x, window, stride), {},
                {static_cast<i64>(window), static_cast<i64>(stride)});
}

Tensor Tape::softmax_tau(const Tensor& logits, double tau) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [N,K] logits");
  if (tau <= 0.0) throw DomainError("softmax temperature must be positive");
  return result(OpKind::kSoftmaxTau, {&logits}, k_softmax<false>(logits, tau),
                {tau}, {});
}

Tensor Tape::log_softmax_tau(const Tensor& logits, double tau) {
  if (logits.rank() != 2) throw ShapeError("log_softmax expects [N,K] logits");
  if (tau <= 0.0) throw DomainError("softmax temperature must be positive");
  return result(OpKind::kLogSoftmaxTau, {&logits}, k_softmax<true>(logits, tau),
                {tau}, {});
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void Tape::accumulate(NodeId id, const std::vector<double>& contribution,
                      const std::vector<std::size_t>& shape) {
  if (id < 0) return;
  auto& slot = grads_[static_cast<std::size_t>(id)];
  if (!slot.has_value()) {
    slot = bare(shape, std::vector<double>(contribution.size(), 0.0));
  }
  std::vector<double>& dst = slot->data;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += contribution[i];
}

namespace {
// Direct-accumulation buffer for one input of a node.
std::vector<double>* grad_target(std::vector<std::optional<Tensor>>& grads,
                                 const std::vector<TapeNode>& nodes,
                                 NodeId id) {
  if (id < 0) return nullptr;
  auto& slot = grads[static_cast<std::size_t>(id)];
  if (!slot.has_value()) {
    const Tensor& v = nodes[static_cast<std::size_t>(id)].value;
    slot = bare(v.shape, std::vector<double>(v.data.size(), 0.0));
  }
  return &slot->data;
}
}  // namespace

void Tape::backward_node(NodeId id) {
  const TapeNode& node = nodes_[static_cast<std::size_t>(id)];
  const std::vector<double>& g = grads_[static_cast<std::size_t>(id)]->data;
  auto target = [&](std::size_t slot) {
    return grad_target(grads_, nodes_, node.inputs[slot]);
  };

  switch (node.kind) {
    case OpKind::kLeaf:
      break;
    case OpKind::kAdd: {
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      }
      if (auto* gb = target(1)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
      }
      break;
    }
    case OpKind::kSub: {
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      }
      if (auto* gb = target(1)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
      }
      break;
    }
    case OpKind::kMul: {
      const Tensor& a = operand(node, 0);
      const Tensor& b = operand(node, 1);
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.data[i];
      }
      if (auto* gb = target(1)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.data[i];
      }
      break;
    }
    case OpKind::kRelu: {
      const Tensor& x = operand(node, 0);
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x.data[i] > 0.0) (*gx)[i] += g[i];
        }
      }
      break;
    }
    case OpKind::kLog: {
      const Tensor& x = operand(node, 0);
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / x.data[i];
      }
      break;
    }
    case OpKind::kExp: {
      const std::vector<double>& y = node.value.data;
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i];
      }
      break;
    }
    case OpKind::kAbs: {
      const Tensor& x = operand(node, 0);
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          // sign(0) == 0 keeps exact zeros stable under the L1 subgradient.
          if (x.data[i] > 0.0) {
            (*gx)[i] += g[i];
          } else if (x.data[i] < 0.0) {
            (*gx)[i] -= g[i];
          }
        }
      }
      break;
    }
    case OpKind::kScale: {
      const double c = node.fargs[0];
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += c * g[i];
      }
      break;
    }
    case OpKind::kSigmoid: {
      const std::vector<double>& y = node.value.data;
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          (*gx)[i] += g[i] * y[i] * (1.0 - y[i]);
        }
      }
      break;
    }
    case OpKind::kMatmul: {
      const Tensor& a = operand(node, 0);
      const Tensor& b = operand(node, 1);
      const std::size_t n = a.shape[0], m = a.shape[1], p = b.shape[1];
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < m; ++k) {
            double acc = 0.0;
            const double* grow = &g[i * p];
            const double* brow = &b.data[k * p];
            for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
            (*ga)[i * m + k] += acc;
          }
        }
      }
      if (auto* gb = target(1)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* arow = &a.data[i * m];
          const double* grow = &g[i * p];
          for (std::size_t k = 0; k < m; ++k) {
            const double aik = arow[k];
            double* gbrow = &(*gb)[k * p];
            for (std::size_t j = 0; j < p; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
      break;
    }
    case OpKind::kConv2d: {
      const Tensor& in = operand(node, 0);
      const Tensor& ker = operand(node, 1);
      const i64 stride = node.iargs[0], pad = node.iargs[1];
      const bool has_bias = node.iargs[2] != 0;
      const i64 n_batch = static_cast<i64>(in.shape[0]);
      const i64 in_c = static_cast<i64>(in.shape[1]);
      const i64 h = static_cast<i64>(in.shape[2]);
      const i64 w = static_cast<i64>(in.shape[3]);
      const i64 out_c = static_cast<i64>(ker.shape[0]);
      const i64 kh = static_cast<i64>(ker.shape[2]);
      const i64 kw = static_cast<i64>(ker.shape[3]);
      const i64 oh = static_cast<i64>(node.value.shape[2]);
      const i64 ow = static_cast<i64>(node.value.shape[3]);

      std::vector<double>* gin = target(0);
      std::vector<double>* gker = target(1);
      for (i64 n = 0; n < n_batch; ++n) {
        for (i64 o = 0; o < out_c; ++o) {
          const double* g_plane = &g[((n * out_c + o) * oh) * ow];
          for (i64 c = 0; c < in_c; ++c) {
            const double* in_plane = &in.data[((n * in_c + c) * h) * w];
            double* gin_plane =
                gin != nullptr ? &(*gin)[((n * in_c + c) * h) * w] : nullptr;
            for (i64 dy = 0; dy < kh; ++dy) {
              for (i64 dx = 0; dx < kw; ++dx) {
                const std::size_t kidx =
                    static_cast<std::size_t>((((o * in_c + c) * kh + dy) * kw) + dx);
                const double wgt = ker.data[kidx];
                const i64 y_lo = std::max<i64>(0, div_ceil(pad - dy, stride));
                const i64 y_hi =
                    std::min<i64>(oh - 1, div_floor(h - 1 + pad - dy, stride));
                const i64 x_lo = std::max<i64>(0, div_ceil(pad - dx, stride));
                const i64 x_hi =
                    std::min<i64>(ow - 1, div_floor(w - 1 + pad - dx, stride));
                double kacc = 0.0;
                for (i64 y = y_lo; y <= y_hi; ++y) {
                  const i64 iy = y * stride + dy - pad;
                  const double* g_row = g_plane + y * ow;
                  const double* in_row = in_plane + iy * w;
                  if (gin_plane != nullptr) {
                    double* gin_row = gin_plane + iy * w;
                    for (i64 x = x_lo; x <= x_hi; ++x) {
                      gin_row[x * stride + dx - pad] += wgt * g_row[x];
                    }
                  }
                  if (gker != nullptr) {
                    for (i64 x = x_lo; x <= x_hi; ++x) {
                      kacc += g_row[x] * in_row[x * stride + dx - pad];
                    }
                  }
                }
                if (gker != nullptr) (*gker)[kidx] += kacc;
              }
            }
          }
        }
      }
      if (has_bias) {
        if (auto* gbias = target(2)) {
          for (i64 n = 0; n < n_batch; ++n) {
            for (i64 o = 0; o < out_c; ++o) {
              const double* g_plane = &g[((n * out_c + o) * oh) * ow];
              double acc = 0.0;
              for (i64 i = 0; i < oh * ow; ++i) acc += g_plane[i];
              (*gbias)[static_cast<std::size_t>(o)] += acc;
            }
          }
        }
      }
      break;
    }
    case OpKind::kSum: {
      const Tensor& x = operand(node, 0);
      if (auto* gx = target(0)) {
        const double gv = g[0];
        for (std::size_t i = 0; i < x.data.size(); ++i) (*gx)[i] += gv;
      }
      break;
    }
    case OpKind::kSumAxis:
    case OpKind::kMeanAxis: {
      const Tensor& x = operand(node, 0);
      const std::size_t axis = static_cast<std::size_t>(node.iargs[0]);
      const AxisSpan s = axis_span(x.shape, axis);
      const double f = node.kind == OpKind::kMeanAxis
                           ? 1.0 / static_cast<double>(s.len)
                           : 1.0;
      if (auto* gx = target(0)) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t k = 0; k < s.len; ++k) {
            double* dst = &(*gx)[(o * s.len + k) * s.inner];
            const double* src = &g[o * s.inner];
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += f * src[i];
          }
        }
      }
      break;
    }
    case OpKind::kMean: {
      const Tensor& x = operand(node, 0);
      if (auto* gx = target(0)) {
        const double gv = g[0] / static_cast<double>(x.data.size());
        for (std::size_t i = 0; i < x.data.size(); ++i) (*gx)[i] += gv;
      }
      break;
    }
    case OpKind::kMax: {
      const Tensor& x = operand(node, 0);
      if (auto* gx = target(0)) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < x.data.size(); ++i) {
          if (x.data[i] > x.data[best]) best = i;
        }
        (*gx)[best] += g[0];
      }
      break;
    }
    case OpKind::kMaxAxis: {
      const Tensor& x = operand(node, 0);
      const std::size_t axis = static_cast<std::size_t>(node.iargs[0]);
      const AxisSpan s = axis_span(x.shape, axis);
      if (auto* gx = target(0)) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t best = 0;
            double bv = x.data[(o * s.len) * s.inner + i];
            for (std::size_t k = 1; k < s.len; ++k) {
              const double v = x.data[(o * s.len + k) * s.inner + i];
              if (v > bv) {
                bv = v;
                best = k;
              }
            }
            (*gx)[(o * s.len + best) * s.inner + i] += g[o * s.inner + i];
          }
        }
      }
      break;
    }
    case OpKind::kReshape: {
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
      }
      break;
    }
    case OpKind::kConcatRows: {
      const Tensor& a = operand(node, 0);
      const std::size_t na = a.data.size();
      if (auto* ga = target(0)) {
        for (std::size_t i = 0; i < na; ++i) (*ga)[i] += g[i];
      }
      if (auto* gb = target(1)) {
        for (std::size_t i = na; i < g.size(); ++i) (*gb)[i - na] += g[i];
      }
      break;
    }
    case OpKind::kDense: {
      const Tensor& x = operand(node, 0);
      const Tensor& w = operand(node, 1);
      const std::size_t n = x.shape[0], f = x.shape[1], u = w.shape[1];
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* grow = &g[i * u];
          for (std::size_t k = 0; k < f; ++k) {
            double acc = 0.0;
            const double* wrow = &w.data[k * u];
            for (std::size_t j = 0; j < u; ++j) acc += grow[j] * wrow[j];
            (*gx)[i * f + k] += acc;
          }
        }
      }
      if (auto* gw = target(1)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* xrow = &x.data[i * f];
          const double* grow = &g[i * u];
          for (std::size_t k = 0; k < f; ++k) {
            const double xv = xrow[k];
            double* gwrow = &(*gw)[k * u];
            for (std::size_t j = 0; j < u; ++j) gwrow[j] += xv * grow[j];
          }
        }
      }
      if (auto* gb = target(2)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* grow = &g[i * u];
          for (std::size_t j = 0; j < u; ++j) (*gb)[j] += grow[j];
        }
      }
      break;
    }
    case OpKind::kScaledNorm: {
      const Tensor& x = operand(node, 0);
      const Tensor& gamma = operand(node, 1);
      const bool batch_mode = node.iargs[0] != 0;
      std::size_t n_const = 0;
      for (NodeId in : node.inputs) {
        if (in == kNoNode) ++n_const;
      }
      const std::vector<double>& mean = node.saved[n_const].data;
      const std::vector<double>& invstd = node.saved[n_const + 1].data;

      const std::size_t n = x.shape[0], c = x.shape[1],
                        plane = x.shape[2] * x.shape[3];
      const double m = static_cast<double>(n * plane);

      std::vector<double>* gx = target(0);
      std::vector<double>* ggamma = target(1);
      std::vector<double>* gbeta = target(2);

      for (std::size_t ch = 0; ch < c; ++ch) {
        const double mu = mean[ch], is = invstd[ch], gm = gamma.data[ch];
        double sum_g = 0.0, sum_gxhat = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double gv = g[base + i];
            sum_g += gv;
            sum_gxhat += gv * ((x.data[base + i] - mu) * is);
          }
        }
        if (ggamma != nullptr) (*ggamma)[ch] += sum_gxhat;
        if (gbeta != nullptr) (*gbeta)[ch] += sum_g;
        if (gx != nullptr) {
          if (batch_mode) {
            const double k1 = gm * is / m;
            for (std::size_t b = 0; b < n; ++b) {
              const std::size_t base = (b * c + ch) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (x.data[base + i] - mu) * is;
                (*gx)[base + i] +=
                    k1 * (m * g[base + i] - sum_g - xhat * sum_gxhat);
              }
            }
          } else {
            const double k1 = gm * is;
            for (std::size_t b = 0; b < n; ++b) {
              const std::size_t base = (b * c + ch) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                (*gx)[base + i] += k1 * g[base + i];
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::kMaxPool: {
      const Tensor& x = operand(node, 0);
      const std::size_t window = static_cast<std::size_t>(node.iargs[0]);
      const std::size_t stride = static_cast<std::size_t>(node.iargs[1]);
      const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2],
                        w = x.shape[3];
      const std::size_t oh = node.value.shape[2], ow = node.value.shape[3];
      if (auto* gx = target(0)) {
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* plane = &x.data[(b * c + ch) * h * w];
            double* gplane = &(*gx)[(b * c + ch) * h * w];
            const double* gout = &g[(b * c + ch) * oh * ow];
            for (std::size_t y = 0; y < oh; ++y) {
              for (std::size_t xo = 0; xo < ow; ++xo) {
                const std::size_t y0 = y * stride, x0 = xo * stride;
                // Gradient routes to the first maximal position in scan order.
                std::size_t by = y0, bx = x0;
                double best = plane[y0 * w + x0];
                for (std::size_t dy = 0; dy < window; ++dy) {
                  for (std::size_t dx = 0; dx < window; ++dx) {
                    const double v = plane[(y0 + dy) * w + (x0 + dx)];
                    if (v > best) {
                      best = v;
                      by = y0 + dy;
                      bx = x0 + dx;
                    }
                  }
                }
                gplane[by * w + bx] += gout[y * ow + xo];
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::kAvgPool: {
      const Tensor& x = operand(node, 0);
      const std::size_t window = static_cast<std::size_t>(node.iargs[0]);
      const std::size_t stride = static_cast<std::size_t>(node.iargs[1]);
      const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2],
                        w = x.shape[3];
      const std::size_t oh = node.value.shape[2], ow = node.value.shape[3];
      const double inv_area = 1.0 / static_cast<double>(window * window);
      if (auto* gx = target(0)) {
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            double* gplane = &(*gx)[(b * c + ch) * h * w];
            const double* gout = &g[(b * c + ch) * oh * ow];
            for (std::size_t y = 0; y < oh; ++y) {
              for (std::size_t xo = 0; xo < ow; ++xo) {
                const double gv = gout[y * ow + xo] * inv_area;
                const std::size_t y0 = y * stride, x0 = xo * stride;
                for (std::size_t dy = 0; dy < window; ++dy) {
                  for (std::size_t dx = 0; dx < window; ++dx) {
                    gplane[(y0 + dy) * w + (x0 + dx)] += gv;
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::kSoftmaxTau: {
      const std::vector<double>& p = node.value.data;
      const double tau = node.fargs[0];
      const std::size_t n = node.value.shape[0], k = node.value.shape[1];
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* prow = &p[i * k];
          const double* grow = &g[i * k];
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j) dot += grow[j] * prow[j];
          for (std::size_t j = 0; j < k; ++j) {
            (*gx)[i * k + j] += prow[j] * (grow[j] - dot) / tau;
          }
        }
      }
      break;
    }
    case OpKind::kLogSoftmaxTau: {
      const std::vector<double>& lp = node.value.data;
      const double tau = node.fargs[0];
      const std::size_t n = node.value.shape[0], k = node.value.shape[1];
      if (auto* gx = target(0)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* lprow = &lp[i * k];
          const double* grow = &g[i * k];
          double gsum = 0.0;
          for (std::size_t j = 0; j < k; ++j) gsum += grow[j];
          for (std::size_t j = 0; j < k; ++j) {
            (*gx)[i * k + j] += (grow[j] - std::exp(lprow[j]) * gsum) / tau;
          }
        }
      }
      break;
    }
  }
}

void Tape::backward(const Tensor& loss) {
  if (!loss.is_scalar()) {
    throw ShapeError("backward requires a scalar loss, got " +
                     std::to_string(loss.numel()) + " elements");
  }
  if (!loss.requires_grad || loss.node < 0 ||
      loss.node >= static_cast<NodeId>(nodes_.size())) {
    throw ShapeError("loss is not on the tape");
  }
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[static_cast<std::size_t>(loss.node)] =
      bare(nodes_[static_cast<std::size_t>(loss.node)].value.shape, {1.0});
  for (NodeId id = loss.node; id >= 0; --id) {
    if (!grads_[static_cast<std::size_t>(id)].has_value()) continue;
    backward_node(id);
  }
}

const Tensor* Tape::grad(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= grads_.size()) return nullptr;
  const auto& slot = grads_[static_cast<std::size_t>(id)];
  return slot.has_value() ? &*slot : nullptr;
}

Tensor Tape::recompute(NodeId id) const {
  const TapeNode& n = node(id);
  switch (n.kind) {
    case OpKind::kLeaf:
      return bare(n.value.shape, n.value.data);
    case OpKind::kAdd:
      return map2(operand(n, 0), operand(n, 1),
                  [](double x, double y) { return x + y; });
    case OpKind::kSub:
      return map2(operand(n, 0), operand(n, 1),
                  [](double x, double y) { return x - y; });
    case OpKind::kMul:
      return map2(operand(n, 0), operand(n, 1),
                  [](double x, double y) { return x * y; });
    case OpKind::kRelu:
      return map1(operand(n, 0), [](double v) { return v > 0.0 ? v : 0.0; });
    case OpKind::kLog:
      return map1(operand(n, 0), [](double v) { return std::log(v); });
    case OpKind::kExp:
      return map1(operand(n, 0), [](double v) { return std::exp(v); });
    case OpKind::kAbs:
      return map1(operand(n, 0), [](double v) { return std::abs(v); });
    case OpKind::kScale: {
      const double c = n.fargs[0];
      return map1(operand(n, 0), [c](double v) { return c * v; });
    }
    case OpKind::kSigmoid:
      return map1(operand(n, 0), stable_sigmoid);
    case OpKind::kMatmul:
      return k_matmul(operand(n, 0), operand(n, 1));
    case OpKind::kConv2d: {
      const Tensor* bias = n.iargs[2] != 0 ? &operand(n, 2) : nullptr;
      return k_conv2d(operand(n, 0), operand(n, 1), bias, n.iargs[0],
                      n.iargs[1]);
    }
    case OpKind::kSum:
      return k_sum(operand(n, 0));
    case OpKind::kSumAxis:
      return k_sum_axis(operand(n, 0), static_cast<std::size_t>(n.iargs[0]));
    case OpKind::kMean:
      return k_mean(operand(n, 0));
    case OpKind::kMeanAxis:
      return k_mean_axis(operand(n, 0), static_cast<std::size_t>(n.iargs[0]));
    case OpKind::kMax:
      return k_max(operand(n, 0));
    case OpKind::kMaxAxis:
      return k_max_axis(operand(n, 0), static_cast<std::size_t>(n.iargs[0]));
    case OpKind::kReshape:
      return bare(n.value.shape, operand(n, 0).data);
    case OpKind::kConcatRows:
      return k_concat_rows(operand(n, 0), operand(n, 1));
    case OpKind::kDense:
      return k_dense(operand(n, 0), operand(n, 1), operand(n, 2));
    case OpKind::kScaledNorm: {
      std::size_t n_const = 0;
      for (NodeId in : n.inputs) {
        if (in == kNoNode) ++n_const;
      }
      return k_scaled_norm(operand(n, 0), operand(n, 1), operand(n, 2),
                           n.saved[n_const].data, n.saved[n_const + 1].data);
    }
    case OpKind::kMaxPool:
      return k_pool<true>(operand(n, 0), static_cast<std::size_t>(n.iargs[0]),
                          static_cast<std::size_t>(n.iargs[1]));
    case OpKind::kAvgPool:
      return k_pool<false>(operand(n, 0), static_cast<std::size_t>(n.iargs[0]),
                           static_cast<std::size_t>(n.iargs[1]));
    case OpKind::kSoftmaxTau:
      return k_softmax<false>(operand(n, 0), n.fargs[0]);
    case OpKind::kLogSoftmaxTau:
      return k_softmax<true>(operand(n, 0), n.fargs[0]);
  }
  throw DataError("unknown op kind");
}

}  // namespace cf
