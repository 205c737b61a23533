#include "cf/layers.hpp"

#include <string>

#include "cf/error.hpp"

namespace cf {
namespace {

Tensor as_constant(Tape& tape, std::vector<std::size_t> shape,
                   const std::vector<double>& data) {
  return tape.create(std::move(shape), data, /*requires_grad=*/false);
}

}  // namespace

Tensor dense_forward(Tape& tape, const DenseLayer& layer, const Tensor& input,
                     const DenseLeaves* leaves) {
  if (input.rank() != 2) throw ShapeError("dense_forward expects [N,F] input");
  if (input.shape[1] != layer.in_features) {
    throw SizeError("dense_forward width mismatch: input has " +
                    std::to_string(input.shape[1]) + ", layer expects " +
                    std::to_string(layer.in_features));
  }
  if (leaves != nullptr) {
    return tape.dense(input, *leaves->weight, *leaves->bias);
  }
  const Tensor w =
      as_constant(tape, {layer.in_features, layer.units}, layer.weight);
  const Tensor b = as_constant(tape, {layer.units}, layer.bias);
  return tape.dense(input, w, b);
}

Tensor scalednorm_forward(Tape& tape, ScaledNormLayer& layer,
                          const Tensor& input, const NormLeaves* leaves,
                          bool update_running,
                          std::optional<Mode> mode_override) {
  if (input.rank() != 4) {
    throw ShapeError("scalednorm_forward expects NCHW input");
  }
  if (input.shape[1] != layer.channels) {
    throw SizeError("scalednorm_forward channel mismatch: input has " +
                    std::to_string(input.shape[1]) + ", layer carries " +
                    std::to_string(layer.channels));
  }
  if (input.shape[0] == 0) throw DataError("scalednorm_forward empty batch");

  Tensor gamma_c, beta_c;
  const Tensor* gamma = leaves != nullptr ? leaves->gamma : nullptr;
  const Tensor* beta = leaves != nullptr ? leaves->beta : nullptr;
  if (gamma == nullptr) {
    gamma_c = as_constant(tape, {layer.channels}, layer.gamma);
    gamma = &gamma_c;
  }
  if (beta == nullptr) {
    beta_c = as_constant(tape, {layer.channels}, layer.beta);
    beta = &beta_c;
  }

  const bool train = mode_override.value_or(layer.mode) == Mode::kTrain;
  NormBatchStats stats;
  Tensor out = tape.scaled_norm(input, *gamma, *beta, layer.running_mean,
                                layer.running_var, layer.eps, train,
                                train ? &stats : nullptr);
  if (train && update_running) {
    const double m =
        static_cast<double>(input.shape[0] * input.shape[2] * input.shape[3]);
    // Unbiased variance goes into the running estimate, the biased one is
    // what normalized the batch.
    const double bessel = m > 1.0 ? m / (m - 1.0) : 1.0;
    for (std::size_t c = 0; c < layer.channels; ++c) {
      layer.running_mean[c] = (1.0 - layer.momentum) * layer.running_mean[c] +
                              layer.momentum * stats.mean[c];
      layer.running_var[c] = (1.0 - layer.momentum) * layer.running_var[c] +
                             layer.momentum * stats.var[c] * bessel;
    }
  }
  return out;
}

Tensor conv_forward(Tape& tape, const ConvLayer& layer, const Tensor& input,
                    const ConvLeaves* leaves) {
  const Tensor* kernel = leaves != nullptr ? leaves->kernel : nullptr;
  Tensor kernel_c;
  if (kernel == nullptr) {
    kernel_c = as_constant(
        tape,
        {layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w},
        layer.kernel);
    kernel = &kernel_c;
  }
  const std::int64_t stride = static_cast<std::int64_t>(layer.stride);
  const std::int64_t padding = static_cast<std::int64_t>(layer.padding);
  if (!layer.has_bias) {
    return tape.conv2d(input, *kernel, stride, padding);
  }
  const Tensor* bias = leaves != nullptr ? leaves->bias : nullptr;
  Tensor bias_c;
  if (bias == nullptr) {
    bias_c = as_constant(tape, {layer.out_channels}, layer.bias);
    bias = &bias_c;
  }
  return tape.conv2d(input, *kernel, *bias, stride, padding);
}

Tensor pool_forward(Tape& tape, PoolKind kind, const Tensor& input,
                    std::size_t window, std::size_t stride) {
  return kind == PoolKind::kMax ? tape.max_pool(input, window, stride)
                                : tape.avg_pool(input, window, stride);
}

Tensor softmax_temperature(Tape& tape, const Tensor& logits, double tau) {
  if (tau <= 0.0) {
    throw ConfigError("softmax temperature must be positive, got " +
                      std::to_string(tau));
  }
  return tape.softmax_tau(logits, tau);
}

std::string to_string(LayerSpec::Kind kind) {
  switch (kind) {
    case LayerSpec::Kind::kConv: return "conv";
    case LayerSpec::Kind::kDense: return "dense";
    case LayerSpec::Kind::kScaledNorm: return "norm";
    case LayerSpec::Kind::kRelu: return "relu";
    case LayerSpec::Kind::kMaxPool: return "maxpool";
    case LayerSpec::Kind::kAvgPool: return "avgpool";
    case LayerSpec::Kind::kFlatten: return "flatten";
  }
  return "?";
}

}  // namespace cf
