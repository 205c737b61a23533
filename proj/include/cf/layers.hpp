#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cf/autodiff.hpp"
#include "cf/tensor.hpp"

namespace cf {

enum class Mode { kTrain, kEval };

struct DenseLayer {
  std::size_t in_features = 0;
  std::size_t units = 0;
  std::vector<double> weight;  // [in_features, units] row-major
  std::vector<double> bias;    // [units]
};

struct ConvLayer {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool has_bias = false;
  std::vector<double> kernel;  // OIHW
  std::vector<double> bias;    // [out_channels], present when has_bias
};

// Per-channel normalization carrying the scaling factors gamma. Every
// prunable conv layer is immediately followed by one of these; gamma is the
// importance score the L1 penalty drives toward zero.
struct ScaledNormLayer {
  std::size_t channels = 0;
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  Mode mode = Mode::kTrain;
};

struct ReluLayer {};

enum class PoolKind { kMax, kAvg };

struct PoolLayer {
  PoolKind kind = PoolKind::kMax;
  std::size_t window = 2;
  std::size_t stride = 2;
};

struct FlattenLayer {};

// Plain description used by model::build and the config arch string.
struct LayerSpec {
  enum class Kind { kConv, kDense, kScaledNorm, kRelu, kMaxPool, kAvgPool, kFlatten };
  Kind kind = Kind::kRelu;
  std::size_t channels = 0;  // conv out-channels / dense units
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t window = 2;
};

// Optional pre-registered leaves for a layer's parameters. When null, the
// layer's stored values enter the tape as constants.
struct DenseLeaves {
  const Tensor* weight = nullptr;
  const Tensor* bias = nullptr;
};
struct ConvLeaves {
  const Tensor* kernel = nullptr;
  const Tensor* bias = nullptr;
};
struct NormLeaves {
  const Tensor* gamma = nullptr;
  const Tensor* beta = nullptr;
};

Tensor dense_forward(Tape& tape, const DenseLayer& layer, const Tensor& input,
                     const DenseLeaves* leaves = nullptr);

// Train mode normalizes with batch statistics and folds them into the
// running estimates with the layer momentum; eval mode applies the stored
// affine transform. Setting gamma[j] = 0 pins output channel j at beta[j].
Tensor scalednorm_forward(Tape& tape, ScaledNormLayer& layer,
                          const Tensor& input,
                          const NormLeaves* leaves = nullptr,
                          bool update_running = true,
                          std::optional<Mode> mode_override = std::nullopt);

Tensor conv_forward(Tape& tape, const ConvLayer& layer, const Tensor& input,
                    const ConvLeaves* leaves = nullptr);

Tensor pool_forward(Tape& tape, PoolKind kind, const Tensor& input,
                    std::size_t window, std::size_t stride);

// Row-wise softmax with temperature, exp(z/tau) / ||exp(z/tau)||_1,
// computed with the max-shift trick. tau <= 0 -> ConfigError.
Tensor softmax_temperature(Tape& tape, const Tensor& logits, double tau);

std::string to_string(LayerSpec::Kind kind);

}  // namespace cf
