#pragma once

#include <cmath>
#include <vector>

#include "cf/layers.hpp"
#include "cf/model.hpp"
#include "cf/rng.hpp"
#include "cf/tensor.hpp"

namespace cftest {

inline cf::Tensor random_tensor(cf::Rng& rng, std::vector<std::size_t> shape,
                                double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(cf::shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return cf::tensor(std::move(shape), std::move(data));
}

inline double max_abs_diff(const cf::Tensor& a, const cf::Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  }
  return worst;
}

inline cf::LayerSpec conv_spec(std::size_t channels, std::size_t kernel = 3,
                               std::size_t stride = 1, std::size_t padding = 1) {
  cf::LayerSpec s;
  s.kind = cf::LayerSpec::Kind::kConv;
  s.channels = channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

inline cf::LayerSpec norm_spec() {
  cf::LayerSpec s;
  s.kind = cf::LayerSpec::Kind::kScaledNorm;
  return s;
}

inline cf::LayerSpec relu_spec() {
  cf::LayerSpec s;
  s.kind = cf::LayerSpec::Kind::kRelu;
  return s;
}

inline cf::LayerSpec maxpool_spec(std::size_t window = 2) {
  cf::LayerSpec s;
  s.kind = cf::LayerSpec::Kind::kMaxPool;
  s.window = window;
  return s;
}

inline cf::LayerSpec flatten_spec() {
  cf::LayerSpec s;
  s.kind = cf::LayerSpec::Kind::kFlatten;
  return s;
}

inline cf::LayerSpec dense_spec(std::size_t units) {
  cf::LayerSpec s;
  s.kind = cf::LayerSpec::Kind::kDense;
  s.channels = units;
  return s;
}

// Toy CNN: 3x8x8 input, two prunable conv blocks, 3 classes.
inline std::vector<cf::LayerSpec> toy_specs(std::size_t c1 = 4,
                                            std::size_t c2 = 6,
                                            std::size_t classes = 3,
                                            std::size_t padding = 1) {
  return {conv_spec(c1, 3, 1, padding), norm_spec(),   relu_spec(),
          maxpool_spec(),               conv_spec(c2, 3, 1, padding),
          norm_spec(),                  relu_spec(),   maxpool_spec(),
          flatten_spec(),               dense_spec(classes)};
}

}  // namespace cftest
