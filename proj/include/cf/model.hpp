#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cf/autodiff.hpp"
#include "cf/layers.hpp"
#include "cf/tensor.hpp"

namespace cf {

using Layer = std::variant<ConvLayer, DenseLayer, ScaledNormLayer, ReluLayer,
                           PoolLayer, FlattenLayer>;

struct InputShape {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
};

// Ordered layer stack with the aligner boundary: layers [0, split_index)
// form f1, the rest f2, and running both halves sequentially is the same
// code path as running the whole model, so f2(f1(x)) == f(x) bitwise.
struct Model {
  std::vector<Layer> layers;
  std::size_t split_index = 1;
  std::size_t class_count = 0;
  InputShape input;
  std::uint64_t iteration = 0;
  std::array<std::uint64_t, 4> rng_state{};

  void set_mode(Mode mode);
};

// Instantiates an architecture with deterministic seed-driven
// initialization: He-uniform kernels and dense weights, gamma = 0.5,
// beta = 0, running stats at (0, 1). split_index 0 picks the boundary
// automatically (right after the second pooling layer when present,
// mid-stack otherwise). Shape-incompatible specs raise SpecError.
Model build(const std::vector<LayerSpec>& specs, InputShape input,
            std::size_t class_count, std::size_t split_index,
            std::uint64_t seed);

// One registered parameter leaf: where the values live in the layer, the
// tape node carrying this iteration's gradient, and optimizer policy bits.
struct BoundParam {
  std::vector<double>* storage = nullptr;
  NodeId node = kNoNode;
  bool decay = false;     // weight decay applies (conv/dense weights only)
  bool is_gamma = false;  // scaling-factor entries
};

// Parameter leaves registered once per tape so that repeated forwards
// (labeled pool, unlabeled pool) accumulate into the same gradients.
struct ModelBinding {
  struct LayerLeaves {
    std::optional<Tensor> a;  // kernel / weight / gamma
    std::optional<Tensor> b;  // bias / beta
  };
  bool trainable = false;
  std::vector<LayerLeaves> leaves;
  std::vector<BoundParam> params;
  std::vector<Tensor> gamma_leaves;
};

ModelBinding bind(Tape& tape, Model& model, bool trainable);

struct RunOpts {
  bool capture_split = false;
  bool update_running = true;                // fold batch stats into running
  std::optional<Mode> mode_override;         // force train/eval regardless of layers
  std::size_t start_at = 0;                  // first layer to execute
  std::size_t stop_after = std::numeric_limits<std::size_t>::max();
};

struct RunResult {
  Tensor output;
  Tensor split_features;
};

// Forward through the bound parameters. `model` is mutated only when
// normalization layers run in train mode with update_running set.
RunResult run(Tape& tape, Model& model, const ModelBinding& binding,
              const Tensor& x, const RunOpts& opts = {});

// Pure eval-mode forward with all parameters as constants. Never mutates.
Tensor infer(const Model& model, const Tensor& x);

// ---------------------------------------------------------------------------
// Gamma collection and pruning
// ---------------------------------------------------------------------------

struct GammaIndex {
  struct Entry {
    std::size_t layer = 0;    // index into model.layers (a ScaledNormLayer)
    std::size_t channel = 0;
    double value = 0.0;
  };
  std::vector<Entry> entries;
};

GammaIndex collect_gamma(const Model& model);

// Threshold t such that channels with |gamma| <= t are prunable: the
// ceil(p*m)-th smallest |gamma|. p == 0 selects nothing.
double global_threshold(const GammaIndex& index, double prune_fraction);

struct PruneReport {
  double threshold = 0.0;
  struct LayerChannels {
    std::size_t layer = 0;  // conv layer index in the original model
    std::vector<std::size_t> kept;
    std::vector<std::size_t> pruned;
  };
  std::vector<LayerChannels> per_layer;
  std::size_t channels_total = 0;
  std::size_t channels_pruned = 0;
  std::size_t guard_rescued = 0;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::uint64_t flops_before = 0;
  std::uint64_t flops_after = 0;

  std::string table() const;      // human-readable
  std::string key_values() const; // machine-readable `key=value` lines
};

// Structural surgery: channels with |gamma| <= threshold are removed from
// their conv kernel, normalization entries and the next parameterized
// layer's input slices. The beta constant of a removed channel is folded
// into the downstream bias. With the guard on, a layer that would lose all
// channels keeps its largest-|gamma| one; with it off this raises
// PruneError. `quota` caps the number of pruned channels; ties at the
// threshold are resolved lowest-index-first.
std::pair<Model, PruneReport> prune(
    const Model& model, double threshold, bool keep_one_guard = true,
    std::optional<std::size_t> quota = std::nullopt);

std::size_t count_params(const Model& model);
std::uint64_t count_flops(const Model& model);

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary, magic "CFCK", u32 version, header,
// then length-prefixed layer records with raw f64 payloads. Round-trips
// are bit-exact.
// ---------------------------------------------------------------------------

void save(const Model& model, const std::string& path);
Model load(const std::string& path);

std::vector<std::uint8_t> serialize(const Model& model);
Model deserialize(const std::vector<std::uint8_t>& bytes);

}  // namespace cf
