#include "cf/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <string>

#include "cf/error.hpp"
#include "cf/rng.hpp"

namespace cf {
namespace {

// Symbolic activation shape while walking the layer stack.
struct ShapeCursor {
  bool flat = false;
  std::size_t c = 0, h = 0, w = 0;
  std::size_t features = 0;
};

ShapeCursor advance(const ShapeCursor& in, const Layer& layer,
                    std::size_t layer_index) {
  const std::string at = " at layer " + std::to_string(layer_index);
  ShapeCursor out = in;
  if (std::holds_alternative<ConvLayer>(layer)) {
    const auto& l = std::get<ConvLayer>(layer);
    if (in.flat) throw SpecError("conv after flatten" + at);
    if (in.c != l.in_channels) {
      throw SpecError("conv expects " + std::to_string(l.in_channels) +
                      " input channels, got " + std::to_string(in.c) + at);
    }
    if (in.h + 2 * l.padding < l.kernel_h || in.w + 2 * l.padding < l.kernel_w) {
      throw SpecError("conv kernel larger than padded input" + at);
    }
    out.c = l.out_channels;
    out.h = (in.h + 2 * l.padding - l.kernel_h) / l.stride + 1;
    out.w = (in.w + 2 * l.padding - l.kernel_w) / l.stride + 1;
    if (out.h < 1 || out.w < 1) throw SpecError("conv output empty" + at);
  } else if (std::holds_alternative<DenseLayer>(layer)) {
    const auto& l = std::get<DenseLayer>(layer);
    if (!in.flat) throw SpecError("dense before flatten" + at);
    if (in.features != l.in_features) {
      throw SpecError("dense expects " + std::to_string(l.in_features) +
                      " features, got " + std::to_string(in.features) + at);
    }
    out.features = l.units;
  } else if (std::holds_alternative<ScaledNormLayer>(layer)) {
    const auto& l = std::get<ScaledNormLayer>(layer);
    if (in.flat) throw SpecError("scalednorm after flatten" + at);
    if (in.c != l.channels) {
      throw SpecError("scalednorm carries " + std::to_string(l.channels) +
                      " channels, input has " + std::to_string(in.c) + at);
    }
  } else if (std::holds_alternative<PoolLayer>(layer)) {
    const auto& l = std::get<PoolLayer>(layer);
    if (in.flat) throw SpecError("pool after flatten" + at);
    if (in.h < l.window || in.w < l.window) {
      throw SpecError("pool window larger than input" + at);
    }
    out.h = (in.h - l.window) / l.stride + 1;
    out.w = (in.w - l.window) / l.stride + 1;
  } else if (std::holds_alternative<FlattenLayer>(layer)) {
    if (in.flat) throw SpecError("flatten twice" + at);
    out.flat = true;
    out.features = in.c * in.h * in.w;
  }
  // relu leaves the shape untouched
  return out;
}

// Output shape of every layer; index 0 is the input itself.
std::vector<ShapeCursor> trace_shapes(const Model& model) {
  std::vector<ShapeCursor> shapes;
  ShapeCursor cur;
  cur.c = model.input.channels;
  cur.h = model.input.height;
  cur.w = model.input.width;
  shapes.push_back(cur);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    cur = advance(cur, model.layers[i], i);
    shapes.push_back(cur);
  }
  return shapes;
}

std::vector<double> he_uniform(Rng& rng, std::size_t count, std::size_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> out(count);
  for (double& v : out) v = rng.uniform(-bound, bound);
  return out;
}

}  // namespace

void Model::set_mode(Mode mode) {
  for (Layer& layer : layers) {
    if (auto* norm = std::get_if<ScaledNormLayer>(&layer)) norm->mode = mode;
  }
}

Model build(const std::vector<LayerSpec>& specs, InputShape input,
            std::size_t class_count, std::size_t split_index,
            std::uint64_t seed) {
  if (specs.empty()) throw SpecError("empty layer spec list");
  if (class_count < 2) throw SpecError("class_count must be >= 2");

  Model model;
  model.input = input;
  model.class_count = class_count;
  Rng rng(seed);

  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    switch (s.kind) {
      case LayerSpec::Kind::kConv: {
        ConvLayer l;
        l.out_channels = s.channels;
        l.kernel_h = l.kernel_w = s.kernel;
        l.stride = s.stride;
        l.padding = s.padding;
        if (l.out_channels == 0) throw SpecError("conv with zero channels");
        model.layers.emplace_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kDense: {
        DenseLayer l;
        l.units = s.channels;
        if (l.units == 0) throw SpecError("dense with zero units");
        model.layers.emplace_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kScaledNorm: {
        if (i == 0 || specs[i - 1].kind != LayerSpec::Kind::kConv) {
          throw SpecError("scalednorm must directly follow a conv layer");
        }
        model.layers.emplace_back(ScaledNormLayer{});
        break;
      }
      case LayerSpec::Kind::kRelu:
        model.layers.emplace_back(ReluLayer{});
        break;
      case LayerSpec::Kind::kMaxPool:
        model.layers.emplace_back(PoolLayer{PoolKind::kMax, s.window, s.window});
        break;
      case LayerSpec::Kind::kAvgPool:
        model.layers.emplace_back(PoolLayer{PoolKind::kAvg, s.window, s.window});
        break;
      case LayerSpec::Kind::kFlatten:
        model.layers.emplace_back(FlattenLayer{});
        break;
    }
  }

  // Fill in shape-dependent fields and initialize parameters, walking the
  // stack front to back so the init stream is a pure function of the seed.
  ShapeCursor cur;
  cur.c = input.channels;
  cur.h = input.height;
  cur.w = input.width;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    Layer& layer = model.layers[i];
    if (auto* conv = std::get_if<ConvLayer>(&layer)) {
      if (cur.flat) throw SpecError("conv after flatten at layer " + std::to_string(i));
      conv->in_channels = cur.c;
      const std::size_t fan_in =
          conv->in_channels * conv->kernel_h * conv->kernel_w;
      conv->kernel = he_uniform(
          rng, conv->out_channels * conv->in_channels * conv->kernel_h *
                   conv->kernel_w,
          fan_in);
    } else if (auto* dense = std::get_if<DenseLayer>(&layer)) {
      if (!cur.flat) throw SpecError("dense before flatten at layer " + std::to_string(i));
      dense->in_features = cur.features;
      dense->weight = he_uniform(rng, dense->in_features * dense->units,
                                 dense->in_features);
      dense->bias.assign(dense->units, 0.0);
    } else if (auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      norm->channels = cur.c;
      norm->gamma.assign(norm->channels, 0.5);
      norm->beta.assign(norm->channels, 0.0);
      norm->running_mean.assign(norm->channels, 0.0);
      norm->running_var.assign(norm->channels, 1.0);
    }
    cur = advance(cur, layer, i);
  }
  if (!cur.flat || cur.features != class_count) {
    throw SpecError("architecture must end with " +
                    std::to_string(class_count) + " flat outputs");
  }

  if (split_index == 0) {
    std::size_t pools_seen = 0;
    std::size_t after_second_pool = 0;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      if (std::holds_alternative<PoolLayer>(model.layers[i])) {
        if (++pools_seen == 2) after_second_pool = i + 1;
      }
    }
    split_index = after_second_pool > 0 ? after_second_pool
                                        : model.layers.size() / 2;
    if (split_index == 0) split_index = 1;
  }
  if (split_index >= model.layers.size()) {
    throw SpecError("split_index must lie strictly inside the layer stack");
  }
  model.split_index = split_index;
  model.rng_state = rng.state();
  return model;
}

ModelBinding bind(Tape& tape, Model& model, bool trainable) {
  ModelBinding binding;
  binding.trainable = trainable;
  binding.leaves.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& slot = binding.leaves[i];
    if (auto* conv = std::get_if<ConvLayer>(&model.layers[i])) {
      slot.a = tape.create({conv->out_channels, conv->in_channels,
                            conv->kernel_h, conv->kernel_w},
                           conv->kernel, trainable);
      if (trainable) {
        binding.params.push_back({&conv->kernel, slot.a->node, true, false});
      }
      if (conv->has_bias) {
        slot.b = tape.create({conv->out_channels}, conv->bias, trainable);
        if (trainable) {
          binding.params.push_back({&conv->bias, slot.b->node, false, false});
        }
      }
    } else if (auto* dense = std::get_if<DenseLayer>(&model.layers[i])) {
      slot.a = tape.create({dense->in_features, dense->units}, dense->weight,
                           trainable);
      slot.b = tape.create({dense->units}, dense->bias, trainable);
      if (trainable) {
        binding.params.push_back({&dense->weight, slot.a->node, true, false});
        binding.params.push_back({&dense->bias, slot.b->node, false, false});
      }
    } else if (auto* norm = std::get_if<ScaledNormLayer>(&model.layers[i])) {
      slot.a = tape.create({norm->channels}, norm->gamma, trainable);
      slot.b = tape.create({norm->channels}, norm->beta, trainable);
      if (trainable) {
        binding.params.push_back({&norm->gamma, slot.a->node, false, true});
        binding.params.push_back({&norm->beta, slot.b->node, false, false});
        binding.gamma_leaves.push_back(*slot.a);
      }
    }
  }
  return binding;
}

RunResult run(Tape& tape, Model& model, const ModelBinding& binding,
              const Tensor& x, const RunOpts& opts) {
  RunResult result;
  Tensor cur = x;
  const std::size_t stop = std::min(opts.stop_after, model.layers.size());
  for (std::size_t i = opts.start_at; i < stop; ++i) {
    Layer& layer = model.layers[i];
    const auto& slot = binding.leaves[i];
    if (auto* conv = std::get_if<ConvLayer>(&layer)) {
      ConvLeaves leaves{slot.a ? &*slot.a : nullptr, slot.b ? &*slot.b : nullptr};
      cur = conv_forward(tape, *conv, cur, &leaves);
    } else if (auto* dense = std::get_if<DenseLayer>(&layer)) {
      DenseLeaves leaves{slot.a ? &*slot.a : nullptr, slot.b ? &*slot.b : nullptr};
      cur = dense_forward(tape, *dense, cur, &leaves);
    } else if (auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      NormLeaves leaves{slot.a ? &*slot.a : nullptr, slot.b ? &*slot.b : nullptr};
      cur = scalednorm_forward(tape, *norm, cur, &leaves, opts.update_running,
                               opts.mode_override);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      cur = tape.relu(cur);
    } else if (auto* pool = std::get_if<PoolLayer>(&layer)) {
      cur = pool_forward(tape, pool->kind, cur, pool->window, pool->stride);
    } else {  // flatten
      cur = tape.reshape(
          cur, {cur.shape[0], cur.shape[1] * cur.shape[2] * cur.shape[3]});
    }
    if (opts.capture_split && i + 1 == model.split_index) {
      result.split_features = cur;
    }
  }
  result.output = cur;
  return result;
}

Tensor infer(const Model& model, const Tensor& x) {
  Tape tape;
  Tensor cur = x;
  cur.node = kNoNode;
  cur.requires_grad = false;
  for (const Layer& layer : model.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      const Tensor kernel =
          tape.create({conv->out_channels, conv->in_channels, conv->kernel_h,
                       conv->kernel_w},
                      conv->kernel, false);
      if (conv->has_bias) {
        const Tensor bias = tape.create({conv->out_channels}, conv->bias, false);
        cur = tape.conv2d(cur, kernel, bias,
                          static_cast<std::int64_t>(conv->stride),
                          static_cast<std::int64_t>(conv->padding));
      } else {
        cur = tape.conv2d(cur, kernel, static_cast<std::int64_t>(conv->stride),
                          static_cast<std::int64_t>(conv->padding));
      }
    } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      const Tensor w =
          tape.create({dense->in_features, dense->units}, dense->weight, false);
      const Tensor b = tape.create({dense->units}, dense->bias, false);
      cur = tape.dense(cur, w, b);
    } else if (const auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      const Tensor gamma = tape.create({norm->channels}, norm->gamma, false);
      const Tensor beta = tape.create({norm->channels}, norm->beta, false);
      cur = tape.scaled_norm(cur, gamma, beta, norm->running_mean,
                             norm->running_var, norm->eps,
                             /*use_batch_stats=*/false, nullptr);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      cur = tape.relu(cur);
    } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
      cur = pool_forward(tape, pool->kind, cur, pool->window, pool->stride);
    } else {
      cur = tape.reshape(
          cur, {cur.shape[0], cur.shape[1] * cur.shape[2] * cur.shape[3]});
    }
  }
  return cur;
}

GammaIndex collect_gamma(const Model& model) {
  GammaIndex index;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (const auto* norm = std::get_if<ScaledNormLayer>(&model.layers[i])) {
      for (std::size_t c = 0; c < norm->channels; ++c) {
        index.entries.push_back({i, c, norm->gamma[c]});
      }
    }
  }
  if (index.entries.empty()) {
    throw SpecError("model has no scaling layers to prune");
  }
  return index;
}

double global_threshold(const GammaIndex& index, double prune_fraction) {
  if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) {
    throw ConfigError("prune fraction must lie in [0,1)");
  }
  const std::size_t m = index.entries.size();
  // ceil(p*m) with a guard against 0.1*1000 -> 100.0000000000001 artifacts.
  const auto quota = static_cast<std::size_t>(
      std::ceil(prune_fraction * static_cast<double>(m) - 1e-9));
  if (quota == 0) return -1.0;
  std::vector<double> magnitudes;
  magnitudes.reserve(m);
  for (const auto& e : index.entries) magnitudes.push_back(std::abs(e.value));
  std::sort(magnitudes.begin(), magnitudes.end());
  return magnitudes[quota - 1];
}

std::size_t count_params(const Model& model) {
  std::size_t n = 0;
  for (const Layer& layer : model.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      n += conv->kernel.size() + conv->bias.size();
    } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      n += dense->weight.size() + dense->bias.size();
    } else if (const auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      n += norm->gamma.size() + norm->beta.size();
    }
  }
  return n;
}

std::uint64_t count_flops(const Model& model) {
  const auto shapes = trace_shapes(model);
  std::uint64_t flops = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (const auto* conv = std::get_if<ConvLayer>(&model.layers[i])) {
      const ShapeCursor& out = shapes[i + 1];
      flops += 2ull * out.h * out.w * conv->out_channels * conv->in_channels *
               conv->kernel_h * conv->kernel_w;
    } else if (const auto* dense = std::get_if<DenseLayer>(&model.layers[i])) {
      flops += 2ull * dense->in_features * dense->units;
    }
  }
  return flops;
}

namespace {

std::vector<double> keep_rows(const std::vector<double>& data,
                              std::size_t row_size,
                              const std::vector<std::size_t>& keep) {
  std::vector<double> out;
  out.reserve(keep.size() * row_size);
  for (std::size_t r : keep) {
    out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(r * row_size),
               data.begin() + static_cast<std::ptrdiff_t>((r + 1) * row_size));
  }
  return out;
}

std::vector<double> keep_entries(const std::vector<double>& data,
                                 const std::vector<std::size_t>& keep) {
  return keep_rows(data, 1, keep);
}

// Drop the given input channels from an OIHW kernel.
std::vector<double> drop_kernel_inputs(const std::vector<double>& kernel,
                                       std::size_t out_c, std::size_t in_c,
                                       std::size_t spatial,
                                       const std::vector<std::size_t>& keep) {
  std::vector<double> out;
  out.reserve(out_c * keep.size() * spatial);
  for (std::size_t o = 0; o < out_c; ++o) {
    for (std::size_t c : keep) {
      const std::size_t base = (o * in_c + c) * spatial;
      out.insert(out.end(),
                 kernel.begin() + static_cast<std::ptrdiff_t>(base),
                 kernel.begin() + static_cast<std::ptrdiff_t>(base + spatial));
    }
  }
  return out;
}

}  // namespace

std::pair<Model, PruneReport> prune(const Model& model, double threshold,
                                    bool keep_one_guard,
                                    std::optional<std::size_t> quota) {
  const GammaIndex index = collect_gamma(model);
  const auto shapes = trace_shapes(model);

  // Prunable pairs: conv immediately followed by its scaling layer.
  struct Pair {
    std::size_t conv = 0;
    std::size_t norm = 0;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i + 1 < model.layers.size(); ++i) {
    if (std::holds_alternative<ConvLayer>(model.layers[i]) &&
        std::holds_alternative<ScaledNormLayer>(model.layers[i + 1])) {
      pairs.push_back({i, i + 1});
    }
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (std::holds_alternative<ScaledNormLayer>(model.layers[i])) {
      const bool paired =
          std::any_of(pairs.begin(), pairs.end(),
                      [i](const Pair& p) { return p.norm == i; });
      if (!paired) {
        throw SpecError("scaling layer " + std::to_string(i) +
                        " does not follow a conv layer");
      }
    }
  }

  // Selection: strictly-below-threshold channels first, then channels tied
  // at the threshold lowest-index-first until the quota is met.
  const std::size_t limit = quota.value_or(index.entries.size());
  std::set<std::pair<std::size_t, std::size_t>> selected;
  for (const auto& e : index.entries) {
    if (selected.size() >= limit) break;
    if (std::abs(e.value) < threshold) selected.insert({e.layer, e.channel});
  }
  for (const auto& e : index.entries) {
    if (selected.size() >= limit) break;
    if (std::abs(e.value) == threshold) selected.insert({e.layer, e.channel});
  }

  PruneReport report;
  report.threshold = threshold;
  report.channels_total = index.entries.size();
  report.params_before = count_params(model);
  report.flops_before = count_flops(model);

  Model pruned = model;

  for (const Pair& pair : pairs) {
    auto& conv = std::get<ConvLayer>(pruned.layers[pair.conv]);
    auto& norm = std::get<ScaledNormLayer>(pruned.layers[pair.norm]);

    std::vector<std::size_t> pruned_channels, kept_channels;
    for (std::size_t c = 0; c < norm.channels; ++c) {
      if (selected.count({pair.norm, c}) != 0) {
        pruned_channels.push_back(c);
      } else {
        kept_channels.push_back(c);
      }
    }

    if (kept_channels.empty()) {
      if (!keep_one_guard) {
        throw PruneError("layer " + std::to_string(pair.conv) +
                         " would lose all channels");
      }
      // Rescue the strongest channel (ties to the lowest index).
      std::size_t best = 0;
      for (std::size_t c = 1; c < norm.channels; ++c) {
        if (std::abs(norm.gamma[c]) > std::abs(norm.gamma[best])) best = c;
      }
      pruned_channels.erase(
          std::find(pruned_channels.begin(), pruned_channels.end(), best));
      kept_channels.push_back(best);
      ++report.guard_rescued;
    }

    report.per_layer.push_back({pair.conv, kept_channels, pruned_channels});
    report.channels_pruned += pruned_channels.size();
    if (pruned_channels.empty()) continue;

    // Constants the removed channels injected downstream: beta, shaped by
    // whatever sits between the scaling layer and the next parameterized
    // layer. The gamma-weighted signal part is what pruning discards.
    std::vector<double> constants;
    for (std::size_t c : pruned_channels) constants.push_back(norm.beta[c]);

    const std::size_t spatial = conv.kernel_h * conv.kernel_w;
    conv.kernel = keep_rows(conv.kernel, conv.in_channels * spatial, kept_channels);
    if (conv.has_bias) conv.bias = keep_entries(conv.bias, kept_channels);
    conv.out_channels = kept_channels.size();
    norm.gamma = keep_entries(norm.gamma, kept_channels);
    norm.beta = keep_entries(norm.beta, kept_channels);
    norm.running_mean = keep_entries(norm.running_mean, kept_channels);
    norm.running_var = keep_entries(norm.running_var, kept_channels);
    norm.channels = kept_channels.size();

    // Walk to the next parameterized layer, transforming the constants.
    std::size_t j = pair.norm + 1;
    bool folded = false;
    for (; j < pruned.layers.size(); ++j) {
      Layer& down = pruned.layers[j];
      if (std::holds_alternative<ReluLayer>(down)) {
        for (double& c : constants) c = c > 0.0 ? c : 0.0;
      } else if (std::holds_alternative<PoolLayer>(down) ||
                 std::holds_alternative<FlattenLayer>(down)) {
        // A constant channel is unchanged by pooling; flatten only changes
        // the index mapping, handled below via the traced shape.
      } else if (auto* next = std::get_if<ConvLayer>(&down)) {
        const std::size_t sp = next->kernel_h * next->kernel_w;
        bool any_constant = false;
        for (double c : constants) any_constant |= c != 0.0;
        if (any_constant) {
          if (!next->has_bias) {
            next->has_bias = true;
            next->bias.assign(next->out_channels, 0.0);
          }
          for (std::size_t o = 0; o < next->out_channels; ++o) {
            double delta = 0.0;
            for (std::size_t pi = 0; pi < pruned_channels.size(); ++pi) {
              const std::size_t cidx = pruned_channels[pi];
              double ksum = 0.0;
              const std::size_t base = (o * next->in_channels + cidx) * sp;
              for (std::size_t s = 0; s < sp; ++s) ksum += next->kernel[base + s];
              delta += constants[pi] * ksum;
            }
            next->bias[o] += delta;
          }
        }
        next->kernel = drop_kernel_inputs(next->kernel, next->out_channels,
                                          next->in_channels, sp, kept_channels);
        next->in_channels = kept_channels.size();
        folded = true;
        break;
      } else if (auto* next = std::get_if<DenseLayer>(&down)) {
        // Feature rows are channel-major after flatten; the plane size is
        // the spatial extent where the flatten happened.
        const ShapeCursor& dense_input = shapes[j];
        const std::size_t channels_before =
            kept_channels.size() + pruned_channels.size();
        const std::size_t plane = dense_input.features / channels_before;
        for (std::size_t pi = 0; pi < pruned_channels.size(); ++pi) {
          const double c = constants[pi];
          if (c == 0.0) continue;
          const std::size_t cidx = pruned_channels[pi];
          for (std::size_t u = 0; u < next->units; ++u) {
            double wsum = 0.0;
            for (std::size_t r = cidx * plane; r < (cidx + 1) * plane; ++r) {
              wsum += next->weight[r * next->units + u];
            }
            next->bias[u] += c * wsum;
          }
        }
        std::vector<std::size_t> keep_features;
        keep_features.reserve(kept_channels.size() * plane);
        for (std::size_t c : kept_channels) {
          for (std::size_t r = 0; r < plane; ++r) {
            keep_features.push_back(c * plane + r);
          }
        }
        next->weight = keep_rows(next->weight, next->units, keep_features);
        next->in_features = keep_features.size();
        folded = true;
        break;
      } else {
        throw PruneError("unexpected layer after scaling layer " +
                         std::to_string(pair.norm));
      }
    }
    if (!folded) {
      throw PruneError("no downstream layer to absorb pruned channels of layer " +
                       std::to_string(pair.conv));
    }
  }

  report.params_after = count_params(pruned);
  report.flops_after = count_flops(pruned);
  return {std::move(pruned), report};
}

std::string PruneReport::table() const {
  std::ostringstream os;
  os << "layer   kept  pruned\n";
  for (const auto& l : per_layer) {
    os << "  " << l.layer << "     " << l.kept.size() << "     "
       << l.pruned.size() << "\n";
  }
  os << "channels: " << channels_pruned << "/" << channels_total
     << " pruned (threshold " << threshold << ", " << guard_rescued
     << " rescued)\n";
  os << "params: " << params_before << " -> " << params_after << "\n";
  os << "flops:  " << flops_before << " -> " << flops_after << "\n";
  return os.str();
}

std::string PruneReport::key_values() const {
  std::ostringstream os;
  os.precision(17);
  os << "threshold=" << threshold << "\n";
  os << "channels_total=" << channels_total << "\n";
  os << "channels_pruned=" << channels_pruned << "\n";
  os << "guard_rescued=" << guard_rescued << "\n";
  os << "params_before=" << params_before << "\n";
  os << "params_after=" << params_after << "\n";
  os << "flops_before=" << flops_before << "\n";
  os << "flops_after=" << flops_after << "\n";
  for (const auto& l : per_layer) {
    os << "layer" << l.layer << "_kept=" << l.kept.size() << "\n";
    os << "layer" << l.layer << "_pruned=" << l.pruned.size() << "\n";
  }
  return os.str();
}

}  // namespace cf
