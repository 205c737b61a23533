#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cf/model.hpp"
#include "cf/rng.hpp"
#include "helpers.hpp"

using namespace cf;
using namespace cftest;

namespace {

InputShape in8{3, 8, 8};

Model toy_model(std::uint64_t seed = 1) {
  return build(toy_specs(), in8, 3, 0, seed);
}

std::vector<double> flatten_params(const Model& m) {
  std::vector<double> out;
  for (const Layer& layer : m.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      out.insert(out.end(), conv->kernel.begin(), conv->kernel.end());
    } else if (const auto* dense = std::get_if<DenseLayer>(&layer)) {
      out.insert(out.end(), dense->weight.begin(), dense->weight.end());
      out.insert(out.end(), dense->bias.begin(), dense->bias.end());
    } else if (const auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      out.insert(out.end(), norm->gamma.begin(), norm->gamma.end());
      out.insert(out.end(), norm->beta.begin(), norm->beta.end());
    }
  }
  return out;
}

std::filesystem::path temp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("build: determinism, defaults and validation") {
  Model a = toy_model(123);
  Model b = toy_model(123);
  CHECK(flatten_params(a) == flatten_params(b));

  Model c = toy_model(124);
  CHECK(flatten_params(a) != flatten_params(c));

  for (const Layer& layer : a.layers) {
    if (const auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      for (double g : norm->gamma) CHECK(g == 0.5);
      for (double bta : norm->beta) CHECK(bta == 0.0);
    }
  }

  // Auto split lands right after the second pooling layer.
  CHECK(a.split_index == 8);

  // Final width must match the class count.
  CHECK_THROWS_AS(build(toy_specs(4, 6, 3), in8, 5, 0, 1), SpecError);
  // Dense without flatten in front.
  std::vector<LayerSpec> bad = {conv_spec(4), norm_spec(), dense_spec(3)};
  CHECK_THROWS_AS(build(bad, in8, 3, 0, 1), SpecError);
  // Norm not after conv.
  std::vector<LayerSpec> stray = {conv_spec(4), relu_spec(), norm_spec(),
                                  flatten_spec(), dense_spec(3)};
  CHECK_THROWS_AS(build(stray, in8, 3, 0, 1), SpecError);
}

TEST_CASE("collect_gamma: complete duplicate-free index") {
  Model m = toy_model();
  GammaIndex index = collect_gamma(m);
  CHECK(index.entries.size() == 10);  // 4 + 6 channels

  std::get<ScaledNormLayer>(m.layers[1]).gamma[2] = 0.01;
  GammaIndex updated = collect_gamma(m);
  bool found = false;
  for (const auto& e : updated.entries) {
    if (e.layer == 1 && e.channel == 2) {
      found = true;
      CHECK(e.value == 0.01);
    }
  }
  CHECK(found);

  // Independent count from the spec list.
  std::size_t want = 0;
  for (const auto& s : toy_specs()) {
    if (s.kind == LayerSpec::Kind::kConv) want += s.channels;
  }
  CHECK(index.entries.size() == want);
}

TEST_CASE("global_threshold: order statistics") {
  Model m = toy_model();
  GammaIndex index = collect_gamma(m);

  CHECK(global_threshold(index, 0.0) < 0.0);

  GammaIndex tiny;
  tiny.entries = {{1, 0, 0.5}, {1, 1, 0.1}, {1, 2, 0.3}, {1, 3, 0.05}};
  const double t = global_threshold(tiny, 0.5);
  CHECK(t == 0.1);

  CHECK_THROWS_AS(global_threshold(index, 1.0), ConfigError);
  CHECK_THROWS_AS(global_threshold(index, -0.1), ConfigError);
}

TEST_CASE("prune: no-op below the smallest gamma") {
  Model m = toy_model();
  Rng rng(5);
  Tensor x = random_tensor(rng, {2, 3, 8, 8});
  m.set_mode(Mode::kEval);
  Tensor before = infer(m, x);

  auto [pruned, report] = prune(m, -1.0);
  Tensor after = infer(pruned, x);
  CHECK(report.channels_pruned == 0);
  CHECK(max_abs_diff(before, after) == 0.0);
  CHECK(report.params_before == report.params_after);
}

TEST_CASE("prune: exact quota on a spread of magnitudes") {
  Model m = build(toy_specs(10, 20, 3), in8, 3, 0, 7);
  Rng rng(11);
  for (Layer& layer : m.layers) {
    if (auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      for (double& g : norm->gamma) g = rng.uniform(0.001, 1.0);
    }
  }
  GammaIndex index = collect_gamma(m);
  const std::size_t total = index.entries.size();
  for (double p : {0.1, 0.5, 0.7}) {
    const double t = global_threshold(index, p);
    const auto quota =
        static_cast<std::size_t>(std::ceil(p * static_cast<double>(total) - 1e-9));
    auto [pruned, report] = prune(m, t, true, quota);
    CHECK(report.channels_pruned == quota - report.guard_rescued);
    CHECK(report.params_after < report.params_before);
  }
}

TEST_CASE("prune: ties at the threshold break lowest-index-first") {
  Model m = toy_model();
  auto& norm1 = std::get<ScaledNormLayer>(m.layers[1]);
  auto& norm2 = std::get<ScaledNormLayer>(m.layers[5]);
  norm1.gamma = {0.2, 0.2, 0.9, 0.9};
  norm2.gamma = {0.2, 0.8, 0.8, 0.8, 0.8, 0.8};

  // Quota 2 with three channels tied at 0.2: the two earliest go.
  auto [pruned, report] = prune(m, 0.2, true, 2);
  CHECK(report.channels_pruned == 2);
  CHECK(report.per_layer[0].pruned == std::vector<std::size_t>{0, 1});
  CHECK(report.per_layer[1].pruned.empty());
}

TEST_CASE("prune: keep-one guard rescues a dying layer") {
  Model m = toy_model();
  auto& norm1 = std::get<ScaledNormLayer>(m.layers[1]);
  for (double& g : norm1.gamma) g = 0.001;

  auto [pruned, report] = prune(m, 0.01);
  CHECK(report.guard_rescued == 1);
  const auto& conv1 = std::get<ConvLayer>(pruned.layers[0]);
  CHECK(conv1.out_channels == 1);

  CHECK_THROWS_AS(prune(m, 0.01, /*keep_one_guard=*/false), PruneError);
}

TEST_CASE("prune: surgery equivalence with zeroed gamma and beta") {
  Model m = toy_model(21);
  Rng rng(22);
  // Spread the gammas, then zero out the ones below the cut.
  auto& norm1 = std::get<ScaledNormLayer>(m.layers[1]);
  auto& norm2 = std::get<ScaledNormLayer>(m.layers[5]);
  for (double& g : norm1.gamma) g = rng.uniform(0.3, 1.0);
  for (double& g : norm2.gamma) g = rng.uniform(0.3, 1.0);
  norm1.gamma[1] = 0.0;
  norm1.beta[1] = 0.0;
  norm2.gamma[0] = 0.0;
  norm2.beta[0] = 0.0;
  norm2.gamma[4] = 0.0;
  norm2.beta[4] = 0.0;
  m.set_mode(Mode::kEval);

  auto [pruned, report] = prune(m, 0.0);
  CHECK(report.channels_pruned == 3);

  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {2, 3, 8, 8});
    Tensor a = infer(m, x);
    Tensor b = infer(pruned, x);
    CHECK(max_abs_diff(a, b) < 1e-9);
    for (std::size_t row = 0; row < 2; ++row) {
      std::size_t arg_a = 0, arg_b = 0;
      for (std::size_t j = 1; j < 3; ++j) {
        if (a(row, j) > a(row, arg_a)) arg_a = j;
        if (b(row, j) > b(row, arg_b)) arg_b = j;
      }
      CHECK(arg_a == arg_b);
    }
  }
}

TEST_CASE("prune: nonzero beta folds exactly through pad-0 conv and dense") {
  // 3x10x10 -> conv p0 -> 8x8 -> pool -> 4x4 -> conv p0 -> 2x2 -> dense.
  std::vector<LayerSpec> specs = {conv_spec(4, 3, 1, 0), norm_spec(), relu_spec(),
                                  maxpool_spec(),        conv_spec(6, 3, 1, 0),
                                  norm_spec(),           relu_spec(),
                                  flatten_spec(),        dense_spec(3)};
  Model m = build(specs, {3, 10, 10}, 3, 0, 31);
  auto& norm1 = std::get<ScaledNormLayer>(m.layers[1]);
  auto& norm2 = std::get<ScaledNormLayer>(m.layers[5]);
  for (double& g : norm1.gamma) g = 0.8;
  for (double& g : norm2.gamma) g = 0.8;
  // Blocked channels with nonzero shifts, one positive, one negative.
  norm1.gamma[2] = 0.0;
  norm1.beta[2] = 0.45;
  norm2.gamma[1] = 0.0;
  norm2.beta[1] = -0.3;
  m.set_mode(Mode::kEval);

  auto [pruned, report] = prune(m, 0.0);
  CHECK(report.channels_pruned == 2);
  // The fold created a bias on the second conv.
  CHECK(std::get<ConvLayer>(pruned.layers[4]).has_bias);

  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {2, 3, 10, 10});
    CHECK(max_abs_diff(infer(m, x), infer(pruned, x)) < 1e-9);
  }
}

TEST_CASE("model: f1/f2 composition is bitwise equal to the whole forward") {
  Model m = toy_model(41);
  m.set_mode(Mode::kEval);
  Rng rng(42);
  Tensor x = random_tensor(rng, {2, 3, 8, 8});

  Tape tape;
  ModelBinding binding = bind(tape, m, false);
  RunOpts full_opts;
  full_opts.update_running = false;
  Tensor whole = run(tape, m, binding, x, full_opts).output;

  RunOpts first;
  first.stop_after = m.split_index;
  first.update_running = false;
  Tensor f1 = run(tape, m, binding, x, first).output;
  RunOpts second;
  second.start_at = m.split_index;
  second.update_running = false;
  Tensor f2 = run(tape, m, binding, f1, second).output;
  CHECK(whole.data == f2.data);
}

TEST_CASE("checkpoint: bitwise round-trip") {
  Model m = toy_model(51);
  m.iteration = 1234;
  m.rng_state = {1, 2, 3, 4};
  m.set_mode(Mode::kEval);
  const auto path = temp_file("cf_test_roundtrip.ck");
  save(m, path.string());
  Model back = load(path.string());

  CHECK(flatten_params(m) == flatten_params(back));
  CHECK(back.iteration == 1234);
  CHECK(back.rng_state == std::array<std::uint64_t, 4>{1, 2, 3, 4});
  CHECK(back.split_index == m.split_index);

  Rng rng(52);
  Tensor x = random_tensor(rng, {2, 3, 8, 8});
  CHECK(infer(m, x).data == infer(back, x).data);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: malformed files raise FormatError") {
  Model m = toy_model(61);
  auto bytes = serialize(m);

  auto corrupt = bytes;
  corrupt[0] = 'X';
  CHECK_THROWS_AS(deserialize(corrupt), FormatError);

  auto wrong_version = bytes;
  wrong_version[4] = 9;
  CHECK_THROWS_AS(deserialize(wrong_version), FormatError);

  auto truncated = bytes;
  truncated.resize(truncated.size() / 2);
  CHECK_THROWS_AS(deserialize(truncated), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize(trailing), FormatError);
}

TEST_CASE("checkpoint: pruned model round-trips with reduced topology") {
  Model m = toy_model(71);
  GammaIndex index = collect_gamma(m);
  Rng rng(72);
  for (Layer& layer : m.layers) {
    if (auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      for (double& g : norm->gamma) g = rng.uniform(0.01, 1.0);
    }
  }
  index = collect_gamma(m);
  const double t = global_threshold(index, 0.5);
  auto [pruned, report] = prune(m, t, true,
                                static_cast<std::size_t>(std::ceil(0.5 * 10 - 1e-9)));

  const auto path = temp_file("cf_test_pruned.ck");
  save(pruned, path.string());
  Model back = load(path.string());
  for (const auto& lr : report.per_layer) {
    const auto& conv = std::get<ConvLayer>(back.layers[lr.layer]);
    CHECK(conv.out_channels == lr.kept.size());
  }
  CHECK(flatten_params(pruned) == flatten_params(back));
  std::filesystem::remove(path);
}

TEST_CASE("prune report: table and key-value serialization") {
  Model m = toy_model(81);
  auto [pruned, report] = prune(m, -1.0);
  const std::string kv = report.key_values();
  CHECK(kv.find("threshold=") != std::string::npos);
  CHECK(kv.find("channels_pruned=0") != std::string::npos);
  CHECK(kv.find("params_before=") != std::string::npos);
  CHECK(report.table().find("params") != std::string::npos);
}
