#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cf/trainer.hpp"
#include "helpers.hpp"

using namespace cf;
using namespace cftest;

namespace {

// Small everything: 16x16 inputs, two conv blocks, 4 classes.
PipelineConfig tiny_config() {
  PipelineConfig config;
  config.classes = 4;
  config.input = {3, 16, 16};
  config.arch = toy_specs(4, 6, 4);
  config.batch_labeled = 8;
  config.batch_unlabeled = 8;
  config.iterations_sparse = 20;
  config.iterations_finetune = 10;
  config.lr_sparse = 0.01;
  config.lr_finetune = 0.005;
  config.augment = false;
  config.eval_every = 0;
  return config;
}

SynthData tiny_data(double bias, std::uint64_t seed = 5,
                    std::size_t n = 128) {
  SynthConfig sc;
  sc.seed = seed;
  sc.class_count = 4;
  sc.n_labeled = n;
  sc.n_unlabeled = n;
  sc.n_test = 64;
  sc.bias_shift = bias;
  sc.height = 16;
  sc.width = 16;
  // 16x16 is below the generator's floor; bump to the minimum.
  sc.height = sc.width = 24;
  return synth_generate(sc);
}

}  // namespace

TEST_CASE("lr_at: schedule boundaries") {
  CHECK(lr_at(60, 100, 0.02, LrSchedule::kHalvesDrop01) == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(lr_at(0, 100, 0.02, LrSchedule::kHalvesDrop01) == 0.02);
  CHECK(lr_at(49, 100, 0.02, LrSchedule::kHalvesDrop01) == 0.02);
  CHECK(lr_at(50, 100, 0.02, LrSchedule::kHalvesDrop01) == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(lr_at(75, 100, 0.02, LrSchedule::kHalvesDrop01) == doctest::Approx(0.0002).epsilon(1e-12));

  const double want = ((0.003 * 0.3) * 0.3) * 0.3;
  CHECK(lr_at(95, 100, 0.003, LrSchedule::kMilestonesDrop03) == want);
  CHECK(lr_at(0, 100, 0.003, LrSchedule::kMilestonesDrop03) == 0.003);
  CHECK(lr_at(39, 100, 0.003, LrSchedule::kMilestonesDrop03) == 0.003);
  CHECK(lr_at(40, 100, 0.003, LrSchedule::kMilestonesDrop03) ==
        doctest::Approx(0.0009).epsilon(1e-12));
}

TEST_CASE("config validation bounds") {
  PipelineConfig config = tiny_config();
  CHECK_NOTHROW(validate(config));
  config.weights.alpha = -1.0;
  CHECK_THROWS_AS(validate(config), ConfigError);
  config = tiny_config();
  config.prune_fraction = 1.0;
  CHECK_THROWS_AS(validate(config), ConfigError);
  config = tiny_config();
  config.iterations_sparse = 0;
  CHECK_THROWS_AS(validate(config), ConfigError);
  config = tiny_config();
  config.momentum = 1.0;
  CHECK_THROWS_AS(validate(config), ConfigError);
}

TEST_CASE("discriminator_step: zero learning rate leaves D unchanged") {
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  Model student = build(config.arch, config.input, 4, 0, 2);
  SynthData data = tiny_data(0.5);
  Rng rng(3);
  BatchOptions opts;
  opts.n_labeled = opts.n_unlabeled = 8;
  Batch batch = sample_minibatch(data.labeled, &data.unlabeled, opts, &student,
                                 {}, rng);

  Discriminator disc = build_discriminator(6, 99);
  const auto kernel_before = disc.conv1.kernel;
  const auto head_before = disc.head.weight;
  SgdOptimizer opt(0.9, 1e-4);
  discriminator_step(batch, student, disc, opt, 1.0, 0.0);
  CHECK(disc.conv1.kernel == kernel_before);
  CHECK(disc.head.weight == head_before);
}

TEST_CASE("discriminator_step: identical pools drift toward one half") {
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  Model student = build(config.arch, config.input, 4, 0, 7);
  // Pools large enough that 500 steps cannot memorize membership; with
  // identical distributions the only stable answer is chance.
  SynthData data = tiny_data(0.0, 11, 1024);
  Rng rng(13);
  BatchOptions opts;
  opts.n_labeled = opts.n_unlabeled = 16;

  Discriminator disc = build_discriminator(6, 17);
  SgdOptimizer opt(0.9, 0.0);
  for (int step = 0; step < 500; ++step) {
    Batch batch = sample_minibatch(data.labeled, &data.unlabeled, opts,
                                   &student, {}, rng);
    discriminator_step(batch, student, disc, opt, 1.0, 0.01);
  }

  // Mean |d - 0.5| over fresh batches.
  double dev = 0.0;
  int count = 0;
  for (int trial = 0; trial < 10; ++trial) {
    Batch batch = sample_minibatch(data.labeled, &data.unlabeled, opts,
                                   &student, {}, rng);
    Tape tape;
    ModelBinding frozen = bind(tape, student, false);
    RunOpts ropts;
    ropts.stop_after = student.split_index;
    ropts.update_running = false;
    Tensor fl = run(tape, student, frozen, batch.labeled_images, ropts).output;
    Tensor fu = run(tape, student, frozen, batch.unlabeled_images, ropts).output;
    DiscriminatorBinding db = bind_discriminator(tape, disc, false);
    for (const Tensor& d :
         {run_discriminator(tape, disc, db, fl),
          run_discriminator(tape, disc, db, fu)}) {
      for (double v : d.data) {
        dev += std::abs(v - 0.5);
        ++count;
      }
    }
  }
  dev /= count;
  INFO("mean |d-0.5| = ", dev);
  CHECK(dev < 0.05);
}

TEST_CASE("discriminator_step: separable pools get a falling loss") {
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  Model student = build(config.arch, config.input, 4, 0, 23);
  SynthData data = tiny_data(1.0, 29, 256);
  Rng rng(31);
  BatchOptions opts;
  opts.n_labeled = opts.n_unlabeled = 16;

  Discriminator disc = build_discriminator(6, 37);
  SgdOptimizer opt(0.9, 0.0);
  std::vector<double> losses;
  for (int step = 0; step < 120; ++step) {
    Batch batch = sample_minibatch(data.labeled, &data.unlabeled, opts,
                                   &student, {}, rng);
    losses.push_back(
        discriminator_step(batch, student, disc, opt, 1.0, 0.05));
  }
  double early = 0, late = 0;
  for (int i = 0; i < 30; ++i) early += losses[i];
  for (int i = 90; i < 120; ++i) late += losses[i];
  INFO("early ", early / 30, " late ", late / 30);
  CHECK(late / 30 < early / 30);
}

TEST_CASE("student_step: degenerate weights match a plain supervised step") {
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  config.weights.lambda = 0.0;
  config.weights.alpha = 0.0;
  config.adversarial = false;
  config.rademacher = false;

  SynthData data = tiny_data(0.0, 41);
  Rng rng_a(43);
  BatchOptions opts;
  opts.n_labeled = 8;
  opts.n_unlabeled = 0;
  Batch batch = sample_minibatch(data.labeled, nullptr, opts, nullptr, {}, rng_a);

  Model a = build(config.arch, config.input, 4, 0, 47);
  Model b = a;

  SgdOptimizer opt(config.momentum, config.weight_decay);
  student_step(batch, a, nullptr, config, opt, 0.01);

  // Reference: supervised cross-entropy + the same SGD arithmetic.
  {
    Tape tape;
    ModelBinding binding = bind(tape, b, true);
    Tensor logits = run(tape, b, binding, batch.labeled_images, {}).output;
    Tensor loss = supervision_loss(tape, logits, batch.labels);
    tape.backward(loss);
    for (const BoundParam& p : binding.params) {
      const Tensor* grad = tape.grad(p.node);
      for (std::size_t j = 0; j < p.storage->size(); ++j) {
        double g = grad != nullptr ? grad->data[j] : 0.0;
        if (p.decay) g += config.weight_decay * (*p.storage)[j];
        (*p.storage)[j] -= 0.01 * g;  // first step: velocity starts at zero
      }
    }
  }

  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (const auto* conv = std::get_if<ConvLayer>(&a.layers[i])) {
      CHECK(conv->kernel == std::get<ConvLayer>(b.layers[i]).kernel);
    } else if (const auto* norm = std::get_if<ScaledNormLayer>(&a.layers[i])) {
      CHECK(norm->gamma == std::get<ScaledNormLayer>(b.layers[i]).gamma);
      CHECK(norm->beta == std::get<ScaledNormLayer>(b.layers[i]).beta);
    } else if (const auto* dense = std::get_if<DenseLayer>(&a.layers[i])) {
      CHECK(dense->weight == std::get<DenseLayer>(b.layers[i]).weight);
      CHECK(dense->bias == std::get<DenseLayer>(b.layers[i]).bias);
    }
  }
}

TEST_CASE("sparse_retrain: zero iterations is a bitwise no-op") {
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  config.iterations_sparse = 0;  // struct-level; load_config would reject it

  SynthData data = tiny_data(0.0, 53);
  DataBundle bundle;
  bundle.labeled = &data.labeled;
  Model teacher = build(config.arch, config.input, 4, 0, 59);
  Model student = teacher;
  Rng rng(61);
  sparse_retrain(student, &teacher, bundle, config, rng, nullptr);

  for (std::size_t i = 0; i < student.layers.size(); ++i) {
    if (const auto* conv = std::get_if<ConvLayer>(&student.layers[i])) {
      CHECK(conv->kernel == std::get<ConvLayer>(teacher.layers[i]).kernel);
    }
  }
}

TEST_CASE("sparse_retrain: teacher parameters never move") {
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  config.iterations_sparse = 8;
  SynthData data = tiny_data(0.3, 67);
  DataBundle bundle;
  bundle.labeled = &data.labeled;
  bundle.unlabeled = &data.unlabeled;

  Model teacher = build(config.arch, config.input, 4, 0, 71);
  const Model frozen_copy = teacher;
  Model student = teacher;
  Rng rng(73);
  sparse_retrain(student, &teacher, bundle, config, rng, nullptr);

  for (std::size_t i = 0; i < teacher.layers.size(); ++i) {
    if (const auto* conv = std::get_if<ConvLayer>(&teacher.layers[i])) {
      CHECK(conv->kernel == std::get<ConvLayer>(frozen_copy.layers[i]).kernel);
    } else if (const auto* norm = std::get_if<ScaledNormLayer>(&teacher.layers[i])) {
      CHECK(norm->gamma == std::get<ScaledNormLayer>(frozen_copy.layers[i]).gamma);
      CHECK(norm->running_mean ==
            std::get<ScaledNormLayer>(frozen_copy.layers[i]).running_mean);
    }
  }
}

TEST_CASE("sparse_retrain: L1 weight pulls the gamma norm down") {
  SynthData data = tiny_data(0.0, 79, 256);
  auto run_with_lambda = [&](double lambda) {
    PipelineConfig config = tiny_config();
    config.input = {3, 24, 24};
    config.iterations_sparse = 200;
    config.weights.lambda = lambda;
    config.weights.alpha = 0.0;
    config.adversarial = false;
    config.rademacher = false;
    DataBundle bundle;
    bundle.labeled = &data.labeled;
    Model student = build(config.arch, config.input, 4, 0, 83);
    Rng rng(89);
    sparse_retrain(student, nullptr, bundle, config, rng, nullptr);
    double norm1 = 0;
    for (const Layer& layer : student.layers) {
      if (const auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
        for (double g : norm->gamma) norm1 += std::abs(g);
      }
    }
    return norm1;
  };
  const double without = run_with_lambda(0.0);
  const double with = run_with_lambda(1.0);
  INFO("lambda=0 -> ", without, ", lambda=1 -> ", with);
  CHECK(with < without);
}

TEST_CASE("evaluate: constant predictor, oracle recount") {
  SynthData data = tiny_data(0.0, 97, 64);

  // Zero weights and a bias spike make class 2 the constant argmax.
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  Model model = build(config.arch, config.input, 4, 0, 101);
  auto& head = std::get<DenseLayer>(model.layers.back());
  std::fill(head.weight.begin(), head.weight.end(), 0.0);
  head.bias = {0.0, 0.0, 1.0, 0.0};
  const double acc = evaluate(model, data.test, {});
  CHECK(acc == doctest::Approx(0.25).epsilon(1e-12));  // balanced classes

  // Fresh model against a brute-force recount.
  Model fresh = build(config.arch, config.input, 4, 0, 103);
  const double got = evaluate(fresh, data.test, {});
  Tensor logits = infer(fresh, data.test.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.test.images.shape[0]; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < 4; ++j) {
      if (logits(i, j) > logits(i, arg)) arg = j;
    }
    if (static_cast<int>(arg) == data.test.labels[i]) ++correct;
  }
  CHECK(got == doctest::Approx(static_cast<double>(correct) /
                               static_cast<double>(data.test.images.shape[0]))
                   .epsilon(1e-12));
}

TEST_CASE("metrics sink: stable key-value lines") {
  const auto path =
      (std::filesystem::temp_directory_path() / "cf_metrics_test.txt").string();
  {
    MetricsSink sink(path);
    MetricsRecord r;
    r.iteration = 7;
    r.lr = 0.01;
    r.total = 1.5;
    r.supervision = 1.25;
    r.gamma_l1 = 4.0;
    sink.append(r);
    r.iteration = 8;
    r.accuracy = 0.625;
    sink.append(r);
  }
  std::ifstream in(path);
  std::string line1, line2;
  std::getline(in, line1);
  std::getline(in, line2);
  CHECK(line1.find("iter=7") != std::string::npos);
  CHECK(line1.find("loss_total=1.5") != std::string::npos);
  CHECK(line1.find("acc=") == std::string::npos);
  CHECK(line2.find("acc=0.625") != std::string::npos);
  std::filesystem::remove(path);
}

TEST_CASE("pipeline: prune quota then recovery on the tiny task") {
  SynthData data = tiny_data(0.3, 107, 256);
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  config.iterations_sparse = 60;
  config.iterations_finetune = 60;
  config.lr_sparse = 0.01;
  config.lr_finetune = 0.01;
  config.prune_fraction = 0.5;
  config.weights.lambda = 0.01;
  config.batch_labeled = 16;
  config.batch_unlabeled = 16;

  // A quick teacher first.
  PipelineConfig teacher_config = config;
  teacher_config.weights.alpha = 0.0;
  teacher_config.weights.lambda = 0.0;
  teacher_config.adversarial = false;
  teacher_config.rademacher = false;
  teacher_config.iterations_sparse = 150;
  Model teacher = build(config.arch, config.input, 4, 0, config.seed);
  DataBundle bundle;
  bundle.labeled = &data.labeled;
  bundle.unlabeled = &data.unlabeled;
  bundle.test = &data.test;
  bundle.normalizer = dataset_normalizer(data.labeled);
  {
    Rng rng = stage_rng(7, 1);
    sparse_retrain(teacher, nullptr, bundle, teacher_config, rng, nullptr);
  }
  const double teacher_acc = evaluate(teacher, data.test, bundle.normalizer);
  INFO("teacher accuracy ", teacher_acc);
  CHECK(teacher_acc > 0.5);

  PipelineResult result = run_pipeline(teacher, bundle, config, nullptr);
  CHECK(result.report.channels_pruned ==
        5 - result.report.guard_rescued);  // ceil(0.5 * 10)
  CHECK(result.accuracy_final >= 0.0);
  // Fine-tuning must help the freshly pruned network.
  INFO("pruned ", result.accuracy_pruned, " final ", result.accuracy_final);
  CHECK(result.accuracy_final >= result.accuracy_pruned);
}

TEST_CASE("finetune: sparsity weight is forced to zero") {
  SynthData data = tiny_data(0.0, 211, 64);
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  config.weights.lambda = 1.0;  // would dominate the loss if it survived
  config.weights.alpha = 0.0;
  config.adversarial = false;
  config.rademacher = false;
  config.iterations_finetune = 5;

  Model student = build(config.arch, config.input, 4, 0, 212);
  DataBundle bundle;
  bundle.labeled = &data.labeled;
  MetricsSink sink;
  Rng rng(213);
  finetune(student, nullptr, bundle, config, rng, &sink);
  REQUIRE(sink.history().size() == 5);
  for (const MetricsRecord& r : sink.history()) {
    CHECK(r.l1_value == 0.0);
    CHECK(r.total == r.supervision);
  }
}

TEST_CASE("student_step: literal Eq-10 aligner includes the labeled branch") {
  SynthData data = tiny_data(0.4, 221, 64);
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  config.weights.alpha = 0.0;
  config.weights.beta = 0.5;
  config.weights.lambda = 0.0;
  config.rademacher = false;
  config.adversarial = true;

  Model teacher = build(config.arch, config.input, 4, 0, 222);
  Rng rng(223);
  BatchOptions opts;
  opts.n_labeled = opts.n_unlabeled = 8;
  Batch batch = sample_minibatch(data.labeled, &data.unlabeled, opts, &teacher,
                                 {}, rng);
  Discriminator disc = build_discriminator(6, 224);

  auto adv_term = [&](bool literal) {
    PipelineConfig c = config;
    c.literal_eq10_aligner = literal;
    Model student = teacher;
    SgdOptimizer opt(0.9, 0.0);
    return student_step(batch, student, &disc, c, opt, 0.0).adversarial;
  };
  const double plain = adv_term(false);
  const double literal = adv_term(true);
  // The literal form adds mean log d_labeled, a strictly negative term.
  CHECK(literal < plain);
  CHECK(plain < 0.0);  // mean log(1 - d_u) itself is negative
}

TEST_CASE("student_step: labeled-pool distillation without unlabeled data") {
  SynthData data = tiny_data(0.0, 231, 64);
  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  config.weights.alpha = 0.7;
  config.weights.lambda = 0.0;
  config.adversarial = false;
  config.rademacher = false;
  config.distill_on_labeled = true;

  Model teacher = build(config.arch, config.input, 4, 0, 232);
  Rng rng(233);
  BatchOptions opts;
  opts.n_labeled = 8;
  opts.n_unlabeled = 0;
  Batch batch = sample_minibatch(data.labeled, nullptr, opts, &teacher, {}, rng);

  Model student = build(config.arch, config.input, 4, 0, 234);
  SgdOptimizer opt(0.9, 0.0);
  MetricsRecord with = student_step(batch, student, nullptr, config, opt, 0.0);
  CHECK(with.distillation > 0.0);

  config.distill_on_labeled = false;
  Model student2 = build(config.arch, config.input, 4, 0, 234);
  SgdOptimizer opt2(0.9, 0.0);
  MetricsRecord without = student_step(batch, student2, nullptr, config, opt2, 0.0);
  CHECK(without.distillation == 0.0);
}

TEST_CASE("evaluate: a memorizing model scores 1.0 on its train set") {
  SynthConfig sc;
  sc.seed = 241;
  sc.class_count = 4;
  sc.n_labeled = 16;
  sc.n_unlabeled = 4;
  sc.n_test = 4;
  sc.height = sc.width = 24;
  SynthData data = synth_generate(sc);

  PipelineConfig config = tiny_config();
  config.input = {3, 24, 24};
  config.weights = {};
  config.weights.lambda = 0.0;
  config.weights.alpha = 0.0;
  config.adversarial = false;
  config.rademacher = false;
  config.iterations_sparse = 250;
  config.lr_sparse = 0.02;
  config.batch_labeled = 16;
  config.batch_unlabeled = 0;

  Model model = build(config.arch, config.input, 4, 0, 242);
  DataBundle bundle;
  bundle.labeled = &data.labeled;
  Rng rng(243);
  sparse_retrain(model, nullptr, bundle, config, rng, nullptr);
  CHECK(evaluate(model, data.labeled, {}) == 1.0);
}

TEST_CASE("finetune: median improvement over the pruned model, 3 seeds") {
  SynthData data = tiny_data(0.3, 251, 512);
  std::vector<double> improvements;
  for (std::uint64_t seed : {1, 2, 3}) {
    PipelineConfig config = tiny_config();
    config.input = {3, 24, 24};
    config.iterations_sparse = 80;
    config.iterations_finetune = 80;
    config.lr_sparse = 0.01;
    config.lr_finetune = 0.01;
    config.prune_fraction = 0.5;
    config.weights.lambda = 0.01;
    config.batch_labeled = 16;
    config.batch_unlabeled = 16;
    config.seed = seed;

    PipelineConfig teacher_config = config;
    teacher_config.weights.alpha = 0.0;
    teacher_config.weights.lambda = 0.0;
    teacher_config.adversarial = false;
    teacher_config.rademacher = false;
    teacher_config.iterations_sparse = 150;
    Model teacher = build(config.arch, config.input, 4, 0, seed + 300);
    DataBundle bundle;
    bundle.labeled = &data.labeled;
    bundle.unlabeled = &data.unlabeled;
    bundle.test = &data.test;
    bundle.normalizer = dataset_normalizer(data.labeled);
    Rng rng = stage_rng(seed, 1);
    sparse_retrain(teacher, nullptr, bundle, teacher_config, rng, nullptr);

    PipelineResult result = run_pipeline(teacher, bundle, config, nullptr);
    improvements.push_back(result.accuracy_final - result.accuracy_pruned);
  }
  std::sort(improvements.begin(), improvements.end());
  INFO("improvements ", improvements[0], " ", improvements[1], " ",
       improvements[2]);
  CHECK(improvements[1] > 0.0);
}
