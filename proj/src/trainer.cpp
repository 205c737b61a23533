#include "cf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cf/error.hpp"
#include "cf/verify.hpp"

namespace cf {

void validate(const PipelineConfig& config) {
  validate(config.weights);
  if (config.confidence_tau < 0.0) throw ConfigError("confidence_tau must be >= 0");
  if (!(config.prune_fraction >= 0.0 && config.prune_fraction < 1.0)) {
    throw ConfigError("prune_fraction must lie in [0,1)");
  }
  if (config.iterations_sparse < 1) {
    throw ConfigError("iterations_sparse must be >= 1");
  }
  if (config.lr_sparse <= 0.0 || config.lr_finetune <= 0.0 ||
      config.lr_discriminator <= 0.0) {
    throw ConfigError("learning rates must be > 0");
  }
  if (!(config.momentum >= 0.0 && config.momentum < 1.0)) {
    throw ConfigError("momentum must lie in [0,1)");
  }
  if (config.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (config.batch_labeled < 1) throw ConfigError("batch_labeled must be >= 1");
  if (config.batch_unlabeled < 0) throw ConfigError("batch_unlabeled must be >= 0");
  if (config.balance < 0.0) throw ConfigError("balance must be >= 0");
  if (config.classes < 2) throw ConfigError("classes must be >= 2");
  if (config.split_index < 0) throw ConfigError("split_index must be >= 0");
}

Discriminator build_discriminator(std::size_t in_channels, std::uint64_t seed) {
  Rng rng(seed);
  Discriminator d;
  auto init_conv = [&](ConvLayer& conv, std::size_t in_c, std::size_t out_c) {
    conv.in_channels = in_c;
    conv.out_channels = out_c;
    conv.kernel_h = conv.kernel_w = 3;
    conv.stride = 2;
    conv.padding = 1;
    conv.has_bias = true;
    const std::size_t fan_in = in_c * 9;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    conv.kernel.resize(out_c * in_c * 9);
    for (double& v : conv.kernel) v = rng.uniform(-bound, bound);
    conv.bias.assign(out_c, 0.0);
  };
  init_conv(d.conv1, in_channels, in_channels);
  init_conv(d.conv2, in_channels, 2 * in_channels);
  d.head.in_features = 2 * in_channels;
  d.head.units = 1;
  const double bound = std::sqrt(6.0 / static_cast<double>(d.head.in_features));
  d.head.weight.resize(d.head.in_features);
  for (double& v : d.head.weight) v = rng.uniform(-bound, bound);
  d.head.bias.assign(1, 0.0);
  return d;
}

DiscriminatorBinding bind_discriminator(Tape& tape, Discriminator& disc,
                                        bool trainable) {
  DiscriminatorBinding b;
  auto bind_conv = [&](ConvLayer& conv, ModelBinding::LayerLeaves& slot) {
    slot.a = tape.create({conv.out_channels, conv.in_channels, conv.kernel_h,
                          conv.kernel_w},
                         conv.kernel, trainable);
    slot.b = tape.create({conv.out_channels}, conv.bias, trainable);
    if (trainable) {
      b.params.push_back({&conv.kernel, slot.a->node, true, false});
      b.params.push_back({&conv.bias, slot.b->node, false, false});
    }
  };
  bind_conv(disc.conv1, b.conv1);
  bind_conv(disc.conv2, b.conv2);
  b.head.a = tape.create({disc.head.in_features, disc.head.units},
                         disc.head.weight, trainable);
  b.head.b = tape.create({disc.head.units}, disc.head.bias, trainable);
  if (trainable) {
    b.params.push_back({&disc.head.weight, b.head.a->node, true, false});
    b.params.push_back({&disc.head.bias, b.head.b->node, false, false});
  }
  return b;
}

Tensor run_discriminator(Tape& tape, const Discriminator& disc,
                         const DiscriminatorBinding& binding,
                         const Tensor& features) {
  if (features.rank() != 4) {
    throw ShapeError("discriminator expects NCHW features");
  }
  if (features.shape[2] != features.shape[3]) {
    throw ShapeError("discriminator expects square feature maps");
  }
  ConvLeaves c1{&*binding.conv1.a, &*binding.conv1.b};
  ConvLeaves c2{&*binding.conv2.a, &*binding.conv2.b};
  Tensor h = tape.relu(conv_forward(tape, disc.conv1, features, &c1));
  h = tape.relu(conv_forward(tape, disc.conv2, h, &c2));
  h = tape.avg_pool(h, h.shape[2], h.shape[2]);  // global average pool
  h = tape.reshape(h, {h.shape[0], h.shape[1]});
  DenseLeaves dl{&*binding.head.a, &*binding.head.b};
  Tensor logit = dense_forward(tape, disc.head, h, &dl);
  Tensor d = tape.sigmoid(logit);
  return tape.reshape(d, {d.shape[0]});
}

void SgdOptimizer::step(const Tape& tape, const std::vector<BoundParam>& params,
                        double lr) {
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    velocity_.reserve(params.size());
    for (const BoundParam& p : params) {
      velocity_.emplace_back(p.storage->size(), 0.0);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const BoundParam& p = params[i];
    std::vector<double>& w = *p.storage;
    std::vector<double>& v = velocity_[i];
    const Tensor* grad = tape.grad(p.node);
    for (std::size_t j = 0; j < w.size(); ++j) {
      double g = grad != nullptr ? grad->data[j] : 0.0;
      if (p.decay) g += weight_decay_ * w[j];
      v[j] = momentum_ * v[j] + g;
      w[j] -= lr * v[j];
    }
  }
}

MetricsSink::MetricsSink(const std::string& path) {
  if (!path.empty()) {
    file_.open(path, std::ios::trunc);
    if (!file_) throw RuntimeError("cannot open metrics file " + path);
  }
}

void MetricsSink::append(const MetricsRecord& r) {
  history_.push_back(r);
  if (!file_.is_open()) return;
  std::ostringstream os;
  os.precision(12);
  os << "iter=" << r.iteration << " lr=" << r.lr << " loss_total=" << r.total
     << " loss_sup=" << r.supervision << " loss_l1=" << r.l1_value
     << " loss_distill=" << r.distillation << " loss_adv=" << r.adversarial
     << " loss_rad=" << r.rademacher_term << " gamma_l1=" << r.gamma_l1;
  if (r.accuracy >= 0.0) os << " acc=" << r.accuracy;
  file_ << os.str() << "\n";
  file_.flush();
}

double lr_at(long iteration, long total, double base_lr, LrSchedule kind) {
  if (total < 1) return base_lr;
  auto boundary = [total](long num, long den) {
    return (total * num + den - 1) / den;  // ceil(total * num / den)
  };
  double lr = base_lr;
  if (kind == LrSchedule::kHalvesDrop01) {
    if (iteration >= boundary(1, 2)) lr *= 0.1;
    if (iteration >= boundary(3, 4)) lr *= 0.1;
  } else {
    if (iteration >= boundary(2, 5)) lr *= 0.3;
    if (iteration >= boundary(7, 10)) lr *= 0.3;
    if (iteration >= boundary(9, 10)) lr *= 0.3;
  }
  return lr;
}

double discriminator_step(const Batch& batch, Model& student,
                          Discriminator& disc, SgdOptimizer& opt,
                          double balance, double lr) {
  if (batch.unlabeled_images.shape[0] == 0) {
    throw DataError("discriminator_step needs both pools in the batch");
  }
  Tape tape;
  ModelBinding frozen = bind(tape, student, /*trainable=*/false);
  RunOpts opts;
  opts.stop_after = student.split_index;
  opts.update_running = false;
  Tensor feats_l = run(tape, student, frozen, batch.labeled_images, opts).output;
  Tensor feats_u =
      run(tape, student, frozen, batch.unlabeled_images, opts).output;

  DiscriminatorBinding db = bind_discriminator(tape, disc, /*trainable=*/true);
  Tensor d_l = run_discriminator(tape, disc, db, feats_l);
  Tensor d_u = run_discriminator(tape, disc, db, feats_u);
  Tensor loss = discriminator_loss(tape, d_l, d_u, balance);
  tape.backward(loss);
  opt.step(tape, db.params, lr);
  return loss.item();
}

Rng stage_rng(std::uint64_t seed, int stage) {
  return Rng(seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(stage));
}

MetricsRecord student_step(const Batch& batch, Model& student,
                           Discriminator* disc, const PipelineConfig& config,
                           SgdOptimizer& opt, double lr,
                           double lambda_override) {
  LossWeights weights = config.weights;
  if (lambda_override >= 0.0) weights.lambda = lambda_override;
  const bool have_unlabeled = batch.unlabeled_images.shape[0] > 0;
  const bool want_distill = weights.alpha > 0.0 &&
                            (have_unlabeled || config.distill_on_labeled) &&
                            batch.teacher_labeled.softened.numel() > 0;
  const bool want_adversarial =
      config.adversarial && weights.beta > 0.0 && have_unlabeled && disc != nullptr;
  const bool want_rademacher = config.rademacher && weights.eta > 0.0;
  const bool need_unlabeled_forward =
      have_unlabeled &&
      ((weights.alpha > 0.0 && batch.teacher_unlabeled.softened.numel() > 0) ||
       want_adversarial || want_rademacher);

  Tape tape;
  ModelBinding binding = bind(tape, student, /*trainable=*/true);

  RunOpts labeled_opts;
  labeled_opts.capture_split = want_adversarial && config.literal_eq10_aligner;
  RunResult labeled_run = run(tape, student, binding, batch.labeled_images,
                              labeled_opts);
  const Tensor& logits_l = labeled_run.output;

  LossParts parts;
  parts.supervision = supervision_loss(tape, logits_l, batch.labels);

  if (weights.lambda > 0.0) {
    std::optional<Tensor> acc;
    for (const Tensor& gamma : binding.gamma_leaves) {
      Tensor term = tape.sum(tape.abs(gamma));
      acc = acc.has_value() ? tape.add(*acc, term) : term;
    }
    parts.gamma_l1 = acc;
  }

  RunResult unlabeled_run;
  if (need_unlabeled_forward) {
    RunOpts unlabeled_opts;
    unlabeled_opts.capture_split = want_adversarial;
    // Normalize the unlabeled pool with its own batch statistics but keep
    // the running estimates tracking the labeled domain: eval-mode
    // statistics must describe the distribution the model is deployed on,
    // not the biased collection pool.
    unlabeled_opts.update_running = false;
    unlabeled_run =
        run(tape, student, binding, batch.unlabeled_images, unlabeled_opts);
  }

  if (want_distill) {
    std::optional<Tensor> distill;
    if (have_unlabeled && batch.teacher_unlabeled.softened.numel() > 0) {
      distill = distillation_loss(tape, unlabeled_run.output,
                                  batch.teacher_unlabeled, weights.tau);
    }
    if (config.distill_on_labeled &&
        batch.teacher_labeled.softened.numel() > 0) {
      // The labeled mimicking term carries no confidence weights.
      TeacherOutput plain = batch.teacher_labeled;
      plain.confidence = full({batch.labeled_images.shape[0]}, 1.0);
      Tensor term = distillation_loss(tape, logits_l, plain, weights.tau);
      distill = distill.has_value() ? tape.add(*distill, term) : term;
    }
    parts.distillation = distill;
  }

  if (want_adversarial) {
    DiscriminatorBinding db = bind_discriminator(tape, *disc, /*trainable=*/false);
    Tensor d_u = run_discriminator(tape, *disc, db, unlabeled_run.split_features);
    if (config.literal_eq10_aligner) {
      Tensor d_l =
          run_discriminator(tape, *disc, db, labeled_run.split_features);
      const double inv_nl = 1.0 / static_cast<double>(d_l.numel());
      Tensor labeled_term = tape.scale(tape.sum(tape.log(d_l)), inv_nl);
      parts.adversarial = tape.add(labeled_term, aligner_loss(tape, d_u));
    } else {
      parts.adversarial = aligner_loss(tape, d_u);
    }
  }

  if (want_rademacher) {
    Tensor outputs = need_unlabeled_forward
                         ? tape.concat_rows(logits_l, unlabeled_run.output)
                         : logits_l;
    parts.rademacher = rademacher_loss(tape, outputs);
  }

  Tensor total = total_loss(tape, parts, weights);
  tape.backward(total);
  opt.step(tape, binding.params, lr);

  MetricsRecord record;
  record.lr = lr;
  record.total = total.item();
  record.supervision = parts.supervision->item();
  record.l1_value = parts.gamma_l1 ? parts.gamma_l1->item() : 0.0;
  record.distillation = parts.distillation ? parts.distillation->item() : 0.0;
  record.adversarial = parts.adversarial ? parts.adversarial->item() : 0.0;
  record.rademacher_term = parts.rademacher ? parts.rademacher->item() : 0.0;
  double gamma_l1 = 0.0;
  for (const Layer& layer : student.layers) {
    if (const auto* norm = std::get_if<ScaledNormLayer>(&layer)) {
      for (double g : norm->gamma) gamma_l1 += std::abs(g);
    }
  }
  record.gamma_l1 = gamma_l1;
  return record;
}

namespace {

struct StageSetup {
  long iterations = 0;
  double base_lr = 0.0;
  double lambda_override = -1.0;
};

std::size_t split_feature_channels(const Model& model) {
  // Channel count feeding the discriminator: walk backwards from the split
  // to the nearest layer that fixes the width.
  for (std::size_t i = model.split_index; i-- > 0;) {
    if (const auto* conv = std::get_if<ConvLayer>(&model.layers[i])) {
      return conv->out_channels;
    }
    if (const auto* norm = std::get_if<ScaledNormLayer>(&model.layers[i])) {
      return norm->channels;
    }
  }
  return model.input.channels;
}

void train_loop(Model& student, const Model* teacher, const DataBundle& data,
                const PipelineConfig& config, const StageSetup& stage, Rng& rng,
                MetricsSink* sink) {
  if (data.labeled == nullptr) throw DataError("training needs labeled data");
  student.set_mode(Mode::kTrain);

  const bool supervision_only =
      stage.lambda_override == 0.0 && config.finetune_supervision_only;
  LossWeights weights = config.weights;

  PipelineConfig effective = config;
  if (supervision_only) {
    effective.weights.alpha = 0.0;
    effective.adversarial = false;
    effective.rademacher = false;
  }

  const bool has_unlabeled =
      data.unlabeled != nullptr && data.unlabeled->images.shape[0] > 0 &&
      config.batch_unlabeled > 0 && !supervision_only;
  const bool use_adversarial = effective.adversarial &&
                               effective.weights.beta > 0.0 && has_unlabeled &&
                               teacher != nullptr;

  double balance = config.balance;
  if (balance <= 0.0 && has_unlabeled) {
    balance = static_cast<double>(data.unlabeled->images.shape[0]) /
              static_cast<double>(data.labeled->images.shape[0]);
  }
  if (balance <= 0.0) balance = 1.0;

  Discriminator disc;
  SgdOptimizer disc_opt(config.momentum, config.weight_decay);
  if (use_adversarial) {
    disc = build_discriminator(split_feature_channels(student), rng.next_u64());
  }

  BatchOptions batch_opts;
  batch_opts.n_labeled = static_cast<std::size_t>(config.batch_labeled);
  batch_opts.n_unlabeled =
      has_unlabeled ? static_cast<std::size_t>(config.batch_unlabeled) : 0;
  batch_opts.tau = weights.tau;
  batch_opts.confidence_tau = config.confidence_tau;
  batch_opts.confidence_weighting = config.confidence_weighting;
  batch_opts.augment = config.augment;

  SgdOptimizer opt(config.momentum, config.weight_decay);
  for (long it = 0; it < stage.iterations; ++it) {
    const double lr = lr_at(it, stage.iterations, stage.base_lr, config.lr_schedule);
    Batch batch = sample_minibatch(*data.labeled, has_unlabeled ? data.unlabeled : nullptr,
                                   batch_opts, teacher, data.normalizer, rng);
    if (use_adversarial) {
      discriminator_step(batch, student, disc, disc_opt, balance,
                         config.lr_discriminator);
    }
    MetricsRecord record =
        student_step(batch, student, use_adversarial ? &disc : nullptr,
                     effective, opt, lr, stage.lambda_override);
    record.iteration = static_cast<long>(student.iteration) + it;
    if (!std::isfinite(record.total)) {
      throw NumericError("loss diverged at iteration " +
                         std::to_string(record.iteration));
    }
    if (sink != nullptr) {
      if (config.eval_every > 0 && data.test != nullptr &&
          (it + 1) % config.eval_every == 0) {
        record.accuracy = evaluate(student, *data.test, data.normalizer);
      }
      sink->append(record);
    }
  }
  student.iteration += static_cast<std::uint64_t>(stage.iterations);
  student.rng_state = rng.state();
}

}  // namespace

void sparse_retrain(Model& student, const Model* teacher,
                    const DataBundle& data, const PipelineConfig& config,
                    Rng& rng, MetricsSink* sink) {
  StageSetup stage;
  stage.iterations = config.iterations_sparse;
  stage.base_lr = config.lr_sparse;
  stage.lambda_override = -1.0;
  train_loop(student, teacher, data, config, stage, rng, sink);
}

void finetune(Model& student, const Model* teacher, const DataBundle& data,
              const PipelineConfig& config, Rng& rng, MetricsSink* sink) {
  StageSetup stage;
  stage.iterations = config.effective_finetune_iterations();
  stage.base_lr = config.lr_finetune;
  stage.lambda_override = 0.0;  // the sparsity term is dropped when tuning
  train_loop(student, teacher, data, config, stage, rng, sink);
}

double evaluate(const Model& model, const LabeledDataset& dataset,
                const Normalizer& normalizer) {
  const std::size_t n = dataset.images.shape[0];
  if (n == 0) return 0.0;
  const std::size_t c = dataset.images.shape[1], h = dataset.images.shape[2],
                    w = dataset.images.shape[3];
  const std::size_t image_size = c * h * w;
  const std::size_t batch = 256;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t count = std::min(batch, n - start);
    Tensor chunk;
    chunk.shape = {count, c, h, w};
    chunk.data.assign(
        dataset.images.data.begin() + static_cast<std::ptrdiff_t>(start * image_size),
        dataset.images.data.begin() +
            static_cast<std::ptrdiff_t>((start + count) * image_size));
    Tensor logits = infer(model, apply_normalizer(chunk, normalizer));
    const std::size_t k = logits.shape[1];
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (logits(i, j) > logits(i, arg)) arg = j;
      }
      if (static_cast<int>(arg) == dataset.labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

PipelineResult run_pipeline(const Model& teacher, const DataBundle& data,
                            const PipelineConfig& config, MetricsSink* sink) {
  PipelineResult result;
  Model student = teacher;  // Algorithm line 1: initialize f with f-tilde
  student.iteration = 0;

  Rng sparse_rng = stage_rng(config.seed, 1);
  sparse_retrain(student, &teacher, data, config, sparse_rng, sink);
  if (data.test != nullptr) {
    result.accuracy_sparse = evaluate(student, *data.test, data.normalizer);
  }

  const GammaIndex index = collect_gamma(student);
  const double threshold = global_threshold(index, config.prune_fraction);
  const auto quota = static_cast<std::size_t>(std::ceil(
      config.prune_fraction * static_cast<double>(index.entries.size()) - 1e-9));
  auto [pruned, report] = prune(student, threshold, true, quota);
  result.report = report;
  if (data.test != nullptr) {
    result.accuracy_pruned = evaluate(pruned, *data.test, data.normalizer);
  }

  Rng finetune_rng = stage_rng(config.seed, 2);
  finetune(pruned, &teacher, data, config, finetune_rng, sink);
  if (data.test != nullptr) {
    result.accuracy_final = evaluate(pruned, *data.test, data.normalizer);
  }
  result.model = std::move(pruned);
  return result;
}

}  // namespace cf
