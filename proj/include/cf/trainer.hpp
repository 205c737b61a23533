#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cf/data.hpp"
#include "cf/losses.hpp"
#include "cf/model.hpp"
#include "cf/rng.hpp"

namespace cf {

enum class LrSchedule {
  kHalvesDrop01,      // x0.1 at 1/2 and 3/4 of the budget
  kMilestonesDrop03,  // x0.3 at 40%, 70% and 90%
};

// Every knob of the three-stage pipeline in one validated record.
struct PipelineConfig {
  LossWeights weights;          // lambda, alpha, beta, eta, tau
  double confidence_tau = 0.0;  // 0 = share weights.tau
  double prune_fraction = 0.7;
  long iterations_sparse = 1000;
  long iterations_finetune = -1;  // -1 = half of iterations_sparse
  double lr_sparse = 0.003;
  double lr_finetune = 0.001;
  double lr_discriminator = 0.01;
  LrSchedule lr_schedule = LrSchedule::kMilestonesDrop03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  long batch_labeled = 64;
  long batch_unlabeled = 64;
  std::uint64_t seed = 1;
  double balance = 0.0;  // 0 = N^u / N^l from the pool sizes

  bool distill_on_labeled = true;
  bool literal_eq10_aligner = false;
  bool confidence_weighting = true;
  bool adversarial = true;
  bool rademacher = true;
  bool finetune_supervision_only = false;
  bool augment = true;
  long eval_every = 0;  // 0 = only at the end

  // Architecture and data wiring.
  std::vector<LayerSpec> arch;
  InputShape input{3, 32, 32};
  int classes = 8;
  long split_index = 0;  // 0 = auto
  std::string teacher_path;
  std::string metrics_path;
  SynthConfig synth;
  std::string norm_mode = "auto";  // auto | none | explicit
  std::vector<double> norm_mean;
  std::vector<double> norm_std;

  long effective_finetune_iterations() const {
    return iterations_finetune >= 0 ? iterations_finetune
                                    : iterations_sparse / 2;
  }
};

// Bounds checks for user-supplied configs (ConfigError on violation).
void validate(const PipelineConfig& config);

// Binary critic on f1 features: conv (keeps width) -> relu -> conv
// (doubles width) -> relu -> global average pool -> dense -> sigmoid.
struct Discriminator {
  ConvLayer conv1;
  ConvLayer conv2;
  DenseLayer head;
};

Discriminator build_discriminator(std::size_t in_channels, std::uint64_t seed);

struct DiscriminatorBinding {
  ModelBinding::LayerLeaves conv1, conv2, head;
  std::vector<BoundParam> params;
};

DiscriminatorBinding bind_discriminator(Tape& tape, Discriminator& disc,
                                        bool trainable);

// Returns post-sigmoid outputs in (0,1), one per feature-map row.
Tensor run_discriminator(Tape& tape, const Discriminator& disc,
                         const DiscriminatorBinding& binding,
                         const Tensor& features);

// SGD with momentum; weight decay only where BoundParam::decay is set.
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const Tape& tape, const std::vector<BoundParam>& params, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct MetricsRecord {
  long iteration = 0;
  double lr = 0.0;
  double total = 0.0;
  double supervision = 0.0;
  double l1_value = 0.0;  // raw ||Gamma||_1 entering the loss
  double distillation = 0.0;
  double adversarial = 0.0;
  double rademacher_term = 0.0;
  double gamma_l1 = 0.0;  // ||Gamma||_1 after the step
  double accuracy = -1.0;  // < 0 when not evaluated this iteration
};

// Append-only sink: newline-delimited key=value records, optionally
// mirrored to a file.
class MetricsSink {
 public:
  MetricsSink() = default;
  explicit MetricsSink(const std::string& path);
  void append(const MetricsRecord& record);
  const std::vector<MetricsRecord>& history() const { return history_; }

 private:
  std::vector<MetricsRecord> history_;
  std::ofstream file_;
};

// Piecewise-constant schedule; boundaries trigger at
// iteration >= ceil(fraction * total).
double lr_at(long iteration, long total, double base_lr, LrSchedule kind);

struct DataBundle {
  const LabeledDataset* labeled = nullptr;
  const UnlabeledDataset* unlabeled = nullptr;  // optional
  const LabeledDataset* test = nullptr;         // optional
  Normalizer normalizer;
};

// One critic update on the current minibatch; f1 stays frozen.
double discriminator_step(const Batch& batch, Model& student,
                          Discriminator& disc, SgdOptimizer& opt,
                          double balance, double lr);

// One SGD step of the combined objective. `disc` may be null when the
// adversarial term is off; it is read but never updated here.
// `lambda_override` < 0 keeps the configured sparsity weight
// (fine-tuning passes 0).
MetricsRecord student_step(const Batch& batch, Model& student,
                           Discriminator* disc, const PipelineConfig& config,
                           SgdOptimizer& opt, double lr,
                           double lambda_override = -1.0);

// Stage-keyed stream derivation: the in-process pipeline and the staged
// CLI commands draw identical streams for identical (seed, stage).
Rng stage_rng(std::uint64_t seed, int stage);

// Algorithm stages. The student is updated in place; the teacher (when
// given) is only ever forwarded. Records land in `sink` when non-null.
void sparse_retrain(Model& student, const Model* teacher,
                    const DataBundle& data, const PipelineConfig& config,
                    Rng& rng, MetricsSink* sink);

void finetune(Model& student, const Model* teacher, const DataBundle& data,
              const PipelineConfig& config, Rng& rng, MetricsSink* sink);

// Top-1 accuracy with argmax ties broken to the lowest class index.
double evaluate(const Model& model, const LabeledDataset& dataset,
                const Normalizer& normalizer);

struct PipelineResult {
  Model model;
  PruneReport report;
  double accuracy_sparse = -1.0;  // after sparse retraining
  double accuracy_pruned = -1.0;  // right after surgery
  double accuracy_final = -1.0;   // after fine-tuning
};

// train-sparse -> prune -> finetune -> eval, in process.
PipelineResult run_pipeline(const Model& teacher, const DataBundle& data,
                            const PipelineConfig& config, MetricsSink* sink);

}  // namespace cf
