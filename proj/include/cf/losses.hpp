#pragma once

#include <optional>
#include <span>
#include <vector>

#include "cf/autodiff.hpp"
#include "cf/tensor.hpp"

namespace cf {

// Weights of the combined objective
//   L_all = L_sup + lambda*|Gamma|_1 + alpha*L_distill + beta*L_align
//           + eta*L_rademacher
// with the shared softmax temperature tau.
struct LossWeights {
  double lambda = 0.001;
  double alpha = 0.7;
  double beta = 1e-6;
  double eta = 0.001;
  double tau = 3.0;
};

void validate(const LossWeights& w);  // ConfigError on bound violations

// Frozen teacher responses for one pool of a minibatch. `softened` holds
// temperature-softened probability rows, `confidence` their row maxima.
// Constants: no gradient ever flows into the teacher.
struct TeacherOutput {
  Tensor softened;    // [M, K]
  Tensor confidence;  // [M]
  Tensor raw_logits;  // [M, K]
};

// Builds softened rows at temperature tau and confidences at
// confidence_tau (0 = share tau).
TeacherOutput make_teacher_output(const Tensor& teacher_logits, double tau,
                                  double confidence_tau = 0.0);

// Mean cross-entropy (natural log) of the labeled minibatch.
Tensor supervision_loss(Tape& tape, const Tensor& student_logits,
                        const std::vector<int>& labels);

// Per-row max of the temperature-softened teacher distribution; lies in
// (1/K, 1] for non-degenerate logits.
Tensor confidence(const Tensor& teacher_logits, double tau);

// (1/M) sum_i C_i * H(p_tilde_i, p_i) between softened teacher rows and the
// student's softened output at the same temperature.
Tensor distillation_loss(Tape& tape, const Tensor& student_logits,
                         const TeacherOutput& teacher, double tau);

struct L1Result {
  double value = 0.0;
  std::vector<double> subgradient;  // sign(gamma) with sign(0) = 0
};
L1Result l1_sparsity(std::span<const double> gamma_all);

// L_D = -[ balance * mean(log d_labeled) + mean(log(1 - d_unlabeled)) ].
// d values must already be post-sigmoid, strictly inside (0,1).
Tensor discriminator_loss(Tape& tape, const Tensor& d_labeled,
                          const Tensor& d_unlabeled, double balance);

// Aligner objective: mean(log(1 - d_unlabeled)), minimized so unlabeled
// features drift toward the labeled pool while the labeled branch stays
// anchored.
Tensor aligner_loss(Tape& tape, const Tensor& d_unlabeled);

// (1/N') * max_k sum_i |f^k(x_i)| over the raw outputs of the full mixed
// minibatch.
Tensor rademacher_loss(Tape& tape, const Tensor& outputs);

// Optional terms of the combined objective. `gamma_l1` is the raw
// ||Gamma||_1 value; total_loss applies lambda.
struct LossParts {
  std::optional<Tensor> supervision;
  std::optional<Tensor> gamma_l1;
  std::optional<Tensor> distillation;
  std::optional<Tensor> adversarial;
  std::optional<Tensor> rademacher;
};

// Weighted combination. Zero-weighted and absent parts contribute no tape
// nodes at all, so degenerate weights reduce bitwise to the surviving term.
// Non-finite parts raise NumericError naming the offending term.
Tensor total_loss(Tape& tape, const LossParts& parts, const LossWeights& w);

}  // namespace cf
