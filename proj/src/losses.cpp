#include "cf/losses.hpp"

#include <cmath>
#include <string>

#include "cf/error.hpp"
#include "cf/layers.hpp"

namespace cf {
namespace {

void check_part_finite(const std::optional<Tensor>& part, const char* name) {
  if (!part.has_value()) return;
  if (!part->is_scalar()) {
    throw ShapeError(std::string(name) + " term must be scalar");
  }
  if (!std::isfinite(part->item())) {
    throw NumericError(std::string(name) + " term is non-finite");
  }
}

void check_probability_open(const Tensor& d, const char* name) {
  for (double v : d.data) {
    if (!(v > 0.0 && v < 1.0)) {
      throw DomainError(std::string(name) +
                        " must lie strictly inside (0,1), got " +
                        std::to_string(v));
    }
  }
}

}  // namespace

void validate(const LossWeights& w) {
  if (w.lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (w.alpha < 0.0) throw ConfigError("alpha must be >= 0");
  if (w.beta < 0.0) throw ConfigError("beta must be >= 0");
  if (w.eta < 0.0) throw ConfigError("eta must be >= 0");
  if (w.tau <= 0.0) throw ConfigError("tau must be > 0");
}

TeacherOutput make_teacher_output(const Tensor& teacher_logits, double tau,
                                  double confidence_tau) {
  if (teacher_logits.rank() != 2) {
    throw ShapeError("teacher logits must be [M,K]");
  }
  Tape scratch;
  TeacherOutput out;
  out.raw_logits = teacher_logits;
  out.raw_logits.node = kNoNode;
  out.raw_logits.requires_grad = false;
  out.softened = softmax_temperature(scratch, out.raw_logits, tau);
  out.confidence = confidence(
      out.raw_logits, confidence_tau > 0.0 ? confidence_tau : tau);
  return out;
}

Tensor supervision_loss(Tape& tape, const Tensor& student_logits,
                        const std::vector<int>& labels) {
  if (student_logits.rank() != 2) {
    throw ShapeError("supervision_loss expects [N,K] logits");
  }
  const std::size_t n = student_logits.shape[0];
  const std::size_t k = student_logits.shape[1];
  if (labels.size() != n) {
    throw SizeError("label count does not match logits rows");
  }
  if (n == 0) throw DataError("supervision_loss on an empty batch");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw DataError("label " + std::to_string(labels[i]) +
                      " outside [0," + std::to_string(k) + ")");
    }
  }

  // Mean CE = -sum(onehot/N * log_softmax). The one-hot weights fold the
  // batch mean, so the whole loss is one mul and one sum on the tape.
  Tensor weights = zeros({n, k});
  const double inv_n = -1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    weights.data[i * k + static_cast<std::size_t>(labels[i])] = inv_n;
  }
  Tensor logp = tape.log_softmax_tau(student_logits, 1.0);
  return tape.sum(tape.mul(logp, weights));
}

Tensor confidence(const Tensor& teacher_logits, double tau) {
  if (teacher_logits.rank() != 2) {
    throw ShapeError("confidence expects [M,K] logits");
  }
  Tape scratch;
  Tensor detached = teacher_logits;
  detached.node = kNoNode;
  detached.requires_grad = false;
  const Tensor soft = softmax_temperature(scratch, detached, tau);
  const std::size_t m = soft.shape[0], k = soft.shape[1];
  Tensor out = zeros({m});
  for (std::size_t i = 0; i < m; ++i) {
    double best = soft.data[i * k];
    for (std::size_t j = 1; j < k; ++j) {
      best = std::max(best, soft.data[i * k + j]);
    }
    out.data[i] = best;
  }
  return out;
}

Tensor distillation_loss(Tape& tape, const Tensor& student_logits,
                         const TeacherOutput& teacher, double tau) {
  if (student_logits.rank() != 2) {
    throw ShapeError("distillation_loss expects [M,K] logits");
  }
  const std::size_t m = student_logits.shape[0];
  const std::size_t k = student_logits.shape[1];
  if (teacher.softened.rank() != 2 || teacher.softened.shape[0] != m) {
    throw SizeError("student and teacher row counts disagree");
  }
  if (teacher.softened.shape[1] != k) {
    throw SizeError("student and teacher class counts disagree");
  }
  if (teacher.confidence.numel() != m) {
    throw SizeError("confidence vector length mismatch");
  }
  if (m == 0) throw DataError("distillation_loss on an empty batch");

  // W_ik = -(C_i / M) * p_tilde_ik, a constant; loss = sum(W * log p).
  Tensor weights = zeros({m, k});
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double ci = teacher.confidence.data[i];
    for (std::size_t j = 0; j < k; ++j) {
      weights.data[i * k + j] = -ci * inv_m * teacher.softened.data[i * k + j];
    }
  }
  Tensor logp = tape.log_softmax_tau(student_logits, tau);
  return tape.sum(tape.mul(logp, weights));
}

L1Result l1_sparsity(std::span<const double> gamma_all) {
  L1Result r;
  r.subgradient.resize(gamma_all.size());
  for (std::size_t i = 0; i < gamma_all.size(); ++i) {
    const double g = gamma_all[i];
    r.value += std::abs(g);
    r.subgradient[i] = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
  }
  return r;
}

Tensor discriminator_loss(Tape& tape, const Tensor& d_labeled,
                          const Tensor& d_unlabeled, double balance) {
  if (balance <= 0.0) throw ConfigError("discriminator balance must be > 0");
  if (d_labeled.numel() == 0 || d_unlabeled.numel() == 0) {
    throw DataError("discriminator_loss needs both pools");
  }
  check_probability_open(d_labeled, "d_labeled");
  check_probability_open(d_unlabeled, "d_unlabeled");

  const double nl = static_cast<double>(d_labeled.numel());
  const double nu = static_cast<double>(d_unlabeled.numel());
  Tensor labeled_term = tape.scale(tape.sum(tape.log(d_labeled)), -balance / nl);
  Tensor ones = full(d_unlabeled.shape, 1.0);
  Tensor unlabeled_term =
      tape.scale(tape.sum(tape.log(tape.sub(ones, d_unlabeled))), -1.0 / nu);
  return tape.add(labeled_term, unlabeled_term);
}

Tensor aligner_loss(Tape& tape, const Tensor& d_unlabeled) {
  if (d_unlabeled.numel() == 0) {
    throw DataError("aligner_loss on an empty pool");
  }
  check_probability_open(d_unlabeled, "d_unlabeled");
  Tensor ones = full(d_unlabeled.shape, 1.0);
  return tape.mean(tape.log(tape.sub(ones, d_unlabeled)));
}

Tensor rademacher_loss(Tape& tape, const Tensor& outputs) {
  if (outputs.rank() != 2) {
    throw ShapeError("rademacher_loss expects [N,K] raw outputs");
  }
  if (outputs.shape[0] == 0) throw DataError("rademacher_loss on empty batch");
  const double inv_n = 1.0 / static_cast<double>(outputs.shape[0]);
  Tensor column_abs = tape.sum(tape.abs(outputs), /*axis=*/0);
  return tape.scale(tape.max(column_abs), inv_n);
}

Tensor total_loss(Tape& tape, const LossParts& parts, const LossWeights& w) {
  validate(w);
  check_part_finite(parts.supervision, "supervision");
  check_part_finite(parts.gamma_l1, "gamma_l1");
  check_part_finite(parts.distillation, "distillation");
  check_part_finite(parts.adversarial, "adversarial");
  check_part_finite(parts.rademacher, "rademacher");

  std::optional<Tensor> acc;
  auto fold = [&](const std::optional<Tensor>& part, double weight) {
    if (!part.has_value() || weight == 0.0) return;
    Tensor term = weight == 1.0 ? *part : tape.scale(*part, weight);
    acc = acc.has_value() ? tape.add(*acc, term) : term;
  };
  fold(parts.supervision, 1.0);
  fold(parts.gamma_l1, w.lambda);
  fold(parts.distillation, w.alpha);
  fold(parts.adversarial, w.beta);
  fold(parts.rademacher, w.eta);
  if (!acc.has_value()) {
    throw DataError("total_loss with no active terms");
  }
  return *acc;
}

}  // namespace cf
