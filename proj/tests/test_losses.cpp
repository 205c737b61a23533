#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "cf/losses.hpp"
#include "cf/rng.hpp"
#include "cf/verify.hpp"

using namespace cf;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                     double hi = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return tensor(std::move(shape), std::move(data));
}

// Scalar softmax row at temperature tau, textbook evaluation.
std::vector<double> softmax_row(const double* z, std::size_t k, double tau) {
  double hi = z[0];
  for (std::size_t j = 1; j < k; ++j) hi = std::max(hi, z[j]);
  std::vector<double> p(k);
  double denom = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    p[j] = std::exp((z[j] - hi) / tau);
    denom += p[j];
  }
  for (double& v : p) v /= denom;
  return p;
}

}  // namespace

TEST_CASE("supervision_loss: uniform logits give ln K") {
  Tape tape;
  Tensor logits = full({4, 10}, 0.3);
  std::vector<int> labels = {0, 3, 9, 5};
  Tensor loss = supervision_loss(tape, logits, labels);
  CHECK(std::abs(loss.item() - std::log(10.0)) < 1e-12);
}

TEST_CASE("supervision_loss: confident correct prediction approaches zero") {
  Tape tape;
  Tensor logits = zeros({2, 5});
  logits(0, 2) = 60.0;
  logits(1, 0) = 60.0;
  Tensor loss = supervision_loss(tape, logits, {2, 0});
  CHECK(loss.item() >= 0.0);
  CHECK(loss.item() < 1e-12);
}

TEST_CASE("supervision_loss: scalar recomputation oracle") {
  Tape tape;
  Rng rng(3);
  Tensor logits = random_tensor(rng, {6, 7}, -3, 3);
  std::vector<int> labels;
  for (int i = 0; i < 6; ++i) labels.push_back(static_cast<int>(rng.uniform_int(7)));
  Tensor loss = supervision_loss(tape, logits, labels);

  double want = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    auto p = softmax_row(&logits.data[i * 7], 7, 1.0);
    want -= std::log(p[static_cast<std::size_t>(labels[i])]);
  }
  want /= 6.0;
  CHECK(std::abs(loss.item() - want) < 1e-12);

  CHECK_THROWS_AS(supervision_loss(tape, logits, {0, 1, 2, 3, 4, 7}), DataError);
  CHECK_THROWS_AS(supervision_loss(tape, logits, {0, 1, 2, 3, 4, -1}), DataError);
}

TEST_CASE("confidence: uniform, saturated and oracle rows") {
  Tensor equal = full({3, 4}, -0.7);
  Tensor c = confidence(equal, 3.0);
  for (double v : c.data) CHECK(v == 0.25);

  Tensor sharp = zeros({1, 6});
  sharp(0, 0) = 400.0;
  CHECK(confidence(sharp, 1.0).data[0] > 1.0 - 1e-12);

  Tensor logits = tensor({1, 3}, {2, 1, 0});
  auto p = softmax_row(logits.data.data(), 3, 3.0);
  double want = std::max({p[0], p[1], p[2]});
  CHECK(std::abs(confidence(logits, 3.0).data[0] - want) < 1e-12);
}

TEST_CASE("confidence: invariant to constant logit shifts") {
  Rng rng(5);
  Tensor logits = random_tensor(rng, {4, 6}, -2, 2);
  Tensor shifted = logits;
  for (std::size_t i = 0; i < 4; ++i) {
    const double shift = rng.uniform(-50, 50);
    for (std::size_t j = 0; j < 6; ++j) shifted(i, j) += shift;
  }
  Tensor a = confidence(logits, 2.0);
  Tensor b = confidence(shifted, 2.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(a.data[i] - b.data[i]) < 1e-9);
}

TEST_CASE("distillation_loss: floors, uniform teacher, oracle") {
  Tape tape;
  Rng rng(7);
  const double tau = 3.0;

  // Student == teacher: the confidence-weighted teacher entropy.
  Tensor logits = random_tensor(rng, {5, 4}, -2, 2);
  TeacherOutput teacher = make_teacher_output(logits, tau);
  Tensor self_loss = distillation_loss(tape, logits, teacher, tau);
  double want = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double h = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      const double p = teacher.softened(i, j);
      h -= p * std::log(p);
    }
    want += teacher.confidence.data[i] * h;
  }
  want /= 5.0;
  CHECK(std::abs(self_loss.item() - want) < 1e-12);

  // Uniform teacher rows: C = 1/K and every H term = ln K.
  const std::size_t k = 6;
  TeacherOutput uniform = make_teacher_output(full({3, k}, 0.0), tau);
  Tensor student = random_tensor(rng, {3, k}, -1, 1);
  // Student uniform too: loss = (ln K) / K exactly.
  Tensor student_uniform = full({3, k}, 0.0);
  Tensor lu = distillation_loss(tape, student_uniform, uniform, tau);
  CHECK(std::abs(lu.item() - std::log(6.0) / 6.0) < 1e-12);

  // Random case against a scalar recomputation.
  Tensor t_logits = random_tensor(rng, {4, 5}, -3, 3);
  TeacherOutput t = make_teacher_output(t_logits, tau);
  Tensor s_logits = random_tensor(rng, {4, 5}, -3, 3);
  Tensor loss = distillation_loss(tape, s_logits, t, tau);
  double expect = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    auto sp = softmax_row(&s_logits.data[i * 5], 5, tau);
    double h = 0.0;
    for (std::size_t j = 0; j < 5; ++j) h -= t.softened(i, j) * std::log(sp[j]);
    expect += t.confidence.data[i] * h;
  }
  expect /= 4.0;
  CHECK(std::abs(loss.item() - expect) < 1e-12);

  Tensor mismatched = random_tensor(rng, {3, 5});
  CHECK_THROWS_AS(distillation_loss(tape, mismatched, t, tau), SizeError);
}

TEST_CASE("distillation_loss: cross-entropy at least entropy per example") {
  Tape tape;
  Rng rng(11);
  const double tau = 2.0;
  Tensor t_logits = random_tensor(rng, {8, 5}, -2, 2);
  TeacherOutput teacher = make_teacher_output(t_logits, tau);
  Tensor floor_loss = distillation_loss(tape, t_logits, teacher, tau);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor student = random_tensor(rng, {8, 5}, -4, 4);
    Tensor loss = distillation_loss(tape, student, teacher, tau);
    CHECK(loss.item() >= floor_loss.item() - 1e-12);
  }
}

TEST_CASE("l1_sparsity: definition, zero case, abs+sum oracle") {
  auto r = l1_sparsity(std::vector<double>{0.5, -0.25});
  CHECK(r.value == 0.75);
  CHECK(r.subgradient == std::vector<double>{1.0, -1.0});

  auto z = l1_sparsity(std::vector<double>{0.0, 0.0, 0.0});
  CHECK(z.value == 0.0);
  CHECK(z.subgradient == std::vector<double>{0.0, 0.0, 0.0});

  Rng rng(13);
  std::vector<double> gam(40);
  for (double& v : gam) v = rng.uniform(-2, 2);
  auto got = l1_sparsity(gam);
  Tape tape;
  Tensor t = tape.create({40}, gam, false);
  const double want = tape.sum(tape.abs(t)).item();
  CHECK(std::abs(got.value - want) < 1e-12);
}

TEST_CASE("discriminator_loss: half, perfect discriminator, oracle") {
  Tape tape;
  Rng rng(17);

  Tensor dl = full({4}, 0.5);
  Tensor du = full({4}, 0.5);
  Tensor at_half = discriminator_loss(tape, dl, du, 1.0);
  CHECK(std::abs(at_half.item() - 2.0 * std::log(2.0)) < 1e-12);

  Tensor good_l = full({4}, 1.0 - 1e-12);
  Tensor good_u = full({4}, 1e-12);
  CHECK(discriminator_loss(tape, good_l, good_u, 1.0).item() < 1e-10);

  Tensor rl = random_tensor(rng, {5}, 0.05, 0.95);
  Tensor ru = random_tensor(rng, {7}, 0.05, 0.95);
  const double balance = 3.0;
  Tensor loss = discriminator_loss(tape, rl, ru, balance);
  double sl = 0.0, su = 0.0;
  for (double v : rl.data) sl += std::log(v);
  for (double v : ru.data) su += std::log(1.0 - v);
  const double want = -(balance * sl / 5.0 + su / 7.0);
  CHECK(std::abs(loss.item() - want) < 1e-12);

  CHECK_THROWS_AS(discriminator_loss(tape, full({2}, 1.5), ru, 1.0), DomainError);
  CHECK_THROWS_AS(discriminator_loss(tape, rl, full({2}, 0.0), 1.0), DomainError);
}

TEST_CASE("discriminator_loss: constant-d gradient vanishes at one half") {
  // With balance 1 and equal batch sizes the loss over a shared constant d
  // is stationary at d = 0.5.
  auto h = [](double d) {
    Tape tape;
    Tensor dl = full({6}, d);
    Tensor du = full({6}, d);
    return discriminator_loss(tape, dl, du, 1.0).item();
  };
  const double eps = 1e-6;
  const double fd = (h(0.5 + eps) - h(0.5 - eps)) / (2.0 * eps);
  CHECK(std::abs(fd) < 1e-9);
}

TEST_CASE("aligner_loss: constant, fooling limit, oracle") {
  Tape tape;
  Rng rng(19);

  CHECK(std::abs(aligner_loss(tape, full({5}, 0.5)).item() - std::log(0.5)) <
        1e-12);

  Tensor tiny = full({4}, 1e-9);
  const double near_zero = aligner_loss(tape, tiny).item();
  CHECK(near_zero < 0.0);
  CHECK(near_zero > -1e-8);

  Tensor d = random_tensor(rng, {6}, 0.05, 0.95);
  double want = 0.0;
  for (double v : d.data) want += std::log(1.0 - v);
  want /= 6.0;
  CHECK(std::abs(aligner_loss(tape, d).item() - want) < 1e-12);
}

TEST_CASE("rademacher_loss: hand case, zeros, column oracle") {
  Tape tape;
  Rng rng(23);

  Tensor hand = tensor({2, 2}, {1, -2, 3, 1});
  CHECK(rademacher_loss(tape, hand).item() == 2.0);

  CHECK(rademacher_loss(tape, zeros({3, 4})).item() == 0.0);

  Tensor outputs = random_tensor(rng, {9, 5}, -4, 4);
  double best = 0.0;
  for (std::size_t j = 0; j < 5; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < 9; ++i) col += std::abs(outputs(i, j));
    best = std::max(best, col);
  }
  CHECK(std::abs(rademacher_loss(tape, outputs).item() - best / 9.0) < 1e-12);
}

TEST_CASE("rademacher_loss: positive homogeneity") {
  Tape tape;
  Rng rng(29);
  Tensor outputs = random_tensor(rng, {6, 4}, -3, 3);
  const double base = rademacher_loss(tape, outputs).item();

  for (double c : {2.0, 0.5, 4.0}) {  // powers of two scale exactly
    Tensor scaled = outputs;
    for (double& v : scaled.data) v *= c;
    CHECK(rademacher_loss(tape, scaled).item() == c * base);
  }
  Tensor tripled = outputs;
  for (double& v : tripled.data) v *= 3.0;
  CHECK(std::abs(rademacher_loss(tape, tripled).item() - 3.0 * base) < 1e-12);
}

TEST_CASE("total_loss: degenerate weights reduce to supervision") {
  Tape tape;
  Tensor logits = full({3, 4}, 0.1);
  Tensor sup = supervision_loss(tape, logits, {0, 1, 2});
  LossParts parts;
  parts.supervision = sup;
  parts.gamma_l1 = scalar(5.0);
  parts.distillation = scalar(2.0);
  parts.adversarial = scalar(-0.3);
  parts.rademacher = scalar(1.0);
  LossWeights w;
  w.lambda = w.alpha = w.beta = w.eta = 0.0;
  Tensor total = total_loss(tape, parts, w);
  CHECK(total.item() == sup.item());
  CHECK(total.node == sup.node);
}

TEST_CASE("total_loss: arithmetic and paper-weight oracle") {
  Tape tape;
  LossParts ones;
  ones.supervision = scalar(1.0);
  ones.distillation = scalar(1.0);
  ones.adversarial = scalar(1.0);
  ones.rademacher = scalar(1.0);
  LossWeights w;
  w.lambda = 0.0;
  w.alpha = 0.7;
  w.beta = 1e-6;
  w.eta = 0.01;
  const double want = ((1.0 + 0.7 * 1.0) + 1e-6 * 1.0) + 0.01 * 1.0;
  CHECK(total_loss(tape, ones, w).item() == want);

  Rng rng(31);
  LossParts parts;
  parts.supervision = scalar(rng.uniform(0, 3));
  parts.gamma_l1 = scalar(rng.uniform(0, 10));
  parts.distillation = scalar(rng.uniform(0, 3));
  parts.adversarial = scalar(rng.uniform(-2, 0));
  parts.rademacher = scalar(rng.uniform(0, 5));
  LossWeights pw;  // alpha 0.7, tau 3 from the reference recipe
  pw.lambda = 0.002;
  const double expect = parts.supervision->item() +
                        pw.lambda * parts.gamma_l1->item() +
                        pw.alpha * parts.distillation->item() +
                        pw.beta * parts.adversarial->item() +
                        pw.eta * parts.rademacher->item();
  CHECK(std::abs(total_loss(tape, parts, pw).item() - expect) < 1e-12);
}

TEST_CASE("total_loss: non-finite parts are rejected by name") {
  Tape tape;
  LossParts parts;
  parts.supervision = scalar(1.0);
  Tensor bad;
  bad.shape = {};
  bad.data = {std::numeric_limits<double>::infinity()};
  parts.distillation = bad;
  LossWeights w;
  try {
    total_loss(tape, parts, w);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("distillation") != std::string::npos);
  }
}

TEST_CASE("loss gradients pass the finite-difference check") {
  Rng rng(37);
  std::vector<double> s_logits(4 * 5);
  for (double& v : s_logits) v = rng.uniform(-2, 2);
  Tensor t_logits = random_tensor(rng, {4, 5}, -2, 2);
  TeacherOutput teacher = make_teacher_output(t_logits, 3.0);
  std::vector<int> labels = {0, 2, 4, 1};
  std::vector<double> d_raw(6);
  for (double& v : d_raw) v = rng.uniform(-1.5, 1.5);

  std::vector<double> g_logits, g_draw;
  auto loss_fn = [&](bool want_grads) {
    Tape tape;
    Tensor z = tape.create({4, 5}, s_logits, true);
    Tensor draw = tape.create({6}, d_raw, true);
    Tensor d = tape.sigmoid(draw);
    LossParts parts;
    parts.supervision = supervision_loss(tape, z, labels);
    parts.distillation = distillation_loss(tape, z, teacher, 3.0);
    parts.adversarial = aligner_loss(tape, d);
    parts.rademacher = rademacher_loss(tape, z);
    LossWeights w;
    w.lambda = 0.0;
    w.alpha = 0.7;
    w.beta = 0.1;
    w.eta = 0.01;
    Tensor total = total_loss(tape, parts, w);
    if (want_grads) {
      tape.backward(total);
      g_logits = tape.grad(z.node)->data;
      g_draw = tape.grad(draw.node)->data;
    }
    return total.item();
  };
  loss_fn(true);
  auto report = verify::finite_diff(
      [&]() { return loss_fn(false); },
      {{"logits", s_logits.data(), s_logits.size(), g_logits.data()},
       {"d_raw", d_raw.data(), d_raw.size(), g_draw.data()}},
      1e-5);
  INFO("worst ", report.worst_coordinate, " rel ", report.max_rel_error);
  CHECK(report.passes(1e-4, 1e-7));
}

TEST_CASE("make_teacher_output: confidence temperature override knob") {
  Rng rng(41);
  Tensor logits = random_tensor(rng, {5, 6}, -3, 3);
  TeacherOutput shared = make_teacher_output(logits, 3.0);
  TeacherOutput split = make_teacher_output(logits, 3.0, 1.0);
  CHECK(shared.softened.data == split.softened.data);
  CHECK(shared.confidence.data == confidence(logits, 3.0).data);
  CHECK(split.confidence.data == confidence(logits, 1.0).data);
  // A sharper confidence temperature always raises the row maximum.
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(split.confidence.data[i] >= shared.confidence.data[i]);
  }
}
