// Built against the double-precision engine.
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "nestcal/loss.hpp"
#include "nestcal/model.hpp"

using namespace nestcal;

namespace {

NestedModelSpec tiny(Variant v) {
  NestedModelSpec s;
  s.variant = v;
  s.height = s.width = 8;
  s.arities = {2, 3};
  s.encoder_widths = {2, 2};
  s.decoder_widths = {2};
  s.init_seed = 11;
  if (v != Variant::nested_no_skip) s.head_hidden = 3;  // no-skip keeps linear heads
  if (v == Variant::mtl) {
    s.arities = {2, 3, 4};
    s.encoder_widths = {2, 2, 2};
    s.decoder_widths = {};
    s.mtl_hidden = 3;
  }
  if (v == Variant::end_to_end) s.arities = {3};
  return s;
}

struct Problem {
  Tensor x;
  std::vector<std::vector<int>> labels;
  std::vector<double> alphas;
};

Problem make_problem(const Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Problem p{Tensor(1, 5, 8, 8), {}, std::vector<double>(m.levels(), 1.0)};
  for (auto& v : p.x.data) v = u(rng);
  for (int l = 0; l < m.levels(); ++l) {
    std::vector<int> y(5);
    for (int k = 0; k < 5; ++k) y[k] = static_cast<int>(rng() % m.spec().arities[l]);
    if (l > 0) y[4] = -1;  // one sample annotated only at the coarsest level
    p.labels.push_back(y);
    p.alphas[l] = 1.0 + 0.5 * l;
  }
  return p;
}

double loss(Model& m, const Problem& p) {
  const auto out = m.forward(p.x, nn::Mode::train);
  return batch_loss(out.scores, p.labels, p.alphas, false).total;
}

void check_gradients(Variant v) {
  Model model(tiny(v));
  const auto prob = make_problem(model, 7);
  for (auto* q : model.parameters()) q->grad.setZero();
  const auto out = model.forward(prob.x, nn::Mode::train);
  const auto res = batch_loss(out.scores, prob.labels, prob.alphas, true);
  model.backward(res.grads);

  // 20 entries drawn across all parameter tensors. A 1e-3 step crosses ReLU and max-pool
  // switch points often enough on this tiny model to cost a few percent, so step 1e-6.
  auto params = model.parameters();
  std::mt19937_64 rng(123);
  const double h = 1e-6;
  int checked = 0;
  while (checked < 20) {
    auto* q = params[rng() % params.size()];
    const Eigen::Index i = static_cast<Eigen::Index>(rng() % q->value.size());
    const double analytic = q->grad.data()[i];
    const Scalar saved = q->value.data()[i];
    q->value.data()[i] = saved + h;
    const double up = loss(model, prob);
    q->value.data()[i] = saved - h;
    const double down = loss(model, prob);
    q->value.data()[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
    CAPTURE(q->name);
    CAPTURE(analytic);
    CAPTURE(numeric);
    CHECK(std::abs(analytic - numeric) / scale <= 1e-4);
    ++checked;
  }
}

}  // namespace

TEST_CASE("analytic gradients match central differences") {
  SUBCASE("nested") { check_gradients(Variant::nested); }
  SUBCASE("no skip") { check_gradients(Variant::nested_no_skip); }
  SUBCASE("end to end") { check_gradients(Variant::end_to_end); }
  SUBCASE("mtl") { check_gradients(Variant::mtl); }
}

TEST_CASE("input gradient matches central differences") {
  Model model(tiny(Variant::nested));
  const auto prob = make_problem(model, 3);
  const auto out = model.forward(prob.x, nn::Mode::eval);
  const auto res = batch_loss(out.scores, prob.labels, prob.alphas, true);
  const auto dx = model.backward(res.grads, true);
  auto eval_loss = [&](const Tensor& x) {
    const auto o = model.forward(x, nn::Mode::eval);
    return batch_loss(o.scores, prob.labels, prob.alphas, false).total;
  };
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const std::size_t i = rng() % prob.x.size();
    Tensor up = prob.x, down = prob.x;
    up.data[i] += 1e-3;
    down.data[i] -= 1e-3;
    const double numeric = (eval_loss(up) - eval_loss(down)) / 2e-3;
    const double scale = std::max({std::abs(dx.data[i]), std::abs(numeric), 1e-6});
    CHECK(std::abs(dx.data[i] - numeric) / scale <= 1e-2);
  }
}

TEST_CASE("masked batch loss") {
  // Per-sample losses (0.1, 0.2) and (0.3, 0.4) over two levels, built from
  // two-class scores with CE = -log p.
  auto scores_for = [](double l0, double l1) {
    Matrix s(3, 2);
    for (int k = 0; k < 2; ++k) {
      const double ce = k == 0 ? l0 : l1;
      const double p = std::exp(-ce);
      s(0, k) = std::log(p);
      s(1, k) = std::log(1 - p);
      s(2, k) = 5.0;  // rejection slot, ignored
    }
    return s;
  };
  const std::vector<Matrix> scores{scores_for(0.1, 0.3), scores_for(0.2, 0.4)};
  const std::vector<double> alphas{1.0, 2.0};
  // The second sample lacks a level-1 label.
  const auto r = batch_loss(scores, {{0, 0}, {0, -1}}, alphas);
  CHECK(r.total == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(r.counts == std::vector<int>{2, 1});

  const auto none = batch_loss(scores, {{-1, -1}, {-1, -1}}, alphas);
  CHECK(none.total == 0.0);

  // Linear in alpha.
  const std::vector<double> doubled{2.0, 4.0};
  CHECK(batch_loss(scores, {{0, 0}, {0, -1}}, doubled).total == doctest::Approx(2 * r.total));
}
