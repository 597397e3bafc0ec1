#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "nestcal/calibration.hpp"
#include "nestcal/error.hpp"
#include "nestcal/inference.hpp"
#include "nestcal/training.hpp"
#include "synthetic.hpp"

using namespace nestcal;
using namespace nestcal::testing;

TEST_CASE("hypersphere area") {
  CHECK(hypersphere_area(1) == doctest::Approx(2.0));
  CHECK(hypersphere_area(2) == doctest::Approx(2 * std::numbers::pi));
  CHECK(hypersphere_area(3) == doctest::Approx(4 * std::numbers::pi));
  CHECK(hypersphere_area(4) == doctest::Approx(2 * std::numbers::pi * std::numbers::pi));
  CHECK_THROWS_AS(hypersphere_area(0), ValidationError);
}

TEST_CASE("rejection samples lie on the sphere with isotropic moments") {
  CHECK(sample_rejection(5, 0, 1).cols() == 0);
  const auto pts = sample_rejection(3, 100000, 7);
  for (Eigen::Index k = 0; k < pts.cols(); k += 997) CHECK(pts.col(k).norm() == doctest::Approx(1.0).epsilon(1e-12));
  const Eigen::VectorXd mean = pts.rowwise().mean();
  const Eigen::MatrixXd centered = pts.colwise() - mean;
  const Eigen::MatrixXd cov = centered * centered.transpose() / static_cast<double>(pts.cols());
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(mean(i)) <= 0.01);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(cov(i, j) - (i == j ? 1.0 / 3 : 0.0)) <= 0.01);
  }
}

TEST_CASE("rejection count") {
  RejectionConfig rc;
  rc.density_constant = 1.0;
  CHECK(rejection_count(rc, 1234, 2) == 1234);
  rc.density_constant = 0.5;
  CHECK(rejection_count(rc, 1000, 2) == 500);
  // S(3)/S(2) = 2.
  CHECK(rejection_count(rc, 1000, 3) == 1000);
  rc.density_constant = 100;
  CHECK(rejection_count(rc, 1000, 2) == 4000);  // capped at 4 |D|
}

TEST_CASE("ECE") {
  const std::vector<double> ones(8, 1.0);
  const std::vector<std::uint8_t> all(8, 1);
  CHECK(ece(ones, all) == doctest::Approx(0.0));

  const std::vector<double> c9(10, 0.9);
  std::vector<std::uint8_t> eight(10, 1);
  eight[0] = eight[1] = 0;
  CHECK(ece(c9, eight, 1) == doctest::Approx(0.1));

  // Two equally populated bins with gaps 0.1 and 0.3.
  const std::vector<double> conf{0.3, 0.3, 0.3, 0.3, 0.3, 0.9, 0.9, 0.9, 0.9, 0.9};
  const std::vector<std::uint8_t> hit{1, 1, 0, 0, 0, 1, 1, 1, 0, 0};
  CHECK(ece(conf, hit, 2) == doctest::Approx(0.2));

  // Permutation invariance and bounds.
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> c(200);
  std::vector<std::uint8_t> y(200);
  for (int i = 0; i < 200; ++i) {
    c[i] = u(rng);
    y[i] = u(rng) < 0.6;
  }
  const double e = ece(c, y);
  std::vector<int> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> c2(200);
  std::vector<std::uint8_t> y2(200);
  for (int i = 0; i < 200; ++i) {
    c2[i] = c[perm[i]];
    y2[i] = y[perm[i]];
  }
  CHECK(ece(c2, y2) == doctest::Approx(e));
  CHECK(e >= 0.0);
  CHECK(e <= 1.0);
}

TEST_CASE("temperature scaling") {
  const std::vector<double> s{1.0, 0.0};
  const auto p1 = apply_temperature(s, 1.0);
  CHECK(p1[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1)));
  const auto p2 = apply_temperature(s, 2.0);
  CHECK(p2[0] == doctest::Approx(0.6224593312018546));
  CHECK(p2[1] == doctest::Approx(0.3775406687981454));
  const std::vector<double> two{2.0, 0.0};
  CHECK(apply_temperature(two, 3.0)[0] < apply_temperature(two, 1.0)[0]);
  CHECK(apply_temperature(two, 3.0)[0] > 0.5);
  CHECK_THROWS_AS(apply_temperature(s, 0.0), ValidationError);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 3);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(6);
    for (auto& x : v) x = g(rng);
    const auto a = std::max_element(v.begin(), v.end()) - v.begin();
    for (double T : {0.3, 1.0, 2.5, 10.0}) {
      const auto p = apply_temperature(v, T);
      CHECK(std::max_element(p.begin(), p.end()) - p.begin() == a);
    }
  }
}

TEST_CASE("temperature grid") {
  const auto g = TemperatureGrid::parse("50:1:3");
  const auto v = g.values();
  REQUIRE(v.size() == 50);
  CHECK(v.front() == 1.0);
  CHECK(v.back() == doctest::Approx(3.0));
  CHECK_THROWS_AS(TemperatureGrid::parse("nonsense"), ValidationError);
}

namespace {

// Scores whose softmax at T = 1 is calibrated by construction: the label is
// drawn from the softmax itself.
void calibrated_scores(int n, double scale, std::uint64_t seed, Eigen::MatrixXd& scores, std::vector<int>& labels) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> u(0, 1);
  scores.resize(4, n);
  labels.resize(n);
  for (int k = 0; k < n; ++k) {
    std::vector<double> s(3);
    for (int c = 0; c < 3; ++c) s[c] = scale * g(rng);
    const auto p = apply_temperature(s, 1.0);
    const double r = u(rng);
    labels[k] = r < p[0] ? 0 : (r < p[0] + p[1] ? 1 : 2);
    for (int c = 0; c < 3; ++c) scores(c, k) = s[c];
    scores(3, k) = -50;  // rejection slot
  }
}

}  // namespace

TEST_CASE("fit_temperature") {
  Eigen::MatrixXd scores;
  std::vector<int> labels;
  calibrated_scores(20000, 2.0, 3, scores, labels);
  const auto fit = fit_temperature(scores, labels);
  CHECK(fit.temperature <= 1.1);
  CHECK(fit.ece_after <= fit.ece_before + 1e-12);

  // Overconfident scores: doubling the logits calls for T near 2.
  const Eigen::MatrixXd hot = 2.0 * scores;
  const auto fit2 = fit_temperature(hot, labels);
  CHECK(fit2.temperature > 1.5);
  CHECK(fit2.temperature < 2.5);
  CHECK(fit2.ece_after <= fit2.ece_before);

  // Perfect, fully confident predictions tie everywhere at ECE 0 -> first grid point.
  Eigen::MatrixXd sharp = Eigen::MatrixXd::Constant(3, 10, -100);
  std::vector<int> y(10);
  for (int k = 0; k < 10; ++k) {
    y[k] = k % 2;
    sharp(y[k], k) = 100;
  }
  CHECK(fit_temperature(sharp, y).temperature == 1.0);
}

TEST_CASE("calibrated probabilities drop the rejection slot") {
  Matrix s(4, 2);
  s << 1, 0, 0, 1, 0, 0, 3, 3;
  Eigen::VectorXd rej;
  const auto p = calibrated_probabilities(s, 1.0, &rej);
  CHECK(p.rows() == 3);
  for (int k = 0; k < 2; ++k) CHECK(p.col(k).sum() == doctest::Approx(1.0));
  CHECK(rej(0) > 0.5);
  CHECK(p(0, 0) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 2)));
}

TEST_CASE("rejection fine-tuning touches only the heads") {
  auto train = quadrant_dataset(300, 1);
  auto val = quadrant_dataset(100, 2);
  const auto pds = partition_dataset(train, std::vector<int>{100, 100}, 3);
  Model model(quadrant_spec());
  TrainConfig tc;
  tc.alphas = {1, 1};
  tc.learning_rates = {5e-3, 5e-3};
  tc.max_epochs = 25;
  tc.batch_size = 32;
  tc.seed = 1;
  RejectionConfig rc;
  rc.density_constant = 2.0;
  rc.epochs = 50;
  CHECK_THROWS_AS(fit_rejection_class(model, train, pds, rc), ValidationError);  // untrained
  train_cascaded(model, train, pds, val, tc);

  std::vector<Matrix> trunk;
  for (auto* p : model.parameters())
    if (!p->head) trunk.push_back(p->value);
  const auto before = run_inference(model, train);
  const auto rep = fit_rejection_class(model, train, pds, rc);
  std::size_t i = 0;
  for (auto* p : model.parameters())
    if (!p->head) CHECK(p->value == trunk[i++]);

  CHECK(rep.real_counts == std::vector<int>{200, 100});
  for (double kept : rep.argmax_kept) CHECK(kept >= 0.9);
  const auto after = run_inference(model, train);
  const auto a = argmax_real(before.scores[1]), b = argmax_real(after.scores[1]);
  int same = 0;
  for (std::size_t k = 0; k < a.size(); ++k) same += a[k] == b[k];
  CHECK(same >= 0.9 * a.size());

  // Unit vectors far from every training feature are rejected far more often than the
  // training features themselves. The 4-d toy bottleneck is crowded; the MNIST probe
  // rate is reported by the acceptance run.
  const int s = model.spec().bottleneck_widths()[0];
  const auto feats = run_inference(model, train, 0, true).bottlenecks[0];
  const auto probes = sample_rejection(s, 2000, 99);
  std::vector<Eigen::Index> far;
  for (Eigen::Index k = 0; k < probes.cols(); ++k) {
    const double cos = (feats.transpose() * probes.col(k).cast<Scalar>()).maxCoeff();
    if (cos < 0.5) far.push_back(k);
  }
  REQUIRE(far.size() >= 100);
  Matrix z(s, static_cast<Eigen::Index>(far.size()));
  for (std::size_t k = 0; k < far.size(); ++k) z.col(static_cast<Eigen::Index>(k)) = probes.col(far[k]).cast<Scalar>();
  const auto scores = model.head_forward(0, z);
  int rejected = 0;
  for (Eigen::Index k = 0; k < scores.cols(); ++k) {
    Eigen::Index arg;
    scores.col(k).maxCoeff(&arg);
    rejected += arg == scores.rows() - 1;
  }
  CAPTURE(far.size());
  const auto own = model.head_forward(0, feats);
  int own_rejected = 0;
  for (Eigen::Index k = 0; k < own.cols(); ++k) {
    Eigen::Index arg;
    own.col(k).maxCoeff(&arg);
    own_rejected += arg == own.rows() - 1;
  }
  CHECK(static_cast<double>(rejected) / scores.cols() >= 0.5);
  CHECK(static_cast<double>(rejected) / scores.cols() > 2.0 * static_cast<double>(own_rejected) / own.cols());

  const auto cal = fit_calibration(model, val);
  CHECK(cal.temperatures.size() == 2);
  for (std::size_t l = 0; l < 2; ++l) CHECK(cal.ece_after[l] <= cal.ece_before[l] + 1e-12);
  CHECK(CalibrationState::from_json(cal.to_json()).temperatures == cal.temperatures);
  CHECK(cal.bin_edges().size() == 16);
}
