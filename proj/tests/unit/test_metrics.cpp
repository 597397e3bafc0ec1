#include <doctest.h>

#include <sstream>

#include "nestcal/error.hpp"
#include "nestcal/metrics.hpp"
#include "nestcal/training.hpp"
#include "synthetic.hpp"

using namespace nestcal;
using namespace nestcal::testing;

namespace {

int count_lines(const std::string& s) {
  std::istringstream in(s);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

PredictionSet one_hot(const std::vector<std::vector<int>>& labels, const Taxonomy& tax) {
  PredictionSet ps;
  const int n = static_cast<int>(labels[0].size());
  for (int l = 0; l < tax.levels(); ++l) {
    ps.levels.push_back(l);
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(tax.alphabet_size(l), n);
    for (int k = 0; k < n; ++k) p(labels[l][k], k) = 1.0;
    ps.probabilities.push_back(p);
    ps.rejection.push_back(Eigen::VectorXd::Zero(n));
  }
  return ps;
}

}  // namespace

TEST_CASE("perfect predictor") {
  const auto ds = quadrant_dataset(50, 1);
  const auto tax = quadrant_taxonomy();
  const auto ps = one_hot(ds.level_labels, tax);
  for (auto mode : {CombineMode::none, CombineMode::nested, CombineMode::product, CombineMode::coarse_fine}) {
    const auto r = evaluate_predictions(ps, ds.level_labels, tax, mode);
    CAPTURE(to_string(mode));
    for (const auto& l : r.levels) {
      CHECK(l.accuracy == doctest::Approx(100.0));
      CHECK(l.mean_confidence == doctest::Approx(100.0));
    }
    CHECK(r.consistency == doctest::Approx(100.0));
  }

  // Uniform lifting dilutes the coarse vote: mean puts (1 + 1/2)/2 on the true fine label.
  const auto mean = evaluate_predictions(ps, ds.level_labels, tax, CombineMode::mean);
  CHECK(mean.levels.back().accuracy == doctest::Approx(100.0));
  CHECK(mean.levels.back().mean_confidence == doctest::Approx(75.0));
  // A lifted coarse vote goes to the lowest-index child, so majority only ties with the fine vote.
  const auto maj = evaluate_predictions(ps, ds.level_labels, tax, CombineMode::majority);
  CHECK(maj.levels.back().accuracy < 100.0);
}

TEST_CASE("metrics from a live model agree with stored predictions") {
  auto train = quadrant_dataset(300, 1);
  auto val = quadrant_dataset(100, 2);
  const auto tax = quadrant_taxonomy();
  const auto pds = partition_dataset(train, std::vector<int>{100, 100}, 3);
  Model model(quadrant_spec());
  TrainConfig tc;
  tc.alphas = {1, 1};
  tc.learning_rates = {5e-3, 5e-3};
  tc.max_epochs = 3;
  tc.batch_size = 32;
  train_cascaded(model, train, pds, val, tc);
  const auto cal = fit_calibration(model, val);

  const auto live = evaluate(model, val, tax, cal, CombineMode::nested);
  const auto stored = PredictionSet::from_json(predict(model, val, tax, cal).to_json());
  const auto offline = evaluate_predictions(stored, val.level_labels, tax, CombineMode::nested);
  for (int l = 0; l < 2; ++l) {
    CHECK(live.levels[l].accuracy == doctest::Approx(offline.levels[l].accuracy));
    CHECK(live.levels[l].mean_confidence == doctest::Approx(offline.levels[l].mean_confidence));
  }
  CHECK(live.consistency == doctest::Approx(100.0));

  // Sample order does not matter.
  std::vector<int> rev(val.size());
  for (int k = 0; k < val.size(); ++k) rev[k] = val.size() - 1 - k;
  const auto flipped = evaluate(model, val.subset(rev), tax, cal, CombineMode::none);
  const auto plain = evaluate(model, val, tax, cal, CombineMode::none);
  for (int l = 0; l < 2; ++l) CHECK(flipped.levels[l].accuracy == doctest::Approx(plain.levels[l].accuracy));

  // A single-head model reports coarse levels through its fine argmax.
  Model e2e(quadrant_spec(Variant::end_to_end));
  const auto pds2 = partition_dataset(train, std::vector<int>{0, 200}, 3);
  train_cascaded(e2e, train, pds2, val, tc);
  const auto r = evaluate(e2e, val, tax, CalibrationState::identity(1), CombineMode::none);
  CHECK(r.levels.size() == 2);
  CHECK(r.levels[0].accuracy >= r.levels[1].accuracy);
}

TEST_CASE("reports") {
  EvalReport a;
  a.run = "r1";
  a.variant = "nested";
  a.seed = 3;
  a.partition_sizes = {10, 10};
  a.conditions.push_back({"original", 10, {{90.0, 88.0, 1.0}, {80.0, 75.5, 2.0}}, 100.0, 0});
  EvalReport b = a;
  b.variant = "end_to_end";
  CHECK(count_lines(report_table({a})) == 3);
  const auto table = report_table({a, b});
  CHECK(table.find("end_to_end") < table.find("nested"));
  CHECK(table.find("80.0 / 75.5") != std::string::npos);
  const auto back = EvalReport::from_json(a.to_json());
  CHECK(back.to_json() == a.to_json());
  CHECK(back.condition("original").levels[1].mean_confidence == 75.5);
  CHECK_THROWS(back.condition("missing"));
}
