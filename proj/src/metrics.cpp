#include "nestcal/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "nestcal/error.hpp"
#include "nestcal/inference.hpp"

namespace nestcal {

const ConditionReport& EvalReport::condition(const std::string& name) const {
  for (const auto& c : conditions)
    if (c.condition == name) return c;
  throw ValidationError("report has no condition '" + name + "'");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json conds = nlohmann::json::array();
  for (const auto& c : conditions) {
    nlohmann::json lv = nlohmann::json::array();
    for (const auto& m : c.levels) {
      lv.push_back({{"accuracy", m.accuracy}, {"mean_confidence", m.mean_confidence}, {"rejection_rate", m.rejection_rate}});
    }
    conds.push_back({{"condition", c.condition}, {"samples", c.samples}, {"levels", lv},
                     {"consistency", c.consistency}, {"flagged", c.flagged}});
  }
  return {{"run", run}, {"variant", variant}, {"combine_mode", combine_mode}, {"seed", seed},
          {"partition_sizes", partition_sizes}, {"conditions", conds}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.run = j.value("run", "");
  r.variant = j.at("variant");
  r.combine_mode = j.value("combine_mode", "none");
  r.seed = j.value("seed", std::uint64_t{0});
  r.partition_sizes = j.value("partition_sizes", std::vector<int>{});
  for (const auto& c : j.at("conditions")) {
    ConditionReport cr;
    cr.condition = c.at("condition");
    cr.samples = c.at("samples");
    cr.consistency = c.value("consistency", 100.0);
    cr.flagged = c.value("flagged", 0);
    for (const auto& m : c.at("levels")) {
      cr.levels.push_back({m.at("accuracy"), m.at("mean_confidence"), m.value("rejection_rate", 0.0)});
    }
    r.conditions.push_back(std::move(cr));
  }
  return r;
}

PredictionSet predict(Model& model, const Dataset& ds, const Taxonomy& tax, const CalibrationState& cal) {
  if (static_cast<int>(cal.temperatures.size()) != model.levels()) {
    throw ValidationError("calibration has " + std::to_string(cal.temperatures.size()) + " temperatures for " +
                          std::to_string(model.levels()) + " heads");
  }
  const auto map = model_level_map(model, tax.levels());
  const auto inf = run_inference(model, ds);
  PredictionSet p;
  for (int l = 0; l < model.levels(); ++l) {
    if (model.spec().arities[l] != tax.alphabet_size(map[l])) {
      throw ValidationError("head " + std::to_string(l) + " arity does not match taxonomy level " +
                            std::to_string(map[l]));
    }
    Eigen::VectorXd rej;
    p.levels.push_back(map[l]);
    p.probabilities.push_back(calibrated_probabilities(inf.scores[l], cal.temperatures[l], &rej));
    p.rejection.push_back(std::move(rej));
  }
  return p;
}

ConditionReport evaluate_predictions(const PredictionSet& preds, const std::vector<std::vector<int>>& labels,
                                     const Taxonomy& tax, CombineMode mode, const std::string& condition) {
  const int m = tax.levels();
  const int fine = tax.fine_level();
  if (static_cast<int>(labels.size()) != m) throw ValidationError("evaluate: labels must cover every taxonomy level");
  const bool full = static_cast<int>(preds.levels.size()) == m;
  const bool fine_only = preds.levels.size() == 1 && preds.levels[0] == fine;
  if (full) {
    for (int l = 0; l < m; ++l)
      if (preds.levels[l] != l) throw ValidationError("evaluate: prediction levels do not match the taxonomy");
  } else if (!fine_only) {
    throw ValidationError("evaluate: predictions must cover all levels or only the fine level");
  }
  const int n = preds.size();
  if (n == 0) throw ValidationError("evaluate: no samples");
  ConditionReport rep;
  rep.condition = condition;
  rep.samples = n;
  rep.levels.assign(m, {});
  std::vector<long long> correct(m, 0);
  std::vector<double> conf(m, 0.0);
  long long consistent = 0;

  for (int k = 0; k < n; ++k) {
    const auto s = preds.sample(k);
    std::vector<int> chosen(m);
    std::vector<double> c(m);
    if (fine_only || mode == CombineMode::none) {
      if (fine_only) {
        const auto r = finish_combination(s[0].probabilities, tax, false);
        chosen = r.per_level_argmax;
        c = r.per_level_confidence;
      } else {
        for (int l = 0; l < m; ++l) {
          const auto& p = s[l].probabilities;
          chosen[l] = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
          c[l] = p[chosen[l]];
        }
      }
    } else {
      CombinedPrediction r;
      switch (mode) {
        case CombineMode::nested: r = combine_nested(s, tax); break;
        case CombineMode::mean: r = combine_mean(s, tax); break;
        case CombineMode::product: r = combine_product(s, tax); break;
        case CombineMode::majority: r = combine_majority(s, tax); break;
        case CombineMode::coarse_fine: {
          const LevelPrediction pair[2] = {s[0], s[fine]};
          r = combine_chain(pair, tax);
          break;
        }
        default: break;
      }
      chosen = r.per_level_argmax;
      c = r.per_level_confidence;
      rep.flagged += r.flagged;
    }
    bool chain = true;
    for (int l = 1; l < m; ++l) chain &= tax.parent(l, chosen[l]) == chosen[l - 1];
    consistent += chain;
    for (int l = 0; l < m; ++l) {
      correct[l] += chosen[l] == labels[l][k];
      conf[l] += c[l];
    }
  }
  for (int l = 0; l < m; ++l) {
    rep.levels[l].accuracy = 100.0 * correct[l] / n;
    rep.levels[l].mean_confidence = 100.0 * conf[l] / n;
  }
  for (std::size_t i = 0; i < preds.levels.size() && !preds.rejection.empty(); ++i) {
    rep.levels[preds.levels[i]].rejection_rate = 100.0 * preds.rejection[i].mean();
  }
  rep.consistency = 100.0 * consistent / n;
  return rep;
}

ConditionReport evaluate(Model& model, const Dataset& ds, const Taxonomy& tax, const CalibrationState& cal,
                         CombineMode mode, const std::string& condition) {
  if (ds.levels() != tax.levels()) throw ValidationError("evaluate: dataset levels do not match the taxonomy");
  return evaluate_predictions(predict(model, ds, tax, cal), ds.level_labels, tax, mode, condition);
}

std::string report_table(std::vector<EvalReport> reports) {
  std::stable_sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.variant < b.variant; });
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"variant", "combine"};
  if (!reports.empty()) {
    for (const auto& c : reports.front().conditions)
      for (std::size_t l = 0; l < c.levels.size(); ++l) header.push_back(c.condition + " L" + std::to_string(l));
  }
  rows.push_back(header);
  char buf[64];
  for (const auto& r : reports) {
    std::vector<std::string> row{r.variant, r.combine_mode};
    for (const auto& c : r.conditions) {
      for (const auto& m : c.levels) {
        std::snprintf(buf, sizeof buf, "%.1f / %.1f", m.accuracy, m.mean_confidence);
        row.emplace_back(buf);
      }
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width;
  for (const auto& row : rows) {
    width.resize(std::max(width.size(), row.size()), 0);
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      out << (i ? "  " : "") << rows[r][i] << std::string(width[i] - rows[r][i].size(), ' ');
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < width.size(); ++i) total += width[i] + (i ? 2 : 0);
      out << std::string(total, '-') << '\n';
    }
  }
  return out.str();
}

nlohmann::json reports_to_json(const std::vector<EvalReport>& reports) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(r.to_json());
  return j;
}

}  // namespace nestcal
