#include "nestcal/combine.hpp"

#include <cmath>
#include <numeric>

#include "nestcal/error.hpp"

namespace nestcal {

namespace {

int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

bool normalize(std::vector<double>& v) {
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  if (!(s > 0) || !std::isfinite(s)) {
    std::fill(v.begin(), v.end(), 1.0 / static_cast<double>(v.size()));
    return false;
  }
  for (double& x : v) x /= s;
  return true;
}

std::vector<double> lifted(const LevelPrediction& p, const Taxonomy& tax) {
  return p.level == tax.fine_level() ? p.probabilities : lift_coarse_to_fine(p, tax).probabilities;
}

void require_all_levels(std::span<const LevelPrediction> preds, const Taxonomy& tax) {
  if (static_cast<int>(preds.size()) != tax.levels()) {
    throw ValidationError("combine: expected one prediction per level (" + std::to_string(tax.levels()) + "), got " +
                          std::to_string(preds.size()));
  }
  for (int l = 0; l < tax.levels(); ++l) {
    if (preds[l].level != l) throw ValidationError("combine: missing prediction for level " + std::to_string(l));
    preds[l].validate(tax);
  }
}

}  // namespace

void LevelPrediction::validate(const Taxonomy& tax) const {
  if (level < 0 || level >= tax.levels()) throw ValidationError("prediction: level out of range");
  if (static_cast<int>(probabilities.size()) != tax.alphabet_size(level)) {
    throw ValidationError("prediction: wrong alphabet size at level " + std::to_string(level));
  }
  double s = 0;
  for (double p : probabilities) {
    if (!(p >= 0)) throw ValidationError("prediction: negative or NaN probability");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ValidationError("prediction: probabilities sum to " + std::to_string(s));
}

Conditionals conditional_renormalize(const LevelPrediction& fine, const Taxonomy& tax, int parent_level) {
  if (fine.level < 1 || fine.level >= tax.levels()) {
    throw ValidationError("conditional_renormalize: needs a level with a coarser parent");
  }
  if (parent_level < 0) parent_level = fine.level - 1;
  if (parent_level >= fine.level) throw ValidationError("conditional_renormalize: parent level must be coarser");
  const int n = tax.alphabet_size(fine.level);
  if (static_cast<int>(fine.probabilities.size()) != n) throw ValidationError("conditional_renormalize: size mismatch");
  std::vector<double> mass(tax.alphabet_size(parent_level), 0.0);
  std::vector<int> size(mass.size(), 0);
  std::vector<int> anc(n);
  for (int q = 0; q < n; ++q) {
    anc[q] = tax.coarsen(q, fine.level, parent_level);
    mass[anc[q]] += fine.probabilities[q];
    ++size[anc[q]];
  }
  Conditionals c;
  c.values.resize(n);
  for (std::size_t k = 0; k < mass.size(); ++k)
    if (!(mass[k] > 0)) c.uniform_groups.push_back(static_cast<int>(k));
  for (int q = 0; q < n; ++q) {
    const int k = anc[q];
    c.values[q] = mass[k] > 0 ? fine.probabilities[q] / mass[k] : 1.0 / size[k];
  }
  return c;
}

LevelPrediction project_fine_to_coarse(const LevelPrediction& fine, const Taxonomy& tax, int target_level) {
  if (target_level < 0 || target_level > fine.level) throw ValidationError("project: target must be coarser");
  LevelPrediction out;
  out.level = target_level;
  out.rejection_mass = fine.rejection_mass;
  out.probabilities.assign(tax.alphabet_size(target_level), 0.0);
  for (int q = 0; q < static_cast<int>(fine.probabilities.size()); ++q) {
    out.probabilities[tax.coarsen(q, fine.level, target_level)] += fine.probabilities[q];
  }
  return out;
}

LevelPrediction lift_coarse_to_fine(const LevelPrediction& coarse, const Taxonomy& tax) {
  const int fine = tax.fine_level();
  const auto anc = tax.fine_to_level(coarse.level);
  std::vector<int> size(tax.alphabet_size(coarse.level), 0);
  for (int a : anc) ++size[a];
  LevelPrediction out;
  out.level = fine;
  out.rejection_mass = coarse.rejection_mass;
  out.probabilities.resize(anc.size());
  for (std::size_t q = 0; q < anc.size(); ++q) out.probabilities[q] = coarse.probabilities.at(anc[q]) / size[anc[q]];
  return out;
}

CombinedPrediction finish_combination(std::vector<double> refined, const Taxonomy& tax, bool flagged) {
  CombinedPrediction c;
  c.flagged = flagged;
  const int fine = tax.fine_level();
  const int q = argmax_lowest(refined);
  LevelPrediction lp{fine, refined, 0.0};
  c.per_level_argmax.resize(tax.levels());
  c.per_level_confidence.resize(tax.levels());
  for (int l = 0; l < tax.levels(); ++l) {
    const int label = tax.coarsen(q, fine, l);
    c.per_level_argmax[l] = label;
    c.per_level_confidence[l] = l == fine ? refined[q] : project_fine_to_coarse(lp, tax, l).probabilities[label];
  }
  c.refined = std::move(refined);
  return c;
}

CombinedPrediction combine_chain(std::span<const LevelPrediction> preds, const Taxonomy& tax) {
  if (preds.empty()) throw ValidationError("combine: no predictions");
  if (preds.back().level != tax.fine_level()) throw ValidationError("combine: the chain must end at the fine level");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    preds[i].validate(tax);
    if (i > 0 && preds[i].level <= preds[i - 1].level) throw ValidationError("combine: levels must be ascending");
  }
  bool flagged = false;
  std::vector<double> cur = preds[0].probabilities;
  for (std::size_t i = 1; i < preds.size(); ++i) {
    const int parent = preds[i - 1].level;
    const auto cond = conditional_renormalize(preds[i], tax, parent);
    flagged |= cond.flagged();
    std::vector<double> next(cond.values.size());
    for (std::size_t q = 0; q < next.size(); ++q) {
      next[q] = cond.values[q] * cur[tax.coarsen(static_cast<int>(q), preds[i].level, parent)];
    }
    cur = std::move(next);
  }
  flagged |= !normalize(cur);
  return finish_combination(std::move(cur), tax, flagged);
}

CombinedPrediction combine_nested(std::span<const LevelPrediction> preds, const Taxonomy& tax) {
  require_all_levels(preds, tax);
  return combine_chain(preds, tax);
}

CombinedPrediction combine_mean(std::span<const LevelPrediction> preds, const Taxonomy& tax) {
  require_all_levels(preds, tax);
  std::vector<double> acc(tax.alphabet_size(tax.fine_level()), 0.0);
  for (const auto& p : preds) {
    const auto v = lifted(p, tax);
    for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += v[q] / static_cast<double>(preds.size());
  }
  const bool ok = normalize(acc);
  return finish_combination(std::move(acc), tax, !ok);
}

CombinedPrediction combine_product(std::span<const LevelPrediction> preds, const Taxonomy& tax) {
  require_all_levels(preds, tax);
  std::vector<double> acc(tax.alphabet_size(tax.fine_level()), 1.0);
  for (const auto& p : preds) {
    const auto v = lifted(p, tax);
    for (std::size_t q = 0; q < acc.size(); ++q) acc[q] *= v[q];
  }
  const bool ok = normalize(acc);
  return finish_combination(std::move(acc), tax, !ok);
}

CombinedPrediction combine_majority(std::span<const LevelPrediction> preds, const Taxonomy& tax) {
  require_all_levels(preds, tax);
  std::vector<double> votes(tax.alphabet_size(tax.fine_level()), 0.0);
  for (const auto& p : preds) votes[argmax_lowest(lifted(p, tax))] += 1.0;
  normalize(votes);
  return finish_combination(std::move(votes), tax, false);
}

std::string to_string(CombineMode m) {
  switch (m) {
    case CombineMode::none: return "none";
    case CombineMode::nested: return "nested";
    case CombineMode::mean: return "mean";
    case CombineMode::product: return "product";
    case CombineMode::majority: return "majority";
    case CombineMode::coarse_fine: return "coarse_fine";
  }
  return "?";
}

CombineMode combine_mode_from_string(const std::string& s) {
  for (auto m : {CombineMode::none, CombineMode::nested, CombineMode::mean, CombineMode::product, CombineMode::majority,
                 CombineMode::coarse_fine}) {
    if (to_string(m) == s) return m;
  }
  throw ValidationError("unknown combine mode '" + s + "'");
}

std::vector<LevelPrediction> PredictionSet::sample(int k) const {
  std::vector<LevelPrediction> out;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto col = probabilities[i].col(k);
    out.push_back({levels[i], std::vector<double>(col.data(), col.data() + col.size()),
                   rejection.empty() ? 0.0 : rejection[i](k)});
  }
  return out;
}

nlohmann::json PredictionSet::to_json() const {
  nlohmann::json preds, rej;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index k = 0; k < probabilities[i].cols(); ++k) {
      const auto col = probabilities[i].col(k);
      rows.push_back(std::vector<double>(col.data(), col.data() + col.size()));
    }
    preds[std::to_string(levels[i])] = std::move(rows);
    if (!rejection.empty()) {
      rej[std::to_string(levels[i])] = std::vector<double>(rejection[i].data(), rejection[i].data() + rejection[i].size());
    }
  }
  nlohmann::json j{{"levels", levels}, {"predictions", preds}};
  if (!rejection.empty()) j["rejection"] = rej;
  return j;
}

PredictionSet PredictionSet::from_json(const nlohmann::json& j) {
  PredictionSet s;
  s.levels = j.at("levels").get<std::vector<int>>();
  for (int l : s.levels) {
    const auto rows = j.at("predictions").at(std::to_string(l)).get<std::vector<std::vector<double>>>();
    const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index a = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
    Eigen::MatrixXd m(a, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      if (static_cast<Eigen::Index>(rows[k].size()) != a) throw ValidationError("prediction json: ragged rows");
      for (Eigen::Index r = 0; r < a; ++r) m(r, k) = rows[k][r];
    }
    s.probabilities.push_back(std::move(m));
    if (j.contains("rejection")) {
      const auto v = j.at("rejection").at(std::to_string(l)).get<std::vector<double>>();
      s.rejection.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
  }
  return s;
}

}  // namespace nestcal
