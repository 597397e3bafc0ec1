#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "nestcal/taxonomy.hpp"

namespace nestcal {

/// Calibrated distribution over one level's alphabet (rejection dropped).
struct LevelPrediction {
  int level = 0;
  std::vector<double> probabilities;
  double rejection_mass = 0;

  void validate(const Taxonomy& tax) const;
};

struct Conditionals {
  std::vector<double> values;       // P(q | parent(q)) per label of the finer level
  std::vector<int> uniform_groups;  // parents whose children carried zero mass
  bool flagged() const { return !uniform_groups.empty(); }
};

/// P(q | k_q) = P(q) / sum of P over the children of k_q at `parent_level`
/// (default: the next coarser level). Zero-mass groups become uniform.
Conditionals conditional_renormalize(const LevelPrediction& fine, const Taxonomy& tax, int parent_level = -1);

struct CombinedPrediction {
  std::vector<double> refined;       // over the fine alphabet
  std::vector<int> per_level_argmax;
  std::vector<double> per_level_confidence;  // refined mass of each chosen label
  bool flagged = false;              // a uniform fallback was used somewhere
};

/// Sums fine mass within each group of `target_level`.
LevelPrediction project_fine_to_coarse(const LevelPrediction& fine, const Taxonomy& tax, int target_level);

/// Spreads each coarse mass uniformly over its fine descendants.
LevelPrediction lift_coarse_to_fine(const LevelPrediction& coarse, const Taxonomy& tax);

/// Recursive product over all levels: refined(q) = P_0(k_0) prod_i P(k_i | k_{i-1}).
/// The fine argmax fixes the label chain; coarser labels are its ancestors.
CombinedPrediction combine_nested(std::span<const LevelPrediction> preds, const Taxonomy& tax);

/// The same product over an ascending subset of levels that ends at the fine
/// level (e.g. {0, fine} for the coarse-and-fine combination).
CombinedPrediction combine_chain(std::span<const LevelPrediction> preds, const Taxonomy& tax);

CombinedPrediction combine_mean(std::span<const LevelPrediction> preds, const Taxonomy& tax);
CombinedPrediction combine_product(std::span<const LevelPrediction> preds, const Taxonomy& tax);
/// Each level votes for the argmax of its lifted prediction (lowest index on ties).
CombinedPrediction combine_majority(std::span<const LevelPrediction> preds, const Taxonomy& tax);

/// Builds the chain/confidence fields from a fine distribution.
CombinedPrediction finish_combination(std::vector<double> refined, const Taxonomy& tax, bool flagged);

enum class CombineMode { none, nested, mean, product, majority, coarse_fine };
std::string to_string(CombineMode m);
CombineMode combine_mode_from_string(const std::string& s);

/// Stored per-level outputs for a dataset: probabilities[l] is |Y_l| x N.
struct PredictionSet {
  std::vector<int> levels;  // taxonomy level of each entry
  std::vector<Eigen::MatrixXd> probabilities;
  std::vector<Eigen::VectorXd> rejection;

  int size() const { return probabilities.empty() ? 0 : static_cast<int>(probabilities.front().cols()); }
  std::vector<LevelPrediction> sample(int k) const;

  nlohmann::json to_json() const;
  static PredictionSet from_json(const nlohmann::json& j);
};

}  // namespace nestcal
