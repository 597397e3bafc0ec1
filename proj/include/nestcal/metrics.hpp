#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nestcal/calibration.hpp"
#include "nestcal/combine.hpp"
#include "nestcal/data.hpp"
#include "nestcal/model.hpp"
#include "nestcal/taxonomy.hpp"

namespace nestcal {

struct LevelMetrics {
  double accuracy = 0;         // percent
  double mean_confidence = 0;  // percent
  double rejection_rate = 0;   // mean dropped rejection mass, percent (heads only)
};

struct ConditionReport {
  std::string condition;  // "original", "distortion1", ...
  int samples = 0;
  std::vector<LevelMetrics> levels;  // per taxonomy level
  double consistency = 100;          // percent of samples with a valid label chain
  int flagged = 0;                   // combinations that hit a uniform fallback
};

struct EvalReport {
  std::string run;
  std::string variant;
  std::string combine_mode = "none";
  std::uint64_t seed = 0;
  std::vector<int> partition_sizes;
  std::vector<ConditionReport> conditions;

  const ConditionReport& condition(const std::string& name) const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Calibrated per-head outputs, tagged with taxonomy levels.
PredictionSet predict(Model& model, const Dataset& ds, const Taxonomy& tax, const CalibrationState& cal);

/// Metrics from stored predictions. `labels[l]` are the level-l ground truths.
ConditionReport evaluate_predictions(const PredictionSet& preds, const std::vector<std::vector<int>>& labels,
                                     const Taxonomy& tax, CombineMode mode, const std::string& condition = "original");

/// predict() followed by evaluate_predictions(). `ds` must be relabeled with `tax`.
ConditionReport evaluate(Model& model, const Dataset& ds, const Taxonomy& tax, const CalibrationState& cal,
                         CombineMode mode, const std::string& condition = "original");

/// Aligned "Acc / Conf" grid, one row per report ordered by variant name.
std::string report_table(std::vector<EvalReport> reports);
nlohmann::json reports_to_json(const std::vector<EvalReport>& reports);

}  // namespace nestcal
