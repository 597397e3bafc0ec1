#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "nestcal/data.hpp"
#include "nestcal/model.hpp"

namespace nestcal {

/// Surface measure of the unit sphere in R^s: 2 pi^{s/2} / Gamma(s/2).
double hypersphere_area(int s);

/// n points uniform on the unit sphere in R^s, one per column.
Eigen::MatrixXd sample_rejection(int s, int n, std::uint64_t seed);

struct RejectionConfig {
  double density_constant = 1.0;  // c in n_i = round(c |D_i| S(s_i) / S(2))
  double cap_factor = 4.0;        // n_i <= cap_factor * |D_i|
  double finetune_rate = 1e-3;
  int epochs = 10;
  int batch_size = 128;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static RejectionConfig from_json(const nlohmann::json& j);
};

/// Number of synthetic rejection samples for a level with `count` training
/// features of width `s`.
int rejection_count(const RejectionConfig& rc, int count, int s);

struct RejectionReport {
  std::vector<int> real_counts;       // |D_i|
  std::vector<int> synthetic_counts;  // n_i
  std::vector<double> argmax_kept;    // fraction of real features whose class argmax is unchanged
};

/// Fine-tunes each head on its level's training features plus synthetic
/// sphere samples labeled with the rejection slot. Only head parameters move.
RejectionReport fit_rejection_class(Model& model, const Dataset& train, const PartitionedDataset& pds,
                                    const RejectionConfig& rc);

/// Expected calibration error over equal-width bins on [0, 1].
double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, int n_bins = 15);

/// softmax(scores / T). Throws for T <= 0.
std::vector<double> apply_temperature(std::span<const double> scores, double temperature);

struct TemperatureGrid {
  int count = 50;
  double lo = 1.0, hi = 3.0;
  std::vector<double> values() const;
  /// Parses "count:lo:hi".
  static TemperatureGrid parse(const std::string& text);
};

struct TemperatureFit {
  double temperature = 1;
  double ece_before = 0;  // at T = 1
  double ece_after = 0;
  std::vector<double> ece_by_grid;
};

/// Chooses T on the grid minimizing ECE of softmax(real scores / T); the
/// smallest T wins ties. `scores` is (arity + 1) x N, the last row rejection.
TemperatureFit fit_temperature(const Eigen::MatrixXd& scores, std::span<const int> labels,
                               const TemperatureGrid& grid = {}, int n_bins = 15);

struct CalibrationState {
  std::vector<double> temperatures;
  std::vector<double> ece_before, ece_after;
  int bins = 15;
  RejectionReport rejection;

  std::vector<double> bin_edges() const;
  void validate() const;
  nlohmann::json to_json() const;
  static CalibrationState from_json(const nlohmann::json& j);
  static CalibrationState identity(int levels);
};

/// Temperature fits on a held-out set, one per model head.
CalibrationState fit_calibration(Model& model, const Dataset& validation, const TemperatureGrid& grid = {},
                                 int n_bins = 15);

/// Calibrated class probabilities for one head: the rejection slot is dropped
/// after temperature scaling and the rest renormalized. `rejection` receives the
/// dropped mass per sample if non-null.
Eigen::MatrixXd calibrated_probabilities(const Matrix& scores, double temperature, Eigen::VectorXd* rejection = nullptr);

}  // namespace nestcal
