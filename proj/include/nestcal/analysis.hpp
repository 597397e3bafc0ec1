#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "nestcal/data.hpp"
#include "nestcal/model.hpp"

namespace nestcal {

struct MineConfig {
  std::vector<int> hidden{128, 128};
  int steps = 3000;
  double learning_rate = 1e-4;
  int batch_size = 512;
  double ema_decay = 0.99;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static MineConfig from_json(const nlohmann::json& j);
};

struct MineResult {
  double estimate = 0;        // nats, smoothed final objective clamped at 0
  std::vector<double> trace;  // raw per-step objective
  bool degenerate = false;    // constant input: estimate forced to 0
  bool clamped = false;
};

/// Donsker-Varadhan lower bound maximized by a ReLU critic on [x; z]. Samples
/// are columns; marginals come from shuffling z inside each batch.
MineResult mine_estimate(const Eigen::MatrixXd& x, const Eigen::MatrixXd& z, const MineConfig& cfg);

/// Feature taps pooled to `pool` x `pool` per channel; columns are samples.
std::map<std::string, Eigen::MatrixXd> collect_taps(Model& model, const Dataset& ds, int pool = 2, int chunk = 250);

struct MiReport {
  std::map<std::string, double> estimates;   // "<model>:I(F,G)" etc.
  std::map<std::string, std::vector<double>> traces;
  double delta1 = 0;  // I(F,G) - I(F,H) with skip connections
  double delta2 = 0;  // the same without
  double ratio() const { return delta1 != 0 ? delta2 / delta1 : 0.0; }

  nlohmann::json to_json() const;
};

/// Information gap between the decoder tap G and the encoder tap H, measured
/// against the shallow tap F, for a model with and one without skip connections.
MiReport skip_mi_gap(Model& with_skip, Model& without_skip, const Dataset& ds, const MineConfig& cfg, int pool = 2);

/// Tab-separated bottleneck features of `level` plus every per-level label.
void export_embeddings(Model& model, const Dataset& ds, int level, const std::filesystem::path& path);

}  // namespace nestcal
