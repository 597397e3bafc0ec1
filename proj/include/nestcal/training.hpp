#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "nestcal/data.hpp"
#include "nestcal/loss.hpp"
#include "nestcal/model.hpp"

namespace nestcal {

struct TrainConfig {
  std::vector<double> alphas{1.0, 1.0, 1.0};
  std::vector<double> learning_rates{2e-3, 1e-3, 5e-4};  // per cascade step
  double traditional_rate = 1e-3;
  int batch_size = 128;
  int patience = 5;
  double min_delta = 1e-3;
  int max_epochs = 100;
  std::uint64_t seed = 0;
  bool freeze_coarse = false;  // cascade step i trains only group i

  void validate(int levels) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  int step = 0;       // cascade step (0 for traditional training)
  int epoch = 0;      // 0 = validation before the first update
  std::optional<double> train_loss;  // mean per-sample batch loss
  double val_loss = 0;
  std::vector<std::optional<double>> val_accuracy;  // per model level, percent
  double seconds = 0;
};

struct TrainHistory {
  std::string mode;  // "cascaded" or "traditional"
  std::vector<EpochRecord> records;
  std::vector<int> best_epoch;               // per step
  std::vector<double> first_batch_loss;      // per step, total batch loss of epoch 1 batch 1
  std::vector<double> alphas;                // weights actually used

  std::vector<EpochRecord> step_records(int step) const;
  void write_jsonl(const std::filesystem::path& path) const;
  static TrainHistory read_jsonl(const std::filesystem::path& path);
};

struct BatchInfo {
  int step = 0, epoch = 0, batch = 0;
  int max_level = 0;
  const std::vector<int>* indices = nullptr;               // into the training dataset
  const std::vector<std::vector<int>>* labels = nullptr;   // per model level, -1 = masked
  std::span<const double> alphas;
};

struct TrainHooks {
  /// Called before the forward pass of every batch.
  std::function<void(const BatchInfo&, Model&)> on_batch;
  /// Called after each cascade step with the restored best weights.
  std::function<void(int step, Model&)> on_step_end;
};

/// Cascaded optimization: step i trains groups <= i (or only i with
/// freeze_coarse) on sum_{j<=i} alpha_j L_j, where L_j uses every sample
/// annotated to level >= j. Early stopping per step restores the best weights.
/// `train` and `validation` must carry per-level labels (see relabel).
TrainHistory train_cascaded(Model& model, const Dataset& train, const PartitionedDataset& pds,
                            const Dataset& validation, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Single-phase training on uniformly shuffled mixed-annotation batches, with
/// alpha_i inversely proportional to the number of level-i annotations.
TrainHistory train_traditional(Model& model, const Dataset& train, const PartitionedDataset& pds,
                               const Dataset& validation, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// alpha_i proportional to 1 / count_i, scaled to mean 1.
std::vector<double> inverse_count_alphas(std::span<const int> counts);

}  // namespace nestcal
