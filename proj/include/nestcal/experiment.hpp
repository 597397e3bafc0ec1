#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nestcal/analysis.hpp"
#include "nestcal/calibration.hpp"
#include "nestcal/combine.hpp"
#include "nestcal/data.hpp"
#include "nestcal/metrics.hpp"
#include "nestcal/model.hpp"
#include "nestcal/perturb.hpp"
#include "nestcal/taxonomy.hpp"
#include "nestcal/training.hpp"

namespace nestcal {

inline constexpr int kSchemaVersion = 1;

struct NamedDistortion {
  std::string name;
  DistortionParams params;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string name = "experiment";
  std::uint64_t seed = 0;  // base seed; the sub-seeds below derive from it unless given

  std::string dataset = "mnist";
  std::filesystem::path data_root;
  int validation_size = 5000;
  std::uint64_t validation_seed = 0;
  int test_limit = 0;  // 0 = whole test split

  nlohmann::json taxonomy;  // embedded taxonomy document
  std::vector<int> partition_sizes;
  std::uint64_t partition_seed = 0;
  bool stratified = false;

  NestedModelSpec spec;  // after overrides; arities follow the taxonomy

  std::string training_mode = "cascaded";
  TrainConfig train;

  bool calibrate = true;
  bool rejection = true;
  RejectionConfig rejection_cfg;
  TemperatureGrid grid;
  int bins = 15;

  std::vector<NamedDistortion> distortions;
  std::uint64_t distortion_seed = 0;
  CombineMode combine = CombineMode::none;
  std::vector<CombineMode> extra_combine;

  bool attack = false;
  int attack_limit = 1000;
  AttackConfig attack_cfg = AttackConfig::default_grid();
  bool survival = false;
  AttackConfig survival_cfg = AttackConfig::default_grid();

  bool mi = false;
  int mi_samples = 2000;
  MineConfig mine;

  std::filesystem::path output = "runs";

  /// Parses a config. Relative paths resolve against `base_dir` first, then the
  /// source tree. Taxonomy and model spec files are read and embedded.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
  /// Fully resolved form, persisted as <run>/config.json.
  nlohmann::json to_json() const;
  void validate() const;
  /// FNV-1a over the resolved config without data root and output directory.
  std::string hash() const;
  Taxonomy load_taxonomy() const { return Taxonomy::from_json(taxonomy); }
  /// Re-derives every sub-seed from `seed`.
  void derive_seeds();
};

/// Applies --seed, --data-root / NESTCAL_DATA_ROOT and --out.
void apply_overrides(ExperimentConfig& cfg, std::optional<std::uint64_t> seed,
                     const std::optional<std::filesystem::path>& data_root,
                     const std::optional<std::filesystem::path>& out);

struct RunOptions {
  bool dry_run = false;
  bool resume = false;
  bool force = false;  // overwrite an existing run directory
  bool plots = true;
};

struct RunOutcome {
  std::filesystem::path dir;
  std::vector<std::string> plan;
  bool trained = false;  // false when a checkpoint was reused
  std::vector<EvalReport> reports;
};

std::filesystem::path run_directory(const ExperimentConfig& cfg);

/// load -> partition -> build -> train -> calibrate -> evaluate -> attack -> mi -> plots.
/// Failures are rethrown as StageError naming the stage.
RunOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// Pieces of a finished run, for the subcommands.
struct RunContext {
  ExperimentConfig config;
  Taxonomy taxonomy;
  Dataset train, validation, test;  // relabeled
  PartitionedDataset partition;
};
RunContext load_run_context(const std::filesystem::path& run_dir);
Model load_run_model(const std::filesystem::path& run_dir, bool calibrated = true);
CalibrationState load_run_calibration(const std::filesystem::path& run_dir, int levels);

/// Resolves a path against the working directory, then the source tree.
std::filesystem::path resolve_resource(const std::filesystem::path& p, const std::filesystem::path& base_dir = {});

/// Accuracy-vs-epoch curves and MI traces as SVG files under <run>/plots.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& run_dir);

struct Series {
  std::string label;
  std::vector<double> x, y;
};
void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<Series>& series,
                     const std::vector<double>& markers = {});

std::uint64_t fnv1a64(const std::string& text);

}  // namespace nestcal
