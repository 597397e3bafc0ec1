#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nestcal/data.hpp"
#include "nestcal/model.hpp"

namespace nestcal {

struct DistortionParams {
  double S = 1.0;  // Gaussian filter sigma, pixels
  double T = 1.0;  // displacement standard deviation, pixels
  std::uint64_t seed = 0;

  void validate() const;
};

/// The four standard distortion levels (1-based index 1..4).
DistortionParams distortion_level(int level, std::uint64_t seed = 0);

struct DisplacementField {
  int height = 0, width = 0;
  std::vector<double> u, v;  // row-major; u displaces columns, v rows
};

/// Two smoothed noise fields rescaled to standard deviation exactly T
/// (zero fields when the filtered noise is constant).
DisplacementField make_displacement(int height, int width, double S, double T, std::uint64_t seed);

/// 1-D Gaussian smoothing with reflect boundary, applied along rows then columns.
std::vector<double> gaussian_filter(std::span<const double> field, int height, int width, double sigma);

/// Bilinear resampling at (x + u, y + v), clamped to the image; output clipped to [0, 1].
/// `image` is (channels, height, width); all channels share the field.
std::vector<float> warp_image(std::span<const float> image, int channels, const DisplacementField& field);

std::vector<float> turbulence_distort(std::span<const float> image, int channels, int height, int width,
                                      const DistortionParams& p);

/// Distorts every image of a dataset; image k uses a seed derived from (p.seed, k).
Dataset distort_dataset(const Dataset& ds, const DistortionParams& p);

struct AttackConfig {
  std::vector<double> epsilon_grid;
  int target_level = -1;  // model head attacked; -1 = finest
  double max_eps = 0.1;

  /// 50 log-spaced values in [1e-3, 1e-1].
  static AttackConfig default_grid();
  static std::vector<double> log_grid(int count, double lo, double hi);
  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

/// Gradient of the level's cross-entropy (real classes) with respect to the
/// input, evaluation mode.
Tensor input_gradient(Model& model, const Tensor& x, std::span<const int> labels, int level);

/// A perturbation method with the FGSM signature, so other attacks can be added.
class Attack {
 public:
  virtual ~Attack() = default;
  virtual std::string name() const = 0;
  virtual Tensor perturb(Model& model, const Tensor& x, std::span<const int> labels, double eps, int level) = 0;
};

class FgsmAttack : public Attack {
 public:
  std::string name() const override { return "fgsm"; }
  Tensor perturb(Model& model, const Tensor& x, std::span<const int> labels, double eps, int level) override;
};

/// clip(x + eps * sign(grad), 0, 1).
Tensor fgsm(Model& model, const Tensor& x, std::span<const int> labels, double eps, int level);
Tensor apply_sign_step(const Tensor& x, const Tensor& grad, double eps);

/// Per sample: 0 when already misclassified, the smallest grid epsilon whose
/// FGSM input changes the target-level argmax, or nullopt beyond max_eps.
std::vector<std::optional<double>> min_eps_to_flip(Model& model, const Tensor& x, std::span<const int> labels,
                                                   const AttackConfig& cfg);

/// Smallest grid epsilon at which the error rate (already-wrong samples
/// included) reaches `rate`; nullopt if never reached.
std::optional<double> eps_at_error_rate(std::span<const std::optional<double>> flips, std::span<const double> grid,
                                        double rate);

struct SurvivalReport {
  std::vector<double> accuracy;  // per taxonomy level, percent over flipped samples
  int flipped = 0;
  int never_flipped = 0;   // excluded
  int initially_wrong = 0; // excluded
};

/// Attacks the fine output of each initially-correct sample until it flips and
/// records the coarser predictions at that epsilon. Heads missing from the
/// model (end-to-end) are read off the coarsened fine argmax.
SurvivalReport coarse_survival_under_fine_attack(Model& model, const Dataset& ds, const Taxonomy& tax,
                                                 const AttackConfig& cfg, int chunk = 200);

}  // namespace nestcal
