#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nestcal/nn/layers.hpp"
#include "nestcal/tensor.hpp"

namespace nestcal {

enum class Variant { nested, end_to_end, mtl, nested_no_skip };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

/// Architecture contract. Level i's head predicts arities[i] classes plus one
/// rejection slot.
///
/// nested / nested_no_skip: encoder stages (conv blocks, 2x2 max-pool between
/// stages), then one decoder stage per finer level that upsamples, optionally
/// concatenates the encoder features of matching resolution, and applies conv
/// blocks. Head 0 reads the deepest encoder stage, head i the i-th decoder stage.
/// Heads are linear, or fc + ReLU + fc when head_hidden > 0.
/// end_to_end: the same trunk with a single head after the last decoder stage.
/// mtl: encoder with a pool after every stage, one shared bottleneck, and a
/// two-layer branch per level.
struct NestedModelSpec {
  Variant variant = Variant::nested;
  int channels = 1, height = 28, width = 28;
  std::vector<int> arities{2, 4, 10};
  std::vector<int> encoder_widths{8, 16, 32};
  std::vector<int> decoder_widths{32, 16};
  int convs_per_stage = 2;
  int kernel = 3;
  int head_hidden = 0;
  int mtl_hidden = 32;
  std::uint64_t init_seed = 1;

  int levels() const { return static_cast<int>(arities.size()); }
  bool use_skip() const { return variant == Variant::nested || variant == Variant::end_to_end; }
  /// Bottleneck width s_i per level.
  std::vector<int> bottleneck_widths() const;
  void validate() const;

  nlohmann::json to_json() const;
  static NestedModelSpec from_json(const nlohmann::json& j);
  bool operator==(const NestedModelSpec& o) const { return to_json() == o.to_json(); }

  /// Reads the bundled defaults (configs/models/<dataset>.json layout).
  static NestedModelSpec load(const std::filesystem::path& path);
};

struct ForwardResult {
  std::vector<Matrix> scores;       // level -> (arity + 1) x batch
  std::vector<Matrix> bottlenecks;  // level -> s_i x batch, unit columns
  std::map<std::string, Tensor> taps;  // "F", "G", "H" when requested
};

class Model {
 public:
  explicit Model(NestedModelSpec spec);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  const NestedModelSpec& spec() const { return spec_; }
  int levels() const { return spec_.levels(); }

  /// Runs the graph up to head `max_level` (-1 = all heads).
  ForwardResult forward(const Tensor& x, nn::Mode mode, int max_level = -1, bool keep_taps = false);
  /// Back-propagates per-level score gradients of the last forward. Entries
  /// may be empty (no loss on that level). Returns dL/dx when requested.
  Tensor backward(const std::vector<Matrix>& score_grads, bool need_input_grad = false);

  /// Head-only evaluation from stored bottleneck features.
  Matrix head_forward(int level, const Matrix& bottleneck);
  void head_backward(int level, const Matrix& score_grad);

  std::vector<nn::Parameter*> parameters();
  /// Trunk and head parameters reached by outputs 0..level.
  std::vector<nn::Parameter*> parameters_up_to(int level);
  /// Parameters whose group is exactly `level`.
  std::vector<nn::Parameter*> parameters_at(int level);
  std::vector<nn::Parameter*> head_parameters(int level);
  std::vector<nn::Buffer> buffers();

  long long count_parameters();

  bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }

  void save(const std::filesystem::path& path);
  /// Loads a checkpoint; throws ValidationError if `expected` differs from the stored spec.
  static Model load(const std::filesystem::path& path, const NestedModelSpec* expected = nullptr);

  /// Snapshot of every parameter and buffer value (for early-stopping restore).
  struct State {
    std::vector<Matrix> values;
  };
  State state();
  void restore(const State& s);

 private:
  struct Impl;
  NestedModelSpec spec_;
  std::unique_ptr<Impl> impl_;
  bool trained_ = false;
};

Model build_model(const NestedModelSpec& spec);

/// Parameter count of a fully connected map in -> out with bias.
constexpr long long linear_parameter_count(long long in, long long out) { return in * out + out; }

}  // namespace nestcal
