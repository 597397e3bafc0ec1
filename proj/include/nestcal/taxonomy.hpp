#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace nestcal {

/// A strictly-nested label hierarchy. Level 0 is the coarsest; level
/// `levels() - 1` is the fine alphabet. Every label at level l > 0 has exactly
/// one parent at level l - 1 and every label at level l < m - 1 has at least
/// one child.
class Taxonomy {
 public:
  Taxonomy(std::vector<int> alphabet_sizes, std::vector<std::vector<int>> parents,
           std::vector<std::vector<std::string>> names = {});

  /// One-level taxonomy over `classes` labels.
  static Taxonomy flat(int classes);

  int levels() const { return static_cast<int>(sizes_.size()); }
  int fine_level() const { return levels() - 1; }
  int alphabet_size(int level) const;
  const std::vector<int>& alphabet_sizes() const { return sizes_; }
  int parent(int level, int label) const;
  const std::vector<int>& parents(int level) const { return parents_.at(level); }
  std::vector<int> children(int level, int label) const;
  const std::string& name(int level, int label) const;

  /// Ancestor of `label` (which lives at `from_level`) at `to_level` <= from_level.
  int coarsen(int label, int from_level, int to_level) const;
  int coarsen_fine(int fine_label, int to_level) const { return coarsen(fine_label, fine_level(), to_level); }
  /// Fine label -> ancestor at `level`, for every fine label.
  std::vector<int> fine_to_level(int level) const;

  nlohmann::json to_json() const;
  static Taxonomy from_json(const nlohmann::json& j);
  static Taxonomy load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  bool operator==(const Taxonomy& o) const {
    return sizes_ == o.sizes_ && parents_ == o.parents_ && names_ == o.names_;
  }

 private:
  void validate() const;
  std::vector<int> sizes_;
  std::vector<std::vector<int>> parents_;
  std::vector<std::vector<std::string>> names_;
};

struct LabelDistribution {
  int level = 0;
  std::vector<double> probabilities;

  /// Throws ValidationError unless entries are >= 0 and sum to 1 within 1e-9.
  void validate() const;
};

/// Shannon entropy in bits, with 0 log 0 = 0.
double entropy(const LabelDistribution& dist);

/// H(rows | columns) in bits for a joint probability table. Throws unless the
/// table is non-negative and sums to 1 within 1e-9.
double conditional_entropy(const Eigen::MatrixXd& joint);

struct LevelNestedness {
  int level = 0;                     // level i >= 1
  double entropy = 0;                // H(Y_i)
  double conditional_entropy = 0;    // H(Y_i | Y_{i-1})
  bool strict = false;               // conditional < entropy
};

/// Empirical strict-nestedness check from per-fine-label counts.
std::vector<LevelNestedness> check_strict_nestedness(const Taxonomy& tax, std::span<const double> fine_counts);

/// Class-confusion counts: rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  Eigen::MatrixXd counts;

  explicit ConfusionMatrix(Eigen::MatrixXd m);
  int classes() const { return static_cast<int>(counts.rows()); }
};

/// Sum of (M + M^T) entries whose row and column fall in different groups.
/// `group_of[label]` assigns each label a group id.
double offdiag_block_mass(const ConfusionMatrix& m, std::span<const int> group_of);

enum class RemainderPolicy {
  reject,  // uneven splits are an error
  spread   // sizes differ by at most one; earlier groups take the extra label
};

struct PartitionSearchOptions {
  int exhaustive_limit = 12;
  int restarts = 20;
  std::uint64_t seed = 0x5eed;
  RemainderPolicy remainder = RemainderPolicy::reject;
};

/// Minimum off-block-mass partition of all labels of `m` into groups with the
/// given sizes. Groups in the result are numbered by their smallest label; on
/// ties the lexicographically smallest assignment wins.
std::vector<int> best_partition(const ConfusionMatrix& m, const std::vector<int>& group_sizes,
                                const PartitionSearchOptions& options = {});

/// Builds a taxonomy with `group_shape[l]` groups at level l (last entry must
/// equal the class count): partition at the coarsest level, then recurse
/// inside every group.
Taxonomy build_taxonomy_from_confusion(const ConfusionMatrix& m, const std::vector<int>& group_shape,
                                       const PartitionSearchOptions& options = {});

}  // namespace nestcal
