#pragma once

#include <span>
#include <vector>

#include "nestcal/scalar.hpp"
#include "nestcal/tensor.hpp"

namespace nestcal {

/// Inputs with per-level labels; labels[l][k] < 0 means sample k carries no
/// level-l annotation (mask 0).
struct AnnotatedBatch {
  Tensor inputs;
  std::vector<std::vector<int>> labels;

  int size() const { return labels.empty() ? 0 : static_cast<int>(labels.front().size()); }
  bool annotated(int level, int k) const { return labels[level][k] >= 0; }
  /// Throws unless every annotated level implies all coarser ones are annotated.
  void validate_mask() const;
};

struct LossResult {
  double total = 0;                 // sum over samples and levels of alpha * mask * CE
  std::vector<double> per_level;    // unweighted CE sums
  std::vector<int> counts;          // annotated samples per level
  std::vector<Matrix> grads;        // d total / d scores, per level
};

/// Cross-entropy of the scores normalized over the real classes (the last,
/// rejection row is excluded unless `include_rejection`).
/// Returns per-sample losses; `grad` (if non-null) receives dCE/dscores.
std::vector<double> cross_entropy(const Matrix& scores, std::span<const int> labels, bool include_rejection,
                                  Matrix* grad);

/// Masked, alpha-weighted batch loss over the first scores.size() levels.
LossResult batch_loss(const std::vector<Matrix>& scores, const std::vector<std::vector<int>>& labels,
                      std::span<const double> alphas, bool want_grad = true);

}  // namespace nestcal
