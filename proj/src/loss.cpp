#include "nestcal/loss.hpp"

#include <cmath>

#include "nestcal/error.hpp"

namespace nestcal {

void AnnotatedBatch::validate_mask() const {
  for (int k = 0; k < size(); ++k) {
    for (std::size_t l = 1; l < labels.size(); ++l) {
      if (labels[l][k] >= 0 && labels[l - 1][k] < 0) {
        throw ValidationError("batch mask is not monotone for sample " + std::to_string(k));
      }
    }
  }
}

std::vector<double> cross_entropy(const Matrix& scores, std::span<const int> labels, bool include_rejection,
                                  Matrix* grad) {
  const Eigen::Index rows = include_rejection ? scores.rows() : scores.rows() - 1;
  if (rows < 1) throw ShapeError("cross_entropy: no classes");
  if (static_cast<Eigen::Index>(labels.size()) != scores.cols()) throw ShapeError("cross_entropy: label count mismatch");
  std::vector<double> out(labels.size(), 0.0);
  if (grad) grad->setZero(scores.rows(), scores.cols());
  for (Eigen::Index n = 0; n < scores.cols(); ++n) {
    const int y = labels[n];
    if (y < 0) continue;
    if (y >= rows) throw ValidationError("cross_entropy: label " + std::to_string(y) + " out of range");
    double mx = scores(0, n);
    for (Eigen::Index r = 1; r < rows; ++r) mx = std::max(mx, static_cast<double>(scores(r, n)));
    double z = 0;
    for (Eigen::Index r = 0; r < rows; ++r) z += std::exp(scores(r, n) - mx);
    const double log_z = mx + std::log(z);
    out[n] = log_z - scores(y, n);
    if (grad) {
      for (Eigen::Index r = 0; r < rows; ++r) (*grad)(r, n) = static_cast<Scalar>(std::exp(scores(r, n) - log_z));
      (*grad)(y, n) -= 1;
    }
  }
  return out;
}

LossResult batch_loss(const std::vector<Matrix>& scores, const std::vector<std::vector<int>>& labels,
                      std::span<const double> alphas, bool want_grad) {
  if (scores.size() > labels.size() || scores.size() > alphas.size()) {
    throw ShapeError("batch_loss: levels of scores, labels and alphas disagree");
  }
  LossResult r;
  r.per_level.assign(scores.size(), 0.0);
  r.counts.assign(scores.size(), 0);
  r.grads.resize(scores.size());
  for (std::size_t l = 0; l < scores.size(); ++l) {
    if (alphas[l] < 0) throw ValidationError("batch_loss: alphas must be >= 0");
    Matrix g;
    const auto ce = cross_entropy(scores[l], labels[l], false, want_grad ? &g : nullptr);
    for (std::size_t k = 0; k < ce.size(); ++k) {
      if (labels[l][k] < 0) continue;
      r.per_level[l] += ce[k];
      ++r.counts[l];
    }
    r.total += alphas[l] * r.per_level[l];
    if (want_grad) r.grads[l] = g * static_cast<Scalar>(alphas[l]);
  }
  return r;
}

}  // namespace nestcal
