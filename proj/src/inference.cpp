#include "nestcal/inference.hpp"

#include <numeric>

#include "nestcal/error.hpp"

namespace nestcal {

Tensor gather_inputs(const Dataset& ds, std::span<const int> indices) {
  Tensor t(ds.channels, static_cast<int>(indices.size()), ds.height, ds.width);
  const std::size_t plane = t.plane_size();
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto img = ds.image(indices[n]);
    for (int c = 0; c < ds.channels; ++c) {
      Scalar* dst = t.plane(c, static_cast<int>(n));
      for (std::size_t p = 0; p < plane; ++p) dst[p] = static_cast<Scalar>(img[c * plane + p]);
    }
  }
  return t;
}

Tensor gather_inputs(const Dataset& ds) {
  std::vector<int> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  return gather_inputs(ds, idx);
}

std::vector<int> model_level_map(const Model& model, int data_levels) {
  if (model.levels() > data_levels) {
    throw ValidationError("model has " + std::to_string(model.levels()) + " heads but the data only " +
                          std::to_string(data_levels) + " levels");
  }
  std::vector<int> map(model.levels());
  for (int l = 0; l < model.levels(); ++l) map[l] = data_levels - model.levels() + l;
  return map;
}

Inference run_inference(Model& model, const Dataset& ds, int max_level, bool keep_bottlenecks, int chunk) {
  if (max_level < 0 || max_level >= model.levels()) max_level = model.levels() - 1;
  Inference out;
  out.scores.resize(max_level + 1);
  if (keep_bottlenecks) out.bottlenecks.resize(max_level + 1);
  const int n = ds.size();
  for (int first = 0; first < n; first += chunk) {
    const int count = std::min(chunk, n - first);
    std::vector<int> idx(count);
    std::iota(idx.begin(), idx.end(), first);
    auto r = model.forward(gather_inputs(ds, idx), nn::Mode::eval, max_level);
    for (int l = 0; l <= max_level; ++l) {
      if (first == 0) out.scores[l].resize(r.scores[l].rows(), n);
      out.scores[l].middleCols(first, count) = r.scores[l];
      if (keep_bottlenecks) {
        if (first == 0) out.bottlenecks[l].resize(r.bottlenecks[l].rows(), n);
        out.bottlenecks[l].middleCols(first, count) = r.bottlenecks[l];
      }
    }
  }
  return out;
}

std::vector<int> argmax_real(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.cols()));
  const Eigen::Index rows = scores.rows() - 1;
  for (Eigen::Index n = 0; n < scores.cols(); ++n) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < rows; ++r)
      if (scores(r, n) > scores(best, n)) best = r;
    out[n] = static_cast<int>(best);
  }
  return out;
}

}  // namespace nestcal
