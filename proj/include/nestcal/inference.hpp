#pragma once

#include <span>
#include <vector>

#include "nestcal/data.hpp"
#include "nestcal/model.hpp"

namespace nestcal {

/// Packs the selected samples into a network input.
Tensor gather_inputs(const Dataset& ds, std::span<const int> indices);
Tensor gather_inputs(const Dataset& ds);

/// Data level served by each model head: heads map onto the finest levels of
/// the taxonomy (an end-to-end model's single head is the fine level).
std::vector<int> model_level_map(const Model& model, int data_levels);

struct Inference {
  std::vector<Matrix> scores;       // level -> (arity + 1) x N
  std::vector<Matrix> bottlenecks;  // filled when requested
};

/// Evaluation-mode forward over the whole dataset in chunks.
Inference run_inference(Model& model, const Dataset& ds, int max_level = -1, bool keep_bottlenecks = false,
                        int chunk = 250);

/// Column-wise argmax over the real classes (rejection row excluded).
std::vector<int> argmax_real(const Matrix& scores);

}  // namespace nestcal
