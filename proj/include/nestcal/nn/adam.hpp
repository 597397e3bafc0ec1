#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "nestcal/nn/layers.hpp"

namespace nestcal::nn {

/// Adam with bias correction. State is keyed by parameter name so the same
/// optimizer can be handed different trainable subsets.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter*>& params);
  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

 private:
  struct Moments {
    Matrix m, v;
    long long t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::unordered_map<std::string, Moments> state_;
};

void zero_grad(const std::vector<Parameter*>& params);

}  // namespace nestcal::nn
