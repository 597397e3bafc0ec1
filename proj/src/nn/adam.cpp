#include "nestcal/nn/adam.hpp"

#include <cmath>

namespace nestcal::nn {

void Adam::step(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    auto& s = state_[p->name];
    if (s.t == 0) {
      s.m = Matrix::Zero(p->value.rows(), p->value.cols());
      s.v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    ++s.t;
    const auto b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
    s.m = b1 * s.m + (1 - b1) * p->grad;
    s.v = b2 * s.v + (1 - b2) * p->grad.cwiseProduct(p->grad);
    const double c1 = 1 - std::pow(beta1_, static_cast<double>(s.t));
    const double c2 = 1 - std::pow(beta2_, static_cast<double>(s.t));
    const auto step_size = static_cast<Scalar>(lr_ / c1);
    const auto eps = static_cast<Scalar>(eps_);
    const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
    p->value.array() -= step_size * s.m.array() / ((s.v.array() * inv_c2).sqrt() + eps);
  }
}

void zero_grad(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->grad.setZero();
}

}  // namespace nestcal::nn
