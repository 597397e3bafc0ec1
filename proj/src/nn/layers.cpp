#include "nestcal/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nestcal/error.hpp"

namespace nestcal::nn {

namespace {

constexpr Eigen::Index kColumnsPerChunk = 16384;

void he_normal(Matrix& m, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int level,
               std::mt19937_64& rng)
    : in_(in_channels), out_(out_channels), kernel_(kernel),
      weight_(name + ".weight", out_channels, in_channels * kernel * kernel, level, false),
      bias_(name + ".bias", out_channels, 1, level, false) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || kernel % 2 == 0) {
    throw ShapeError("Conv2d " + name + ": channels must be positive and kernel odd");
  }
  he_normal(weight_.value, in_channels * kernel * kernel, rng);
}

int Conv2d::chunk_samples(const Tensor& x) const {
  const auto plane = static_cast<Eigen::Index>(x.plane_size());
  return static_cast<int>(std::max<Eigen::Index>(1, kColumnsPerChunk / std::max<Eigen::Index>(plane, 1)));
}

void Conv2d::im2col(const Tensor& x, int first, int count) {
  const int h = x.height, w = x.width, k = kernel_, pad = kernel_ / 2;
  const std::size_t plane = x.plane_size();
  col_.resize(static_cast<Eigen::Index>(in_) * k * k, static_cast<Eigen::Index>(plane) * count);
  for (int ci = 0; ci < in_; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Scalar* row = col_.row((ci * k + ky) * k + kx).data();
        const int x_lo = std::max(0, pad - kx);
        const int x_hi = std::min(w, w + pad - kx);
        for (int n = 0; n < count; ++n) {
          const Scalar* src = x.plane(ci, first + n);
          Scalar* dst = row + n * plane;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - pad;
            Scalar* d = dst + y * w;
            if (sy < 0 || sy >= h) {
              std::fill(d, d + w, Scalar(0));
              continue;
            }
            const Scalar* s = src + sy * w + (kx - pad);
            for (int xx = 0; xx < x_lo; ++xx) d[xx] = 0;
            for (int xx = x_lo; xx < x_hi; ++xx) d[xx] = s[xx];
            for (int xx = x_hi; xx < w; ++xx) d[xx] = 0;
          }
        }
      }
    }
  }
}

void Conv2d::col2im(Tensor& dx, int first, int count) const {
  const int h = dx.height, w = dx.width, k = kernel_, pad = kernel_ / 2;
  const std::size_t plane = dx.plane_size();
  for (int ci = 0; ci < in_; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* row = col_.row((ci * k + ky) * k + kx).data();
        const int x_lo = std::max(0, pad - kx);
        const int x_hi = std::min(w, w + pad - kx);
        for (int n = 0; n < count; ++n) {
          Scalar* dst = dx.plane(ci, first + n);
          const Scalar* src = row + n * plane;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            Scalar* d = dst + sy * w + (kx - pad);
            const Scalar* s = src + y * w;
            for (int xx = x_lo; xx < x_hi; ++xx) d[xx] += s[xx];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.channels != in_) throw ShapeError("Conv2d: expected " + std::to_string(in_) + " input channels");
  input_ = x;
  Tensor y(out_, x.batch, x.height, x.width);
  auto ym = y.matrix();
  const auto plane = static_cast<Eigen::Index>(x.plane_size());
  const int step = chunk_samples(x);
  for (int first = 0; first < x.batch; first += step) {
    const int count = std::min(step, x.batch - first);
    im2col(x, first, count);
    ym.middleCols(first * plane, count * plane).noalias() = weight_.value * col_;
  }
  ym.colwise() += bias_.value.col(0);
  return y;
}

Tensor Conv2d::backward(const Tensor& dy, bool need_input_grad) {
  const auto dym = dy.matrix();
  bias_.grad.col(0) += dym.rowwise().sum();
  Tensor dx;
  if (need_input_grad) dx = Tensor(in_, input_.batch, input_.height, input_.width);
  const auto plane = static_cast<Eigen::Index>(input_.plane_size());
  const int step = chunk_samples(input_);
  for (int first = 0; first < input_.batch; first += step) {
    const int count = std::min(step, input_.batch - first);
    const auto dblock = dym.middleCols(first * plane, count * plane);
    im2col(input_, first, count);
    weight_.grad.noalias() += dblock * col_.transpose();
    if (need_input_grad) {
      col_.noalias() = weight_.value.transpose() * dblock;
      col2im(dx, first, count);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(const std::string& name, int channels, int level)
    : name_(name), channels_(channels),
      gamma_(name + ".gamma", channels, 1, level, false),
      beta_(name + ".beta", channels, 1, level, false),
      running_mean_(Matrix::Zero(channels, 1)),
      running_var_(Matrix::Ones(channels, 1)) {
  gamma_.value.setOnes();
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  if (x.channels != channels_) throw ShapeError("BatchNorm2d " + name_ + ": channel mismatch");
  mode_ = mode;
  const auto count = static_cast<Eigen::Index>(x.row_size());
  Tensor y(x.channels, x.batch, x.height, x.width);
  xhat_ = Tensor(x.channels, x.batch, x.height, x.width);
  inv_std_.assign(channels_, 0);
  const auto xm = x.matrix();
  auto ym = y.matrix();
  auto hm = xhat_.matrix();
  for (int c = 0; c < channels_; ++c) {
    Scalar mean, var;
    if (mode == Mode::train) {
      double s = 0, ss = 0;
      for (Eigen::Index i = 0; i < count; ++i) s += xm(c, i);
      mean = static_cast<Scalar>(s / count);
      for (Eigen::Index i = 0; i < count; ++i) {
        const double d = xm(c, i) - mean;
        ss += d * d;
      }
      var = static_cast<Scalar>(ss / count);
      const Scalar unbiased = count > 1 ? static_cast<Scalar>(ss / (count - 1)) : var;
      running_mean_(c, 0) = (1 - kMomentum) * running_mean_(c, 0) + kMomentum * mean;
      running_var_(c, 0) = (1 - kMomentum) * running_var_(c, 0) + kMomentum * unbiased;
    } else {
      mean = running_mean_(c, 0);
      var = running_var_(c, 0);
    }
    const Scalar inv = Scalar(1) / std::sqrt(var + kEps);
    inv_std_[c] = inv;
    hm.row(c) = (xm.row(c).array() - mean) * inv;
    ym.row(c) = hm.row(c).array() * gamma_.value(c, 0) + beta_.value(c, 0);
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  Tensor dx(dy.channels, dy.batch, dy.height, dy.width);
  const auto count = static_cast<Scalar>(dy.row_size());
  const auto dym = dy.matrix();
  const auto hm = xhat_.matrix();
  auto dxm = dx.matrix();
  auto& gg = gamma_.grad;
  auto& bg = beta_.grad;
  for (int c = 0; c < channels_; ++c) {
    const Scalar sum_dy = dym.row(c).sum();
    const Scalar sum_dy_xhat = dym.row(c).dot(hm.row(c));
    gg(c, 0) += sum_dy_xhat;
    bg(c, 0) += sum_dy;
    const Scalar g = gamma_.value(c, 0) * inv_std_[c];
    if (mode_ == Mode::train) {
      dxm.row(c) = (g / count) * (count * dym.row(c).array() - sum_dy - hm.row(c).array() * sum_dy_xhat);
    } else {
      dxm.row(c) = g * dym.row(c).array();
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ConvBlock

ConvBlock::ConvBlock(const std::string& name, int in_channels, int out_channels, int kernel, int level,
                     std::mt19937_64& rng)
    : conv_(name + ".conv", in_channels, out_channels, kernel, level, rng),
      bn_(name + ".bn", out_channels, level) {}

Tensor ConvBlock::forward(const Tensor& x, Mode mode) {
  out_ = bn_.forward(conv_.forward(x), mode);
  for (auto& v : out_.data) v = std::max(v, Scalar(0));
  return out_;
}

Tensor ConvBlock::backward(const Tensor& dy, bool need_input_grad) {
  Tensor g = dy;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (out_.data[i] <= 0) g.data[i] = 0;
  }
  return conv_.backward(bn_.backward(g), need_input_grad);
}

void ConvBlock::collect(std::vector<Parameter*>& params, std::vector<Buffer>& buffers) {
  params.push_back(&conv_.weight());
  params.push_back(&conv_.bias());
  params.push_back(&bn_.gamma());
  params.push_back(&bn_.beta());
  buffers.push_back({bn_.name() + ".running_mean", &bn_.running_mean()});
  buffers.push_back({bn_.name() + ".running_var", &bn_.running_var()});
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(const std::string& name, int in_features, int out_features, int level, bool head,
               std::mt19937_64& rng)
    : weight_(name + ".weight", out_features, in_features, level, head),
      bias_(name + ".bias", out_features, 1, level, head) {
  if (in_features <= 0 || out_features <= 0) throw ShapeError("Linear " + name + ": sizes must be positive");
  he_normal(weight_.value, in_features, rng);
}

Matrix Linear::forward(const Matrix& x) {
  if (x.rows() != weight_.value.cols()) throw ShapeError("Linear: input width mismatch");
  input_ = x;
  Matrix y = weight_.value * x;
  y.colwise() += bias_.value.col(0);
  return y;
}

Matrix Linear::backward(const Matrix& dy) {
  weight_.grad.noalias() += dy * input_.transpose();
  bias_.grad.col(0) += dy.rowwise().sum();
  return weight_.value.transpose() * dy;
}

// ---------------------------------------------------------------------------
// Stateless ops

Tensor max_pool2(const Tensor& x, MaxPoolCache& cache) {
  const int oh = x.height / 2, ow = x.width / 2;
  if (oh == 0 || ow == 0) throw ShapeError("max_pool2: input smaller than 2x2");
  Tensor y(x.channels, x.batch, oh, ow);
  cache.in_height = x.height;
  cache.in_width = x.width;
  cache.argmax.assign(y.size(), 0);
  std::size_t o = 0;
  for (int c = 0; c < x.channels; ++c) {
    for (int n = 0; n < x.batch; ++n) {
      const Scalar* src = x.plane(c, n);
      Scalar* dst = y.plane(c, n);
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx, ++o) {
          int best = (2 * yy) * x.width + 2 * xx;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = (2 * yy + dy) * x.width + 2 * xx + dx;
              if (src[idx] > src[best]) best = idx;
            }
          }
          dst[yy * ow + xx] = src[best];
          cache.argmax[o] = best;
        }
      }
    }
  }
  return y;
}

Tensor max_pool2_backward(const Tensor& dy, const MaxPoolCache& cache) {
  Tensor dx(dy.channels, dy.batch, cache.in_height, cache.in_width);
  std::size_t o = 0;
  const std::size_t plane = dy.plane_size();
  for (int c = 0; c < dy.channels; ++c) {
    for (int n = 0; n < dy.batch; ++n) {
      const Scalar* src = dy.plane(c, n);
      Scalar* dst = dx.plane(c, n);
      for (std::size_t i = 0; i < plane; ++i, ++o) dst[cache.argmax[o]] += src[i];
    }
  }
  return dx;
}

Tensor upsample2(const Tensor& x) {
  Tensor y(x.channels, x.batch, x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels; ++c) {
    for (int n = 0; n < x.batch; ++n) {
      const Scalar* src = x.plane(c, n);
      Scalar* dst = y.plane(c, n);
      for (int yy = 0; yy < y.height; ++yy) {
        const Scalar* s = src + (yy / 2) * x.width;
        Scalar* d = dst + yy * y.width;
        for (int xx = 0; xx < y.width; ++xx) d[xx] = s[xx / 2];
      }
    }
  }
  return y;
}

Tensor upsample2_backward(const Tensor& dy) {
  Tensor dx(dy.channels, dy.batch, dy.height / 2, dy.width / 2);
  for (int c = 0; c < dy.channels; ++c) {
    for (int n = 0; n < dy.batch; ++n) {
      const Scalar* src = dy.plane(c, n);
      Scalar* dst = dx.plane(c, n);
      for (int yy = 0; yy < dy.height; ++yy) {
        for (int xx = 0; xx < dy.width; ++xx) dst[(yy / 2) * dx.width + xx / 2] += src[yy * dy.width + xx];
      }
    }
  }
  return dx;
}

Matrix global_avg_pool(const Tensor& x) {
  Matrix out(x.channels, x.batch);
  const std::size_t plane = x.plane_size();
  for (int c = 0; c < x.channels; ++c) {
    for (int n = 0; n < x.batch; ++n) {
      const Scalar* p = x.plane(c, n);
      double s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      out(c, n) = static_cast<Scalar>(s / static_cast<double>(plane));
    }
  }
  return out;
}

Tensor global_avg_pool_backward(const Matrix& dy, int height, int width) {
  Tensor dx(static_cast<int>(dy.rows()), static_cast<int>(dy.cols()), height, width);
  const std::size_t plane = dx.plane_size();
  const Scalar scale = Scalar(1) / static_cast<Scalar>(plane);
  for (int c = 0; c < dx.channels; ++c) {
    for (int n = 0; n < dx.batch; ++n) {
      std::fill(dx.plane(c, n), dx.plane(c, n) + plane, dy(c, n) * scale);
    }
  }
  return dx;
}

Matrix adaptive_avg_pool(const Tensor& x, int out) {
  if (out <= 0) throw ShapeError("adaptive_avg_pool: output size must be positive");
  Matrix f(static_cast<Eigen::Index>(x.channels) * out * out, x.batch);
  for (int n = 0; n < x.batch; ++n) {
    for (int c = 0; c < x.channels; ++c) {
      const Scalar* p = x.plane(c, n);
      for (int by = 0; by < out; ++by) {
        const int y0 = by * x.height / out, y1 = ((by + 1) * x.height + out - 1) / out;
        for (int bx = 0; bx < out; ++bx) {
          const int x0 = bx * x.width / out, x1 = ((bx + 1) * x.width + out - 1) / out;
          double s = 0;
          for (int yy = y0; yy < y1; ++yy)
            for (int xx = x0; xx < x1; ++xx) s += p[yy * x.width + xx];
          f((c * out + by) * out + bx, n) = static_cast<Scalar>(s / ((y1 - y0) * (x1 - x0)));
        }
      }
    }
  }
  return f;
}

Matrix l2_normalize(const Matrix& x, std::vector<Scalar>& norms) {
  Matrix y(x.rows(), x.cols());
  norms.assign(static_cast<std::size_t>(x.cols()), 0);
  for (Eigen::Index n = 0; n < x.cols(); ++n) {
    const Scalar norm = x.col(n).norm();
    if (norm < std::numeric_limits<Scalar>::min() * 16) {
      norms[n] = std::numeric_limits<Scalar>::infinity();
      y.col(n).setConstant(Scalar(1) / std::sqrt(static_cast<Scalar>(x.rows())));
      continue;
    }
    norms[n] = norm;
    y.col(n) = x.col(n) / norm;
  }
  return y;
}

Matrix l2_normalize_backward(const Matrix& dy, const Matrix& y, const std::vector<Scalar>& norms) {
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index n = 0; n < dy.cols(); ++n) {
    dx.col(n) = (dy.col(n) - y.col(n) * y.col(n).dot(dy.col(n))) / norms[n];
  }
  return dx;
}

Matrix relu(const Matrix& x) { return x.cwiseMax(Scalar(0)); }

Matrix relu_backward(const Matrix& dy, const Matrix& y) {
  return (y.array() > Scalar(0)).select(dy, Matrix::Zero(dy.rows(), dy.cols()));
}

Matrix softmax(const Matrix& scores) {
  Matrix p(scores.rows(), scores.cols());
  for (Eigen::Index n = 0; n < scores.cols(); ++n) {
    const Scalar m = scores.col(n).maxCoeff();
    p.col(n) = (scores.col(n).array() - m).exp();
    p.col(n) /= p.col(n).sum();
  }
  return p;
}

}  // namespace nestcal::nn
