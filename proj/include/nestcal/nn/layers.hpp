#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "nestcal/scalar.hpp"
#include "nestcal/tensor.hpp"

namespace nestcal::nn {

enum class Mode { train, eval };

/// A trainable array plus its gradient. `level` is the coarsest output level
/// whose prediction depends on it; `head` marks output-layer weights.
struct Parameter {
  std::string name;
  int level = 0;
  bool head = false;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, int rows, int cols, int lvl, bool is_head)
      : name(std::move(n)), level(lvl), head(is_head), value(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)) {}
  Eigen::Index size() const { return value.size(); }
};

/// Non-trainable state that still belongs in a checkpoint (running statistics).
struct Buffer {
  std::string name;
  Matrix* value;
};

/// k x k convolution, stride 1, zero padding k/2.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int level, std::mt19937_64& rng);

  Tensor forward(const Tensor& x);
  /// Accumulates weight/bias gradients. Returns dL/dx when `need_input_grad`.
  Tensor backward(const Tensor& dy, bool need_input_grad);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  void im2col(const Tensor& x, int first, int count);
  void col2im(Tensor& dx, int first, int count) const;
  int chunk_samples(const Tensor& x) const;

  int in_ = 0, out_ = 0, kernel_ = 3;
  Parameter weight_, bias_;
  Tensor input_;
  Matrix col_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels, int level);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy);

  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  Matrix& running_mean() { return running_mean_; }
  Matrix& running_var() { return running_var_; }
  const std::string& name() const { return name_; }

  static constexpr Scalar kEps = Scalar(1e-5);
  static constexpr Scalar kMomentum = Scalar(0.1);

 private:
  std::string name_;
  int channels_ = 0;
  Parameter gamma_, beta_;
  Matrix running_mean_, running_var_;
  Mode mode_ = Mode::eval;
  Tensor xhat_;
  std::vector<Scalar> inv_std_;
};

/// conv -> batch norm -> ReLU.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const std::string& name, int in_channels, int out_channels, int kernel, int level, std::mt19937_64& rng);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& dy, bool need_input_grad);

  void collect(std::vector<Parameter*>& params, std::vector<Buffer>& buffers);
  int out_channels() const { return conv_.out_channels(); }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
  Tensor out_;
};

/// Fully connected map over column vectors: y = W x + b, x is (in x batch).
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features, int level, bool head, std::mt19937_64& rng);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dy);

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  int in_features() const { return static_cast<int>(weight_.value.cols()); }
  int out_features() const { return static_cast<int>(weight_.value.rows()); }

 private:
  Parameter weight_, bias_;
  Matrix input_;
};

struct MaxPoolCache {
  std::vector<std::int32_t> argmax;
  int in_height = 0, in_width = 0;
};

/// 2x2 max pooling, stride 2 (odd trailing rows/cols dropped).
Tensor max_pool2(const Tensor& x, MaxPoolCache& cache);
Tensor max_pool2_backward(const Tensor& dy, const MaxPoolCache& cache);

/// Nearest-neighbour x2 upsampling.
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& dy);

/// Spatial mean per (channel, sample): returns a (channels x batch) matrix.
Matrix global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Matrix& dy, int height, int width);

/// Average pooling to a fixed out x out grid with adaptive bin edges; returns
/// per-sample feature columns of size channels*out*out.
Matrix adaptive_avg_pool(const Tensor& x, int out);

/// Column-wise L2 normalization. `norms` receives the pre-normalization norms;
/// an all-zero column maps to the uniform unit vector.
Matrix l2_normalize(const Matrix& x, std::vector<Scalar>& norms);
Matrix l2_normalize_backward(const Matrix& dy, const Matrix& y, const std::vector<Scalar>& norms);

Matrix relu(const Matrix& x);
Matrix relu_backward(const Matrix& dy, const Matrix& y);

/// Column-wise softmax.
Matrix softmax(const Matrix& scores);

}  // namespace nestcal::nn
