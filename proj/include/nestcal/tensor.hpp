#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "nestcal/scalar.hpp"

namespace nestcal {

/// Feature maps stored channel-major over the batch: index (c, n, y, x).
/// Each channel is one contiguous row of n*h*w values, which lets a 3x3
/// convolution run as a single GEMM over the whole batch.
struct Tensor {
  // Aligned so vectorized reductions over a map split the same way on every run.
  using Storage = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

  int channels = 0;
  int batch = 0;
  int height = 0;
  int width = 0;
  Storage data;

  Tensor() = default;
  Tensor(int c, int n, int h, int w, Scalar fill = Scalar(0))
      : channels(c), batch(n), height(h), width(w),
        data(static_cast<std::size_t>(c) * n * h * w, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  std::size_t row_size() const { return static_cast<std::size_t>(batch) * plane_size(); }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const {
    return channels == o.channels && batch == o.batch && height == o.height && width == o.width;
  }

  Scalar* plane(int c, int n) { return data.data() + c * row_size() + n * plane_size(); }
  const Scalar* plane(int c, int n) const { return data.data() + c * row_size() + n * plane_size(); }
  Scalar& at(int c, int n, int y, int x) { return plane(c, n)[y * width + x]; }
  Scalar at(int c, int n, int y, int x) const { return plane(c, n)[y * width + x]; }

  /// View as a (channels x batch*h*w) row-major matrix.
  MatrixMap matrix() { return MatrixMap(data.data(), channels, static_cast<Eigen::Index>(row_size())); }
  ConstMatrixMap matrix() const {
    return ConstMatrixMap(data.data(), channels, static_cast<Eigen::Index>(row_size()));
  }
};

/// Packs images given sample-major as (n, c, h, w) into the channel-major layout.
Tensor pack_images(std::span<const float> images, int count, int channels, int height, int width);

/// Inverse of pack_images.
std::vector<float> unpack_images(const Tensor& t);

/// Concatenates along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Copies samples [first, first+count) of every channel.
Tensor slice_batch(const Tensor& t, int first, int count);

}  // namespace nestcal
