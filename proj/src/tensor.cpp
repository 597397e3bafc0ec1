#include "nestcal/tensor.hpp"

#include <algorithm>
#include <cstring>

#include "nestcal/error.hpp"

namespace nestcal {

Tensor pack_images(std::span<const float> images, int count, int channels, int height, int width) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (images.size() != static_cast<std::size_t>(count) * channels * plane) {
    throw ShapeError("pack_images: buffer size does not match (n, c, h, w)");
  }
  Tensor t(channels, count, height, width);
  for (int n = 0; n < count; ++n) {
    for (int c = 0; c < channels; ++c) {
      const float* src = images.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
      std::copy(src, src + plane, t.plane(c, n));
    }
  }
  return t;
}

std::vector<float> unpack_images(const Tensor& t) {
  const std::size_t plane = t.plane_size();
  std::vector<float> out(t.size());
  for (int n = 0; n < t.batch; ++n) {
    for (int c = 0; c < t.channels; ++c) {
      const Scalar* src = t.plane(c, n);
      std::copy(src, src + plane, out.begin() + (static_cast<std::size_t>(n) * t.channels + c) * plane);
    }
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.batch != b.batch || a.height != b.height || a.width != b.width) {
    throw ShapeError("concat_channels: batch/spatial mismatch");
  }
  Tensor out(a.channels + b.channels, a.batch, a.height, a.width);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

Tensor slice_batch(const Tensor& t, int first, int count) {
  if (first < 0 || count < 0 || first + count > t.batch) throw ShapeError("slice_batch: range out of bounds");
  Tensor out(t.channels, count, t.height, t.width);
  const std::size_t plane = t.plane_size();
  for (int c = 0; c < t.channels; ++c) {
    std::memcpy(out.plane(c, 0), t.plane(c, first), sizeof(Scalar) * plane * count);
  }
  return out;
}

}  // namespace nestcal
