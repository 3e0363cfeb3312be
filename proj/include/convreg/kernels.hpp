#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "convreg/common.hpp"

namespace convreg {

/// Batch of multi-channel 3-D arrays, layout [batch][channel][z][y][x].
template <typename T>
struct Tensor {
  int batch = 0;
  int channels = 0;
  Dims3 dims;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n, int c, Dims3 d, T fill = T(0)) : batch(n), channels(c), dims(d) {
    if (n <= 0 || c <= 0 || d.x <= 0 || d.y <= 0 || d.z <= 0) throw std::invalid_argument("tensor shape must be positive");
    data.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * d.count(), fill);
  }

  [[nodiscard]] std::size_t voxels() const { return dims.count(); }
  [[nodiscard]] std::size_t sample_size() const { return static_cast<std::size_t>(channels) * voxels(); }
  [[nodiscard]] T* sample(int n) { return data.data() + static_cast<std::size_t>(n) * sample_size(); }
  [[nodiscard]] const T* sample(int n) const { return data.data() + static_cast<std::size_t>(n) * sample_size(); }
  [[nodiscard]] T* channel(int n, int c) { return sample(n) + static_cast<std::size_t>(c) * voxels(); }
  [[nodiscard]] const T* channel(int n, int c) const { return sample(n) + static_cast<std::size_t>(c) * voxels(); }
  [[nodiscard]] T& at(int n, int c, int x, int y, int z) {
    return channel(n, c)[static_cast<std::size_t>(x) +
                         static_cast<std::size_t>(dims.x) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims.y) * z)];
  }
  [[nodiscard]] const T& at(int n, int c, int x, int y, int z) const {
    return const_cast<Tensor*>(this)->at(n, c, x, y, z);
  }
  [[nodiscard]] bool same_shape(const Tensor& o) const {
    return batch == o.batch && channels == o.channels && dims == o.dims;
  }
};

/// Valid (unpadded) strided 3-D convolution with cubic kernels and optional ReLU.
/// Weights are laid out [out][in][kz][ky][kx].
template <typename T>
struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  bool relu = true;
  std::vector<T> weights;
  std::vector<T> bias;

  ConvLayer() = default;
  ConvLayer(int in, int out, int k, int s, bool r)
      : in_channels(in), out_channels(out), kernel(k), stride(s), relu(r),
        weights(static_cast<std::size_t>(in) * out * k * k * k, T(0)), bias(static_cast<std::size_t>(out), T(0)) {
    if (in <= 0 || out <= 0 || k <= 0 || s <= 0) throw std::invalid_argument("conv layer sizes must be positive");
  }

  [[nodiscard]] std::size_t fan_in() const { return static_cast<std::size_t>(in_channels) * kernel * kernel * kernel; }
  [[nodiscard]] T& weight(int o, int i, int kx, int ky, int kz) {
    return weights[((static_cast<std::size_t>(o) * in_channels + i) * kernel + kz) * kernel * kernel +
                   static_cast<std::size_t>(ky) * kernel + kx];
  }
  [[nodiscard]] const T& weight(int o, int i, int kx, int ky, int kz) const {
    return const_cast<ConvLayer*>(this)->weight(o, i, kx, ky, kz);
  }
  [[nodiscard]] int output_extent(int n) const { return n < kernel ? 0 : (n - kernel) / stride + 1; }
  [[nodiscard]] Dims3 output_dims(Dims3 in) const { return {output_extent(in.x), output_extent(in.y), output_extent(in.z)}; }
};

template <typename T>
struct ConvGradients {
  Tensor<T> input;         // empty unless requested
  std::vector<T> kernel;   // empty unless requested
  std::vector<T> bias;     // empty unless requested
};

enum GradientRequest : unsigned { kInputGradient = 1u, kParameterGradient = 2u, kAllGradients = 3u };

// The default kernels lower the convolution onto one GEMM per call (im2col over
// the whole batch) and parallelise the lowering loops with OpenMP. The serial
// namespace holds the direct-summation reference used by the tests and the
// benchmark.

/// Output dims floor((n - k)/stride) + 1; throws if the input is smaller than the kernel.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const ConvLayer<T>& layer);

/// Adjoint of conv3d_forward. `output` is the cached forward output; the ReLU
/// mask is output > 0 (subgradient 0 at exactly 0). Gradients are summed over the batch.
template <typename T>
ConvGradients<T> conv3d_backward(const Tensor<T>& grad_output, const ConvLayer<T>& layer, const Tensor<T>& input,
                                 const Tensor<T>& output, unsigned request = kAllGradients);

namespace serial {

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const ConvLayer<T>& layer);

template <typename T>
ConvGradients<T> conv3d_backward(const Tensor<T>& grad_output, const ConvLayer<T>& layer, const Tensor<T>& input,
                                 const Tensor<T>& output, unsigned request = kAllGradients);

}  // namespace serial

}  // namespace convreg
