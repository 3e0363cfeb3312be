#include "convreg/kernels.hpp"

#include <vector>

#include <Eigen/Core>

namespace convreg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;

// Per-thread buffers reused across calls. A training batch lowers to an im2col
// matrix of tens of MB; reallocating it every call costs more in page faults
// than the GEMM itself.
template <typename T>
RowMap<T> scratch(int slot, Eigen::Index rows, Eigen::Index cols) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  const auto n = static_cast<std::size_t>(rows * cols);
  if (b.size() < n) b.resize(n);
  return RowMap<T>(b.data(), rows, cols);
}

template <typename T>
Dims3 checked_output_dims(const Tensor<T>& input, const ConvLayer<T>& layer) {
  if (input.channels != layer.in_channels) throw std::invalid_argument("conv3d: input channel count mismatch");
  if (input.dims.x < layer.kernel || input.dims.y < layer.kernel || input.dims.z < layer.kernel)
    throw std::invalid_argument("conv3d: input smaller than kernel");
  return layer.output_dims(input.dims);
}

template <typename T>
void check_backward_shapes(const Tensor<T>& grad_output, const ConvLayer<T>& layer, const Tensor<T>& input,
                           const Tensor<T>& output) {
  const Dims3 od = checked_output_dims(input, layer);
  if (grad_output.batch != input.batch || grad_output.channels != layer.out_channels || !(grad_output.dims == od))
    throw std::invalid_argument("conv3d_backward: grad_output shape mismatch");
  if (!output.same_shape(grad_output)) throw std::invalid_argument("conv3d_backward: cached output shape mismatch");
}

// One row per output position (batch-major), one column per (c, kz, ky, kx).
template <typename T>
RowMap<T> im2col(const Tensor<T>& in, const ConvLayer<T>& layer, Dims3 od) {
  const int k = layer.kernel, s = layer.stride, channels = in.channels;
  const std::size_t positions = od.count();
  const std::size_t width = static_cast<std::size_t>(channels) * k * k * k;
  RowMap<T> col = scratch<T>(0, static_cast<Eigen::Index>(positions * in.batch), static_cast<Eigen::Index>(width));
  const std::size_t nx = static_cast<std::size_t>(in.dims.x), ny = static_cast<std::size_t>(in.dims.y);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < in.batch; ++n)
    for (int oz = 0; oz < od.z; ++oz)
      for (int oy = 0; oy < od.y; ++oy)
        for (int ox = 0; ox < od.x; ++ox) {
          const std::size_t row = n * positions + ox + od.x * (static_cast<std::size_t>(oy) + od.y * static_cast<std::size_t>(oz));
          T* dst = col.data() + row * width;
          for (int c = 0; c < channels; ++c) {
            const T* src = in.channel(n, c);
            for (int kz = 0; kz < k; ++kz)
              for (int ky = 0; ky < k; ++ky) {
                const T* line = src + static_cast<std::size_t>(ox * s) +
                                nx * (static_cast<std::size_t>(oy * s + ky) + ny * static_cast<std::size_t>(oz * s + kz));
                for (int kx = 0; kx < k; ++kx) *dst++ = line[kx];
              }
          }
        }
  return col;
}

template <typename T>
void col2im_add(const RowMap<T>& dcol, const ConvLayer<T>& layer, Dims3 od, Tensor<T>& grad_in) {
  const int k = layer.kernel, s = layer.stride, k3 = k * k * k;
  const std::size_t positions = od.count();
  const std::size_t width = static_cast<std::size_t>(dcol.cols());
  const std::size_t nx = static_cast<std::size_t>(grad_in.dims.x), ny = static_cast<std::size_t>(grad_in.dims.y);
  // Each (n, c) channel is written by exactly one iteration.
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < grad_in.batch; ++n)
    for (int c = 0; c < grad_in.channels; ++c) {
      T* dst = grad_in.channel(n, c);
      for (int oz = 0; oz < od.z; ++oz)
        for (int oy = 0; oy < od.y; ++oy)
          for (int ox = 0; ox < od.x; ++ox) {
            const std::size_t row = n * positions + ox + od.x * (static_cast<std::size_t>(oy) + od.y * static_cast<std::size_t>(oz));
            const T* src = dcol.data() + row * width + static_cast<std::size_t>(c) * k3;
            for (int kz = 0; kz < k; ++kz)
              for (int ky = 0; ky < k; ++ky) {
                T* line = dst + static_cast<std::size_t>(ox * s) +
                          nx * (static_cast<std::size_t>(oy * s + ky) + ny * static_cast<std::size_t>(oz * s + kz));
                for (int kx = 0; kx < k; ++kx) line[kx] += *src++;
              }
          }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const ConvLayer<T>& layer) {
  const Dims3 od = checked_output_dims(input, layer);
  const RowMap<T> col = im2col(input, layer, od);
  const Eigen::Map<const RowMat<T>> w(layer.weights.data(), layer.out_channels, static_cast<Eigen::Index>(layer.fan_in()));
  RowMap<T> prod = scratch<T>(1, col.rows(), layer.out_channels);
  prod.noalias() = col * w.transpose();

  Tensor<T> out(input.batch, layer.out_channels, od);
  const std::size_t positions = od.count();
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < input.batch; ++n)
    for (int o = 0; o < layer.out_channels; ++o) {
      T* dst = out.channel(n, o);
      const T b = layer.bias[static_cast<std::size_t>(o)];
      for (std::size_t q = 0; q < positions; ++q) {
        T v = prod(static_cast<Eigen::Index>(n * positions + q), o) + b;
        if (layer.relu && !(v > T(0))) v = T(0);
        dst[q] = v;
      }
    }
  return out;
}

template <typename T>
ConvGradients<T> conv3d_backward(const Tensor<T>& grad_output, const ConvLayer<T>& layer, const Tensor<T>& input,
                                 const Tensor<T>& output, unsigned request) {
  check_backward_shapes(grad_output, layer, input, output);
  const Dims3 od = grad_output.dims;
  const std::size_t positions = od.count();
  const auto rows = static_cast<Eigen::Index>(positions * input.batch);

  RowMat<T> g(rows, layer.out_channels);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < input.batch; ++n)
    for (int o = 0; o < layer.out_channels; ++o) {
      const T* go = grad_output.channel(n, o);
      const T* out = output.channel(n, o);
      for (std::size_t q = 0; q < positions; ++q) {
        const bool pass = !layer.relu || out[q] > T(0);
        g(static_cast<Eigen::Index>(n * positions + q), o) = pass ? go[q] : T(0);
      }
    }

  ConvGradients<T> result;
  const Eigen::Map<const RowMat<T>> w(layer.weights.data(), layer.out_channels, static_cast<Eigen::Index>(layer.fan_in()));
  if (request & kParameterGradient) {
    const RowMap<T> col = im2col(input, layer, od);
    result.kernel.resize(layer.weights.size());
    Eigen::Map<RowMat<T>> gk(result.kernel.data(), layer.out_channels, static_cast<Eigen::Index>(layer.fan_in()));
    gk.noalias() = g.transpose() * col;
    result.bias.assign(static_cast<std::size_t>(layer.out_channels), T(0));
    for (int o = 0; o < layer.out_channels; ++o) result.bias[static_cast<std::size_t>(o)] = g.col(o).sum();
  }
  if (request & kInputGradient) {
    RowMap<T> dcol = scratch<T>(1, rows, static_cast<Eigen::Index>(layer.fan_in()));
    dcol.noalias() = g * w;
    result.input = Tensor<T>(input.batch, input.channels, input.dims);
    col2im_add(dcol, layer, od, result.input);
  }
  return result;
}

namespace serial {

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const ConvLayer<T>& layer) {
  const Dims3 od = checked_output_dims(input, layer);
  Tensor<T> out(input.batch, layer.out_channels, od);
  const int k = layer.kernel, s = layer.stride;
  for (int n = 0; n < input.batch; ++n)
    for (int o = 0; o < layer.out_channels; ++o)
      for (int oz = 0; oz < od.z; ++oz)
        for (int oy = 0; oy < od.y; ++oy)
          for (int ox = 0; ox < od.x; ++ox) {
            double acc = layer.bias[static_cast<std::size_t>(o)];
            for (int i = 0; i < layer.in_channels; ++i)
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx)
                    acc += static_cast<double>(layer.weight(o, i, kx, ky, kz)) *
                           static_cast<double>(input.at(n, i, ox * s + kx, oy * s + ky, oz * s + kz));
            if (layer.relu && !(acc > 0.0)) acc = 0.0;
            out.at(n, o, ox, oy, oz) = static_cast<T>(acc);
          }
  return out;
}

template <typename T>
ConvGradients<T> conv3d_backward(const Tensor<T>& grad_output, const ConvLayer<T>& layer, const Tensor<T>& input,
                                 const Tensor<T>& output, unsigned request) {
  check_backward_shapes(grad_output, layer, input, output);
  const Dims3 od = grad_output.dims;
  const int k = layer.kernel, s = layer.stride;
  std::vector<double> gk(layer.weights.size(), 0.0), gb(layer.bias.size(), 0.0);
  std::vector<double> gi(input.data.size(), 0.0);
  const std::size_t in_vox = input.voxels();
  const auto nx = static_cast<std::size_t>(input.dims.x), ny = static_cast<std::size_t>(input.dims.y);
  for (int n = 0; n < input.batch; ++n)
    for (int o = 0; o < layer.out_channels; ++o)
      for (int oz = 0; oz < od.z; ++oz)
        for (int oy = 0; oy < od.y; ++oy)
          for (int ox = 0; ox < od.x; ++ox) {
            double g = grad_output.at(n, o, ox, oy, oz);
            if (layer.relu && !(output.at(n, o, ox, oy, oz) > T(0))) g = 0.0;
            if (g == 0.0) continue;
            gb[static_cast<std::size_t>(o)] += g;
            for (int i = 0; i < layer.in_channels; ++i)
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) {
                    const int x = ox * s + kx, y = oy * s + ky, z = oz * s + kz;
                    const std::size_t widx = ((static_cast<std::size_t>(o) * layer.in_channels + i) * k + kz) * k * k +
                                             static_cast<std::size_t>(ky) * k + kx;
                    gk[widx] += g * static_cast<double>(input.at(n, i, x, y, z));
                    gi[(static_cast<std::size_t>(n) * input.channels + i) * in_vox + x + nx * (y + ny * z)] +=
                        g * static_cast<double>(layer.weights[widx]);
                  }
          }
  ConvGradients<T> result;
  if (request & kParameterGradient) {
    result.kernel.assign(gk.begin(), gk.end());
    result.bias.assign(gb.begin(), gb.end());
  }
  if (request & kInputGradient) {
    result.input = Tensor<T>(input.batch, input.channels, input.dims);
    for (std::size_t i = 0; i < gi.size(); ++i) result.input.data[i] = static_cast<T>(gi[i]);
  }
  return result;
}

}  // namespace serial

#define CONVREG_INSTANTIATE_KERNELS(T)                                                                         \
  template Tensor<T> conv3d_forward<T>(const Tensor<T>&, const ConvLayer<T>&);                                 \
  template ConvGradients<T> conv3d_backward<T>(const Tensor<T>&, const ConvLayer<T>&, const Tensor<T>&,        \
                                               const Tensor<T>&, unsigned);                                    \
  template Tensor<T> serial::conv3d_forward<T>(const Tensor<T>&, const ConvLayer<T>&);                         \
  template ConvGradients<T> serial::conv3d_backward<T>(const Tensor<T>&, const ConvLayer<T>&, const Tensor<T>&, \
                                                       const Tensor<T>&, unsigned);

CONVREG_INSTANTIATE_KERNELS(float)
CONVREG_INSTANTIATE_KERNELS(double)

#undef CONVREG_INSTANTIATE_KERNELS

}  // namespace convreg
