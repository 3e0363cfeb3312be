#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "convreg/kernels.hpp"

namespace convreg {

/// Layer-stack description; the first layer always reads 2 channels (fixed, warped).
struct Architecture {
  struct Layer {
    int out_channels = 1;
    int kernel = 1;
    int stride = 1;
    bool relu = true;
  };
  std::string name = "custom";
  int in_channels = 2;
  std::vector<Layer> layers;

  /// 5 layers, 16/32/64/64/1 channels, kernels 5/3/3/1/1, strides 2/2/1/1/1: RF 17, stride 4.
  static Architecture reference();
  /// Same kernels and strides with 64/128/256/512/1 channels.
  static Architecture paper_scale();
  static Architecture by_name(const std::string& name);

  [[nodiscard]] int receptive_field() const;
  [[nodiscard]] int total_stride() const;
};

nlohmann::json to_json(const Architecture& a);
Architecture architecture_from_json(const nlohmann::json& j);

/// Patch dissimilarity network N. A p^3 two-channel patch maps to one scalar
/// (negative = similar); a larger input yields a dense map with stride s.
template <typename T>
class BasicNetwork {
 public:
  std::vector<ConvLayer<T>> layers;

  BasicNetwork() = default;
  explicit BasicNetwork(std::vector<ConvLayer<T>> l) : layers(std::move(l)) { validate(); }

  /// Throws std::invalid_argument on inconsistent channel chains, a ReLU on the
  /// last layer, or a last layer with more than one output channel.
  void validate() const;

  [[nodiscard]] int patch_size() const;
  [[nodiscard]] int stride() const;
  [[nodiscard]] std::size_t parameter_count() const;
  [[nodiscard]] Dims3 map_dims(Dims3 input) const;

  template <typename U>
  [[nodiscard]] BasicNetwork<U> cast() const {
    BasicNetwork<U> out;
    for (const auto& l : layers) {
      ConvLayer<U> c(l.in_channels, l.out_channels, l.kernel, l.stride, l.relu);
      for (std::size_t i = 0; i < l.weights.size(); ++i) c.weights[i] = static_cast<U>(l.weights[i]);
      for (std::size_t i = 0; i < l.bias.size(); ++i) c.bias[i] = static_cast<U>(l.bias[i]);
      out.layers.push_back(std::move(c));
    }
    return out;
  }
};

using Network = BasicNetwork<float>;

/// He-style uniform init in +-sqrt(6/fan_in), zero biases; deterministic in seed.
template <typename T>
BasicNetwork<T> init_network(const Architecture& arch, std::uint64_t seed);

/// All intermediate activations of one forward pass: activations[0] is the input,
/// activations[l+1] the output of layer l.
template <typename T>
struct ForwardPass {
  std::vector<Tensor<T>> activations;
  [[nodiscard]] const Tensor<T>& output() const { return activations.back(); }
};

template <typename T>
struct NetworkGradients {
  std::vector<std::vector<T>> kernel;
  std::vector<std::vector<T>> bias;
  Tensor<T> input;  // empty unless requested

  static NetworkGradients zeros_like(const BasicNetwork<T>& net);
};

template <typename T>
ForwardPass<T> forward(const BasicNetwork<T>& net, Tensor<T> input);

/// Backpropagates grad_output (shaped like pass.output()) through every layer.
template <typename T>
NetworkGradients<T> backward(const BasicNetwork<T>& net, const ForwardPass<T>& pass, const Tensor<T>& grad_output,
                             unsigned request = kAllGradients);

/// Scores one (fixed, warped) patch pair given as 2 * p^3 values, channel-major, x fastest.
template <typename T>
T forward_patch(const BasicNetwork<T>& net, std::span<const T> patch_pair);

/// Grid of patch scores from one fully-convolutional pass. Element (i,j,k)
/// scores the patch whose first voxel is (i,j,k) * stride.
template <typename T>
struct DissimilarityMap {
  Dims3 dims;
  int stride = 1;
  int patch_size = 1;
  std::vector<T> values;

  [[nodiscard]] double sum() const;
  [[nodiscard]] T at(int i, int j, int k) const {
    return values[static_cast<std::size_t>(i) + static_cast<std::size_t>(dims.x) * (j + static_cast<std::size_t>(dims.y) * k)];
  }
};

/// `pair` is a single two-channel tensor (batch 1) of spatial size >= p.
template <typename T>
DissimilarityMap<T> forward_full(const BasicNetwork<T>& net, const Tensor<T>& pair);

/// Gradient of the summed dissimilarity map with respect to every input voxel
/// (one backward pass seeded with ones). Optionally returns the map as well.
template <typename T>
Tensor<T> input_gradient(const BasicNetwork<T>& net, const Tensor<T>& pair, DissimilarityMap<T>* map = nullptr);

/// Momentum SGD: v <- momentum * v - lr * g; w <- w + v.
template <typename T>
struct SgdState {
  std::vector<std::vector<T>> kernel_velocity;
  std::vector<std::vector<T>> bias_velocity;
};

template <typename T>
void sgd_step(BasicNetwork<T>& net, const NetworkGradients<T>& grads, double lr, double momentum, SgdState<T>& state);

// Checkpoints: manifest.json plus raw little-endian float32 layer<i>.kernel.bin /
// layer<i>.bias.bin per layer. Kernels use [out][in][kz][ky][kx] order.

void write_checkpoint(const std::filesystem::path& dir, const Network& net, const Architecture& arch,
                      std::uint64_t seed, std::int64_t step, const nlohmann::json& hyperparameters);
Network read_checkpoint(const std::filesystem::path& dir, nlohmann::json* manifest = nullptr);

}  // namespace convreg
