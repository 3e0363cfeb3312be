#include "convreg/network.hpp"

#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "convreg/volume_io.hpp"

namespace convreg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- architecture

Architecture Architecture::reference() {
  Architecture a;
  a.name = "reference";
  a.layers = {{16, 5, 2, true}, {32, 3, 2, true}, {64, 3, 1, true}, {64, 1, 1, true}, {1, 1, 1, false}};
  return a;
}

Architecture Architecture::paper_scale() {
  Architecture a;
  a.name = "paper";
  a.layers = {{64, 5, 2, true}, {128, 3, 2, true}, {256, 3, 1, true}, {512, 1, 1, true}, {1, 1, 1, false}};
  return a;
}

Architecture Architecture::by_name(const std::string& name) {
  if (name == "reference" || name == "desk") return reference();
  if (name == "paper") return paper_scale();
  throw std::invalid_argument("unknown architecture: " + name);
}

int Architecture::receptive_field() const {
  int rf = 1, jump = 1;
  for (const auto& l : layers) {
    rf += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return rf;
}

int Architecture::total_stride() const {
  int s = 1;
  for (const auto& l : layers) s *= l.stride;
  return s;
}

json to_json(const Architecture& a) {
  json layers = json::array();
  for (const auto& l : a.layers)
    layers.push_back({{"out_channels", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride}, {"relu", l.relu}});
  return {{"name", a.name}, {"in_channels", a.in_channels}, {"layers", layers}};
}

Architecture architecture_from_json(const json& j) {
  Architecture a;
  a.name = j.value("name", std::string("custom"));
  a.in_channels = j.value("in_channels", 2);
  for (const auto& l : j.at("layers"))
    a.layers.push_back({l.at("out_channels").get<int>(), l.at("kernel").get<int>(), l.at("stride").get<int>(),
                        l.at("relu").get<bool>()});
  return a;
}

// ---------------------------------------------------------------- network

template <typename T>
void BasicNetwork<T>::validate() const {
  if (layers.empty()) throw std::invalid_argument("network has no layers");
  if (layers.front().in_channels != 2) throw std::invalid_argument("first layer must read 2 channels");
  for (std::size_t i = 1; i < layers.size(); ++i)
    if (layers[i].in_channels != layers[i - 1].out_channels)
      throw std::invalid_argument("layer channel counts do not chain");
  if (layers.back().out_channels != 1) throw std::invalid_argument("last layer must produce one channel");
  if (layers.back().relu) throw std::invalid_argument("last layer must not apply ReLU");
}

template <typename T>
int BasicNetwork<T>::patch_size() const {
  int rf = 1, jump = 1;
  for (const auto& l : layers) {
    rf += (l.kernel - 1) * jump;
    jump *= l.stride;
  }
  return rf;
}

template <typename T>
int BasicNetwork<T>::stride() const {
  int s = 1;
  for (const auto& l : layers) s *= l.stride;
  return s;
}

template <typename T>
std::size_t BasicNetwork<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weights.size() + l.bias.size();
  return n;
}

template <typename T>
Dims3 BasicNetwork<T>::map_dims(Dims3 input) const {
  Dims3 d = input;
  for (const auto& l : layers) d = l.output_dims(d);
  return d;
}

template <typename T>
BasicNetwork<T> init_network(const Architecture& arch, std::uint64_t seed) {
  if (arch.layers.empty()) throw std::invalid_argument("architecture has no layers");
  if (arch.layers.back().out_channels != 1 || arch.layers.back().relu)
    throw std::invalid_argument("architecture must end in a single linear output channel");
  std::mt19937_64 rng(seed);
  BasicNetwork<T> net;
  int in = arch.in_channels;
  for (const auto& spec : arch.layers) {
    ConvLayer<T> layer(in, spec.out_channels, spec.kernel, spec.stride, spec.relu);
    const double bound = std::sqrt(6.0 / static_cast<double>(layer.fan_in()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : layer.weights) w = static_cast<T>(dist(rng));
    net.layers.push_back(std::move(layer));
    in = spec.out_channels;
  }
  net.validate();
  return net;
}

template <typename T>
NetworkGradients<T> NetworkGradients<T>::zeros_like(const BasicNetwork<T>& net) {
  NetworkGradients g;
  for (const auto& l : net.layers) {
    g.kernel.emplace_back(l.weights.size(), T(0));
    g.bias.emplace_back(l.bias.size(), T(0));
  }
  return g;
}

template <typename T>
ForwardPass<T> forward(const BasicNetwork<T>& net, Tensor<T> input) {
  ForwardPass<T> pass;
  pass.activations.reserve(net.layers.size() + 1);
  pass.activations.push_back(std::move(input));
  for (const auto& layer : net.layers) pass.activations.push_back(conv3d_forward(pass.activations.back(), layer));
  return pass;
}

template <typename T>
NetworkGradients<T> backward(const BasicNetwork<T>& net, const ForwardPass<T>& pass, const Tensor<T>& grad_output,
                             unsigned request) {
  if (pass.activations.size() != net.layers.size() + 1) throw std::invalid_argument("forward pass does not match network");
  if (!grad_output.same_shape(pass.output())) throw std::invalid_argument("grad_output shape mismatch");
  NetworkGradients<T> grads;
  grads.kernel.resize(net.layers.size());
  grads.bias.resize(net.layers.size());
  Tensor<T> g = grad_output;
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    unsigned req = request & kParameterGradient;
    if (l > 0 || (request & kInputGradient)) req |= kInputGradient;
    ConvGradients<T> cg = conv3d_backward(g, net.layers[l], pass.activations[l], pass.activations[l + 1], req);
    grads.kernel[l] = std::move(cg.kernel);
    grads.bias[l] = std::move(cg.bias);
    g = std::move(cg.input);
  }
  if (request & kInputGradient) grads.input = std::move(g);
  return grads;
}

template <typename T>
T forward_patch(const BasicNetwork<T>& net, std::span<const T> patch_pair) {
  const int p = net.patch_size();
  Tensor<T> in(1, 2, cube(p));
  if (patch_pair.size() != in.data.size()) throw std::invalid_argument("forward_patch: patch must hold 2*p^3 values");
  std::copy(patch_pair.begin(), patch_pair.end(), in.data.begin());
  const auto pass = forward(net, std::move(in));
  if (pass.output().data.size() != 1) throw std::logic_error("network does not reduce a patch to one score");
  return pass.output().data[0];
}

template <typename T>
double DissimilarityMap<T>::sum() const {
  double s = 0.0;
  for (T v : values) s += static_cast<double>(v);
  return s;
}

namespace {

template <typename T>
void check_pair(const BasicNetwork<T>& net, const Tensor<T>& pair) {
  if (pair.batch != 1 || pair.channels != 2) throw std::invalid_argument("expected a single two-channel volume");
  if (pair.dims.min() < net.patch_size()) throw std::invalid_argument("volume smaller than the network patch size");
}

template <typename T>
DissimilarityMap<T> make_map(const BasicNetwork<T>& net, const Tensor<T>& out) {
  DissimilarityMap<T> map;
  map.dims = out.dims;
  map.stride = net.stride();
  map.patch_size = net.patch_size();
  map.values = out.data;
  return map;
}

}  // namespace

template <typename T>
DissimilarityMap<T> forward_full(const BasicNetwork<T>& net, const Tensor<T>& pair) {
  check_pair(net, pair);
  Tensor<T> cur = conv3d_forward(pair, net.layers.front());
  for (std::size_t l = 1; l < net.layers.size(); ++l) cur = conv3d_forward(cur, net.layers[l]);
  return make_map(net, cur);
}

template <typename T>
Tensor<T> input_gradient(const BasicNetwork<T>& net, const Tensor<T>& pair, DissimilarityMap<T>* map) {
  check_pair(net, pair);
  const auto pass = forward(net, pair);
  if (map) *map = make_map(net, pass.output());
  Tensor<T> seed(pass.output().batch, pass.output().channels, pass.output().dims, T(1));
  return backward(net, pass, seed, kInputGradient).input;
}

template <typename T>
void sgd_step(BasicNetwork<T>& net, const NetworkGradients<T>& grads, double lr, double momentum, SgdState<T>& state) {
  if (grads.kernel.size() != net.layers.size() || grads.bias.size() != net.layers.size())
    throw std::invalid_argument("sgd_step: gradient layer count mismatch");
  if (state.kernel_velocity.empty()) {
    for (const auto& l : net.layers) {
      state.kernel_velocity.emplace_back(l.weights.size(), T(0));
      state.bias_velocity.emplace_back(l.bias.size(), T(0));
    }
  }
  auto update = [&](std::vector<T>& w, const std::vector<T>& g, std::vector<T>& v) {
    if (g.size() != w.size()) throw std::invalid_argument("sgd_step: gradient shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = static_cast<T>(momentum * v[i] - lr * g[i]);
      w[i] += v[i];
    }
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    update(net.layers[l].weights, grads.kernel[l], state.kernel_velocity[l]);
    update(net.layers[l].bias, grads.bias[l], state.bias_velocity[l]);
  }
}

// ---------------------------------------------------------------- checkpoints

void write_checkpoint(const fs::path& dir, const Network& net, const Architecture& arch, std::uint64_t seed,
                      std::int64_t step, const json& hyperparameters) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "convreg-checkpoint-1";
  manifest["architecture"] = to_json(arch);
  manifest["patch_size"] = net.patch_size();
  manifest["stride"] = net.stride();
  manifest["seed"] = seed;
  manifest["step"] = step;
  manifest["hyperparameters"] = hyperparameters;
  json tensors = json::array();
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    const std::string kname = "layer" + std::to_string(l) + ".kernel.bin";
    const std::string bname = "layer" + std::to_string(l) + ".bias.bin";
    write_f32le(dir / kname, layer.weights.data(), layer.weights.size());
    write_f32le(dir / bname, layer.bias.data(), layer.bias.size());
    tensors.push_back({{"kernel", kname},
                       {"bias", bname},
                       {"shape", {layer.out_channels, layer.in_channels, layer.kernel, layer.kernel, layer.kernel}}});
  }
  manifest["tensors"] = tensors;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Network read_checkpoint(const fs::path& dir, json* manifest_out) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("missing checkpoint manifest in " + dir.string());
  json manifest;
  try {
    in >> manifest;
    const Architecture arch = architecture_from_json(manifest.at("architecture"));
    Network net = init_network<float>(arch, 0);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      auto& layer = net.layers[l];
      layer.weights = read_f32le(dir / ("layer" + std::to_string(l) + ".kernel.bin"), layer.weights.size());
      layer.bias = read_f32le(dir / ("layer" + std::to_string(l) + ".bias.bin"), layer.bias.size());
    }
    if (manifest_out) *manifest_out = manifest;
    return net;
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  } catch (const std::invalid_argument& e) {
    throw DataError("invalid checkpoint: " + std::string(e.what()));
  }
}

#define CONVREG_INSTANTIATE_NETWORK(T)                                                                          \
  template class BasicNetwork<T>;                                                                             \
  template struct NetworkGradients<T>;                                                                        \
  template struct DissimilarityMap<T>;                                                                        \
  template BasicNetwork<T> init_network<T>(const Architecture&, std::uint64_t);                               \
  template ForwardPass<T> forward<T>(const BasicNetwork<T>&, Tensor<T>);                                      \
  template NetworkGradients<T> backward<T>(const BasicNetwork<T>&, const ForwardPass<T>&, const Tensor<T>&,   \
                                           unsigned);                                                         \
  template T forward_patch<T>(const BasicNetwork<T>&, std::span<const T>);                                    \
  template DissimilarityMap<T> forward_full<T>(const BasicNetwork<T>&, const Tensor<T>&);                     \
  template Tensor<T> input_gradient<T>(const BasicNetwork<T>&, const Tensor<T>&, DissimilarityMap<T>*);       \
  template void sgd_step<T>(BasicNetwork<T>&, const NetworkGradients<T>&, double, double, SgdState<T>&);

CONVREG_INSTANTIATE_NETWORK(float)
CONVREG_INSTANTIATE_NETWORK(double)

#undef CONVREG_INSTANTIATE_NETWORK

}  // namespace convreg
