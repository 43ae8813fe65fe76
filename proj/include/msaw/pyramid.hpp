#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "msaw/errors.hpp"
#include "msaw/ops.hpp"
#include "msaw/tape.hpp"
#include "msaw/tensor.hpp"

namespace msaw {

enum class TensorRole { parameter, buffer };

/// Visitor over named model tensors, used by the optimizer and checkpoints.
template <typename T>
using TensorVisitor = std::function<void(const std::string& name, Tensor<T>& tensor, TensorRole role)>;

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma, beta;
  ops::BatchNormState<T> state;

  static BatchNormParams create(std::size_t channels) {
    return {Tensor<T>({channels}, T{1}, true), Tensor<T>({channels}, T{0}, true),
            {Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{1})}};
  }

  Tensor<T> apply(Tape<T>& tape, const Tensor<T>& x, ops::Mode mode) {
    return ops::batch_norm(tape, x, gamma, beta, state, mode);
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma, TensorRole::parameter);
    fn(prefix + ".beta", beta, TensorRole::parameter);
    fn(prefix + ".running_mean", state.running_mean, TensorRole::buffer);
    fn(prefix + ".running_var", state.running_var, TensorRole::buffer);
  }
};

/// Kaiming-normal tensor: N(0, 2 / fan_in).
template <typename T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> data(numel(shape));
  for (T& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

/// Convolution without bias followed by batch norm.
template <typename T>
struct ConvBn {
  Tensor<T> weight;
  BatchNormParams<T> bn;
  std::size_t stride = 1, pad = 0;

  static ConvBn create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                       std::mt19937_64& rng) {
    return {kaiming<T>({out, in, kernel, kernel}, in * kernel * kernel, rng),
            BatchNormParams<T>::create(out), stride, kernel / 2};
  }

  Tensor<T> apply(Tape<T>& tape, const Tensor<T>& x, ops::Mode mode) {
    return bn.apply(tape, ops::conv2d(tape, x, weight, stride, pad), mode);
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& fn) {
    fn(prefix + ".weight", weight, TensorRole::parameter);
    bn.visit(prefix + ".bn", fn);
  }
};

/// Two 3x3 conv+BN layers with a ReLU between them and a 1x1 projection
/// shortcut; the first conv and the shortcut carry the stride.
template <typename T>
struct ResidualBlock {
  ConvBn<T> conv1, conv2, shortcut;

  static ResidualBlock create(std::size_t in, std::size_t out, std::size_t stride, std::mt19937_64& rng) {
    ResidualBlock block;
    block.conv1 = ConvBn<T>::create(in, out, 3, stride, rng);
    block.conv2 = ConvBn<T>::create(out, out, 3, 1, rng);
    block.shortcut = ConvBn<T>::create(in, out, 1, stride, rng);
    return block;
  }

  Tensor<T> apply(Tape<T>& tape, const Tensor<T>& x, ops::Mode mode) {
    Tensor<T> y = ops::relu(tape, conv1.apply(tape, x, mode));
    y = conv2.apply(tape, y, mode);
    return ops::relu(tape, ops::add(tape, y, shortcut.apply(tape, x, mode)));
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& fn) {
    conv1.visit(prefix + ".conv1", fn);
    conv2.visit(prefix + ".conv2", fn);
    shortcut.visit(prefix + ".shortcut", fn);
  }
};

struct PyramidConfig {
  std::size_t input_size = 64;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t adjusted_channels = 16;

  static constexpr std::size_t num_scales = 3;

  void validate() const {
    if (stage_channels.size() != num_scales) throw ConfigError("pyramid needs exactly 3 stage channel counts");
    for (std::size_t c : stage_channels)
      if (c == 0) throw ConfigError("stage channel counts must be positive");
    if (adjusted_channels < 1) throw ConfigError("adjusted_channels must be >= 1");
    if (input_size < 16 || input_size % 8 != 0)
      throw ConfigError("input_size must be a multiple of 8 and at least 16");
  }

  /// Spatial extent of scale k (0-based).
  std::size_t scale_size(std::size_t k) const { return input_size >> (k + 1); }
  std::size_t final_dim() const { return stage_channels.back(); }
};

/// The per-scale maps after channel adjustment plus the pooled deep feature.
template <typename T>
struct PyramidFeatures {
  std::vector<Tensor<T>> scales;  // [N,c,h_k,w_k]
  Tensor<T> final;                // [N,D]
};

template <typename T>
struct PyramidParams {
  PyramidConfig config;
  ConvBn<T> stem;
  std::vector<ResidualBlock<T>> stages;
  std::vector<Tensor<T>> adjust_weight;  // [c, C_k, 1, 1]
  std::vector<Tensor<T>> adjust_bias;    // [c]

  void visit(const TensorVisitor<T>& fn) {
    stem.visit("stem", fn);
    for (std::size_t k = 0; k < stages.size(); ++k) {
      const std::string id = std::to_string(k + 1);
      stages[k].visit("stage" + id, fn);
      fn("adjust" + id + ".weight", adjust_weight[k], TensorRole::parameter);
      fn("adjust" + id + ".bias", adjust_bias[k], TensorRole::parameter);
    }
  }
};

/// Deterministically initialized extractor parameters. Draws from rng in a
/// fixed order.
template <typename T>
PyramidParams<T> build_pyramid(const PyramidConfig& config, std::mt19937_64& rng) {
  config.validate();
  PyramidParams<T> p;
  p.config = config;
  const std::size_t stem_out = config.stage_channels.front();
  p.stem = ConvBn<T>::create(1, stem_out, 3, 1, rng);
  std::size_t in = stem_out;
  for (std::size_t k = 0; k < PyramidConfig::num_scales; ++k) {
    const std::size_t out = config.stage_channels[k];
    p.stages.push_back(ResidualBlock<T>::create(in, out, 2, rng));
    p.adjust_weight.push_back(kaiming<T>({config.adjusted_channels, out, 1, 1}, out, rng));
    p.adjust_bias.push_back(Tensor<T>({config.adjusted_channels}, T{0}, true));
    in = out;
  }
  return p;
}

template <typename T>
PyramidParams<T> build_pyramid(const PyramidConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return build_pyramid<T>(config, rng);
}

/// images[N,1,S,S] with values in [0,1].
template <typename T>
PyramidFeatures<T> pyramid_forward(Tape<T>& tape, PyramidParams<T>& p, const Tensor<T>& images, ops::Mode mode) {
  const std::size_t s = p.config.input_size;
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != s || images.dim(3) != s) {
    throw DimensionError("pyramid input must be [N,1," + std::to_string(s) + "," + std::to_string(s) +
                         "], got " + to_string(images.shape()));
  }
  for (T v : images.data())
    if (v < T{0} || v > T{1}) throw ContractError("pyramid input values must lie in [0,1]");

  PyramidFeatures<T> out;
  Tensor<T> x = ops::relu(tape, p.stem.apply(tape, images, mode));
  for (std::size_t k = 0; k < p.stages.size(); ++k) {
    x = p.stages[k].apply(tape, x, mode);
    Tensor<T> adjusted = ops::conv2d(tape, x, p.adjust_weight[k], 1, 0);
    out.scales.push_back(ops::relu(tape, ops::channel_bias(tape, adjusted, p.adjust_bias[k])));
  }
  out.final = ops::global_avg_pool(tape, x);
  return out;
}

}  // namespace msaw
