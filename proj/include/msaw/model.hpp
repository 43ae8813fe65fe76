#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msaw/awc.hpp"
#include "msaw/errors.hpp"
#include "msaw/pyramid.hpp"

namespace msaw {

struct ModelConfig {
  PyramidConfig pyramid;
  awc::ClassifierConfig classifier;
};

template <typename T>
struct ForwardResult {
  PyramidFeatures<T> pyramid;  // unweighted scales, input to the attention loss
  Tensor<T> weights;           // [N,3]
  awc::Prediction<T> prediction;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  TensorRole role;
};

/// Feature pyramid plus adaptive-weighted classifier.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    std::mt19937_64 rng(seed);
    pyramid_ = build_pyramid<T>(config.pyramid, rng);
    classifier_ = awc::build_classifier<T>(config.classifier, config.pyramid, rng);
  }

  const ModelConfig& config() const { return config_; }
  PyramidParams<T>& pyramid() { return pyramid_; }
  awc::ClassifierParams<T>& classifier() { return classifier_; }

  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& images, ops::Mode mode) {
    ForwardResult<T> out;
    out.pyramid = pyramid_forward(tape, pyramid_, images, mode);
    const std::size_t n = images.dim(0);
    if (config_.classifier.weighting == awc::Weighting::uniform) {
      out.weights = awc::uniform_weights<T>(n, out.pyramid.scales.size());
    } else {
      out.weights = awc::predict_weights(tape, awc::scale_vectors(tape, out.pyramid), classifier_, mode);
    }
    out.prediction = awc::fuse_and_classify(tape, awc::apply_weights(tape, out.pyramid, out.weights), classifier_);
    return out;
  }

  void visit(const TensorVisitor<T>& fn) {
    pyramid_.visit(fn);
    classifier_.visit(fn);
  }

  /// Every named tensor in a fixed order; handles alias the model's storage.
  std::vector<NamedTensor<T>> named_tensors() {
    std::vector<NamedTensor<T>> out;
    visit([&](const std::string& name, Tensor<T>& t, TensorRole role) { out.push_back({name, t, role}); });
    return out;
  }

  void zero_grad() {
    visit([](const std::string&, Tensor<T>& t, TensorRole) { t.clear_grad(); });
  }

  /// Copies values from a model of the same configuration, possibly of another
  /// precision.
  template <typename U>
  void copy_from(Model<U>& other) {
    auto src = other.named_tensors();
    auto dst = named_tensors();
    if (src.size() != dst.size()) throw ConfigError("copy_from: models have different layouts");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape())
        throw ConfigError("copy_from: tensor " + dst[i].name + " does not match");
      auto out = dst[i].tensor.mutable_data();
      auto in = src[i].tensor.data();
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(in[j]);
    }
  }

 private:
  ModelConfig config_;
  PyramidParams<T> pyramid_;
  awc::ClassifierParams<T> classifier_;
};

}  // namespace msaw
