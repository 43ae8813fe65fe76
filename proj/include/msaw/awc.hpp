#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "msaw/errors.hpp"
#include "msaw/ops.hpp"
#include "msaw/pyramid.hpp"
#include "msaw/tape.hpp"
#include "msaw/tensor.hpp"

// Adaptive-weighted classifier: per-sample softmax weights over the pyramid
// scales, weighted fusion with the deep feature, and the loss terms.

namespace msaw::awc {

enum class Weighting { adaptive, uniform };

struct ClassifierConfig {
  std::size_t classes = 3;
  Weighting weighting = Weighting::adaptive;
  bool use_final = true;
};

struct LossWeights {
  double attention = 0.5;    // lambda1
  double recognition = 1.0;  // lambda2

  void validate() const {
    if (!(attention >= 0.0) || !(recognition >= 0.0) || !std::isfinite(attention) || !std::isfinite(recognition))
      throw ConfigError("loss weights must be finite and >= 0");
    if (attention == 0.0 && recognition == 0.0) throw ConfigError("loss weights cannot both be zero");
  }
};

/// FC (c -> 1) followed by a one-channel batch norm.
template <typename T>
struct WeightPredictor {
  Tensor<T> weight;  // [c,1]
  Tensor<T> bias;    // [1]
  BatchNormParams<T> bn;

  void visit(const std::string& prefix, const TensorVisitor<T>& fn) {
    fn(prefix + ".fc.weight", weight, TensorRole::parameter);
    fn(prefix + ".fc.bias", bias, TensorRole::parameter);
    bn.visit(prefix + ".bn", fn);
  }
};

template <typename T>
struct ClassifierParams {
  ClassifierConfig config;
  std::vector<WeightPredictor<T>> predictors;  // one per scale
  Tensor<T> head_weight;                       // [S*c (+D), K]
  Tensor<T> head_bias;                         // [K]

  void visit(const TensorVisitor<T>& fn) {
    for (std::size_t k = 0; k < predictors.size(); ++k) predictors[k].visit("wp" + std::to_string(k + 1), fn);
    fn("head.weight", head_weight, TensorRole::parameter);
    fn("head.bias", head_bias, TensorRole::parameter);
  }
};

template <typename T>
ClassifierParams<T> build_classifier(const ClassifierConfig& config, const PyramidConfig& pyramid,
                                     std::mt19937_64& rng) {
  if (config.classes < 2) throw ConfigError("classifier needs at least 2 classes");
  ClassifierParams<T> p;
  p.config = config;
  const std::size_t c = pyramid.adjusted_channels;
  for (std::size_t k = 0; k < PyramidConfig::num_scales; ++k) {
    p.predictors.push_back({kaiming<T>({c, 1}, c, rng), Tensor<T>({1}, T{0}, true), BatchNormParams<T>::create(1)});
  }
  const std::size_t width = PyramidConfig::num_scales * c + (config.use_final ? pyramid.final_dim() : 0);
  p.head_weight = kaiming<T>({width, config.classes}, width, rng);
  p.head_bias = Tensor<T>({config.classes}, T{0}, true);
  return p;
}

/// Spatial GAP of every scale: [N,c,h,w] -> [N,c].
template <typename T>
std::vector<Tensor<T>> scale_vectors(Tape<T>& tape, const PyramidFeatures<T>& pyr) {
  std::vector<Tensor<T>> out;
  for (const auto& s : pyr.scales) out.push_back(ops::global_avg_pool(tape, s));
  return out;
}

/// Per scale one score BN(FC(fv)); the scores of each sample go through a
/// softmax. Returns [N,S] weights.
template <typename T>
Tensor<T> predict_weights(Tape<T>& tape, const std::vector<Tensor<T>>& fvs, ClassifierParams<T>& p, ops::Mode mode) {
  if (fvs.size() != p.predictors.size()) throw DimensionError("predict_weights: one vector per scale expected");
  std::vector<Tensor<T>> scores;
  for (std::size_t k = 0; k < fvs.size(); ++k) {
    auto& wp = p.predictors[k];
    scores.push_back(wp.bn.apply(tape, ops::linear(tape, fvs[k], wp.weight, wp.bias), mode));
  }
  return ops::softmax(tape, ops::concat_columns(tape, scores));
}

/// Constant 1/S weights for the uniform-weights ablation.
template <typename T>
Tensor<T> uniform_weights(std::size_t batch, std::size_t scales) {
  return Tensor<T>({batch, scales}, T{1} / static_cast<T>(scales));
}

/// Scale k of sample n multiplied by weights[n,k]; the final feature is passed
/// through untouched.
template <typename T>
PyramidFeatures<T> apply_weights(Tape<T>& tape, const PyramidFeatures<T>& pyr, const Tensor<T>& weights) {
  if (weights.rank() != 2 || weights.dim(1) != pyr.scales.size())
    throw DimensionError("apply_weights: weights " + to_string(weights.shape()) + " do not match the scale count");
  PyramidFeatures<T> out;
  for (std::size_t k = 0; k < pyr.scales.size(); ++k)
    out.scales.push_back(ops::scale_samples(tape, pyr.scales[k], weights, k));
  out.final = pyr.final;
  return out;
}

template <typename T>
struct Prediction {
  Tensor<T> logits;         // [N,K]
  Tensor<T> probabilities;  // [N,K]

  std::size_t predicted(std::size_t n) const {
    const std::size_t k = probabilities.dim(1);
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[n * k + j] > logits[n * k + best]) best = j;
    return best;
  }
};

/// GAP of each weighted scale, concatenated with the deep feature, then a
/// fully connected layer and softmax.
template <typename T>
Prediction<T> fuse_and_classify(Tape<T>& tape, const PyramidFeatures<T>& weighted, ClassifierParams<T>& p) {
  std::vector<Tensor<T>> parts = scale_vectors(tape, weighted);
  if (p.config.use_final) parts.push_back(weighted.final);
  Tensor<T> fused = ops::concat_columns(tape, parts);
  if (fused.dim(1) != p.head_weight.dim(0))
    throw ConfigError("fused width " + std::to_string(fused.dim(1)) + " does not match the classifier head");
  Prediction<T> out;
  out.logits = ops::linear(tape, fused, p.head_weight, p.head_bias);
  out.probabilities = ops::softmax(tape, out.logits);
  return out;
}

/// Mean cross-entropy of the true class.
template <typename T>
Tensor<T> recognition_loss(Tape<T>& tape, const Prediction<T>& pred, const Tensor<T>& one_hot_labels) {
  return ops::cross_entropy(tape, pred.probabilities, one_hot_labels);
}

template <typename T>
Tensor<T> recognition_loss(Tape<T>& tape, const Prediction<T>& pred, const std::vector<std::size_t>& labels) {
  const std::size_t k = pred.probabilities.dim(1);
  for (std::size_t label : labels)
    if (label >= k) throw ConfigError("label " + std::to_string(label) + " outside the " + std::to_string(k) + " classifier classes");
  return recognition_loss(tape, pred, ops::one_hot<T>(labels, k));
}

/// lambda1 * L_att + lambda2 * L_recg.
template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& attention, const Tensor<T>& recognition, const LossWeights& lw) {
  return ops::weighted_sum(tape, attention, recognition, static_cast<T>(lw.attention), static_cast<T>(lw.recognition));
}

}  // namespace msaw::awc
