#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "msaw/awc.hpp"
#include "msaw/model.hpp"
#include "msaw/msfa.hpp"
#include "msaw/ops.hpp"

// Central-difference checks of every backward pass, in double precision.

namespace msaw::gradcheck {

enum class Metric {
  elementwise,  // max over elements of |a - n| / max(|a|, |n|, floor)
  normwise,     // per tensor ||a - n|| / max(||a||, ||n||, floor * sqrt(size))
};

struct CaseResult {
  std::string suite;
  std::string name;
  double max_error = 0;
  std::size_t checked = 0;  // perturbed scalars
};

inline constexpr double kStep = 1e-5;
// Gradients smaller than the floor are compared in absolute terms. Rounding
// noise of a central difference is about eps * |loss| / h: 1e-11 at kStep,
// 1e-10 at kPipelineStep. The pipeline uses the smaller step so perturbations
// rarely cross a ReLU kink.
inline constexpr double kFloor = 1e-6;
inline constexpr double kPipelineStep = 1e-6;
inline constexpr double kPipelineFloor = 1e-5;

using Builder = std::function<Tensor<double>(Tape<double>&)>;

/// Compares the tape gradient of `build` with respect to each leaf against
/// central differences of the same function.
inline double compare(const std::vector<Tensor<double>>& leaves, const Builder& build, Metric metric,
                      std::size_t* checked = nullptr, double h = kStep, double floor_value = kFloor) {
  for (auto leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.clear_grad();
  }
  {
    Tape<double> tape;
    tape.backward(build(tape));
  }
  double worst = 0;
  for (auto leaf : leaves) {
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    std::vector<double> numeric(leaf.size());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      auto t1 = Tape<double>::inference();
      const double up = build(t1).item();
      values[i] = saved - h;
      auto t2 = Tape<double>::inference();
      const double down = build(t2).item();
      values[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    if (checked) *checked += values.size();
    if (metric == Metric::elementwise) {
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor_value});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
      }
    } else {
      double diff = 0, na = 0, nn = 0;
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
      }
      const double floor = floor_value * std::sqrt(static_cast<double>(numeric.size()));
      worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor}));
    }
  }
  for (auto leaf : leaves) leaf.clear_grad();
  return worst;
}

namespace detail {

inline Tensor<double> random(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = d(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Normal values pushed at least `gap` away from zero.
inline Tensor<double> away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 0.05) {
  Tensor<double> t = random(std::move(shape), rng);
  for (double& x : t.mutable_data()) x = x < 0 ? x - gap : x + gap;
  return t;
}

inline Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = d(rng);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// sum(out * r): a scalar whose gradient with respect to out is r.
inline Tensor<double> project(Tape<double>& tape, const Tensor<double>& out, const Tensor<double>& r) {
  return ops::sum(tape, ops::mul(tape, out, r));
}

}  // namespace detail

/// Every elementary op of the tensor library.
inline std::vector<CaseResult> ops_suite(std::uint64_t seed) {
  using detail::project;
  using detail::random;
  std::mt19937_64 rng(seed);
  std::vector<CaseResult> out;
  auto run = [&](const std::string& name, std::vector<Tensor<double>> leaves, const Builder& b) {
    CaseResult r{"ops", name, 0, 0};
    r.max_error = compare(leaves, b, Metric::elementwise, &r.checked);
    out.push_back(r);
  };

  {
    auto x = random({2, 2, 5, 5}, rng), k = random({3, 2, 3, 3}, rng), r = random({2, 3, 5, 5}, rng);
    run("conv2d 3x3 stride 1", {x, k}, [=](Tape<double>& t) { return project(t, ops::conv2d(t, x, k, 1, 1), r); });
  }
  {
    auto x = random({2, 3, 6, 6}, rng), k = random({2, 3, 3, 3}, rng), r = random({2, 2, 3, 3}, rng);
    run("conv2d 3x3 stride 2", {x, k}, [=](Tape<double>& t) { return project(t, ops::conv2d(t, x, k, 2, 1), r); });
  }
  {
    auto x = random({2, 3, 6, 6}, rng), k = random({4, 3, 1, 1}, rng), r = random({2, 4, 3, 3}, rng);
    run("conv2d 1x1 stride 2", {x, k}, [=](Tape<double>& t) { return project(t, ops::conv2d(t, x, k, 2, 0), r); });
  }
  {
    auto x = random({2, 3, 4, 4}, rng), b = random({3}, rng), r = random({2, 3, 4, 4}, rng);
    run("channel_bias", {x, b}, [=](Tape<double>& t) { return project(t, ops::channel_bias(t, x, b), r); });
  }
  for (auto mode : {ops::Mode::train, ops::Mode::eval}) {
    auto x = random({3, 2, 3, 3}, rng), g = detail::uniform({2}, rng, 0.5, 1.5), b = random({2}, rng);
    auto r = random({3, 2, 3, 3}, rng);
    ops::BatchNormState<double> state{detail::uniform({2}, rng, -0.5, 0.5), detail::uniform({2}, rng, 0.5, 2.0)};
    run(mode == ops::Mode::train ? "batch_norm train" : "batch_norm eval", {x, g, b}, [=](Tape<double>& t) mutable {
      return project(t, ops::batch_norm(t, x, g, b, state, mode), r);
    });
  }
  {
    auto x = detail::away_from_zero({2, 3, 4}, rng), r = random({2, 3, 4}, rng);
    run("relu", {x}, [=](Tape<double>& t) { return project(t, ops::relu(t, x), r); });
  }
  {
    auto a = random({2, 5}, rng), b = random({2, 5}, rng), r = random({2, 5}, rng);
    run("add", {a, b}, [=](Tape<double>& t) { return project(t, ops::add(t, a, b), r); });
    run("mul", {a, b}, [=](Tape<double>& t) { return project(t, ops::mul(t, a, b), r); });
    run("sum", {a}, [=](Tape<double>& t) { return ops::sum(t, a); });
  }
  {
    auto x = random({4, 5}, rng), w = random({5, 3}, rng), b = random({3}, rng), r = random({4, 3}, rng);
    run("linear", {x, w, b}, [=](Tape<double>& t) { return project(t, ops::linear(t, x, w, b), r); });
  }
  {
    auto x = random({3, 4}, rng), r = random({3, 4}, rng);
    run("softmax", {x}, [=](Tape<double>& t) { return project(t, ops::softmax(t, x), r); });
  }
  {
    auto x = random({2, 3, 4, 5}, rng), r = random({2, 3}, rng);
    run("global_avg_pool", {x}, [=](Tape<double>& t) { return project(t, ops::global_avg_pool(t, x), r); });
  }
  {
    auto a = random({3, 2}, rng), b = random({3, 4}, rng), r = random({3, 6}, rng);
    run("concat_columns", {a, b}, [=](Tape<double>& t) { return project(t, ops::concat_columns(t, {a, b}), r); });
  }
  {
    auto x = random({2, 3, 2, 2}, rng), w = random({2, 3}, rng), r = random({2, 3, 2, 2}, rng);
    run("scale_samples", {x, w}, [=](Tape<double>& t) { return project(t, ops::scale_samples(t, x, w, 1), r); });
  }
  {
    auto logits = random({4, 3}, rng);
    auto y = ops::one_hot<double>({0, 2, 1, 2}, 3);
    run("cross_entropy", {logits}, [=](Tape<double>& t) { return ops::cross_entropy(t, ops::softmax(t, logits), y); });
  }
  {
    auto a = random({1}, rng), b = random({1}, rng);
    run("weighted_sum", {a, b}, [=](Tape<double>& t) { return ops::weighted_sum(t, a, b, 0.5, 1.25); });
  }
  return out;
}

/// Principal vectors through the unrolled power iteration, and the hinge.
/// The margin is large enough that every hinge term stays active, keeping the
/// loss differentiable at the evaluation point.
inline std::vector<CaseResult> msfa_suite(std::uint64_t seed) {
  using detail::random;
  std::mt19937_64 rng(seed);
  std::vector<CaseResult> out;
  auto run = [&](const std::string& name, std::vector<Tensor<double>> leaves, const Builder& b) {
    CaseResult r{"msfa", name, 0, 0};
    r.max_error = compare(leaves, b, Metric::elementwise, &r.checked);
    out.push_back(r);
  };
  const std::vector<std::size_t> labels{0, 0, 1};
  const std::vector<msfa::Triplet> triplets{{0, 1, 2}};
  {
    auto x = random({2, 3, 6, 5}, rng), r = random({2, 3, 5}, rng);
    run("principal_vectors", {x}, [=](Tape<double>& t) {
      return detail::project(t, msfa::principal_vectors(t, x, 20).vectors, r);
    });
  }
  {
    auto v1 = random({3, 4, 5}, rng), v2 = random({3, 4, 3}, rng);
    run("attention_loss", {v1, v2}, [=](Tape<double>& t) {
      std::vector<msfa::PrincipalVectors<double>> pvs{{v1, std::vector<std::uint8_t>(12, 0)},
                                                      {v2, std::vector<std::uint8_t>(12, 0)}};
      return msfa::attention_loss(t, pvs, triplets, labels, 3.0);
    });
  }
  {
    auto x1 = random({3, 4, 8, 8}, rng), x2 = random({3, 4, 4, 4}, rng);
    run("principal_vectors + attention_loss", {x1, x2}, [=](Tape<double>& t) {
      std::vector<msfa::PrincipalVectors<double>> pvs{msfa::principal_vectors(t, x1, 20),
                                                      msfa::principal_vectors(t, x2, 20)};
      return msfa::attention_loss(t, pvs, triplets, labels, 3.0);
    });
  }
  return out;
}

namespace detail {

inline PyramidConfig small_pyramid() {
  PyramidConfig c;
  c.input_size = 16;
  c.stage_channels = {4, 6, 8};
  c.adjusted_channels = 3;
  return c;
}

}  // namespace detail

/// Weight predictor, weighted fusion and the loss composition.
inline std::vector<CaseResult> awc_suite(std::uint64_t seed) {
  using detail::random;
  std::mt19937_64 rng(seed);
  std::vector<CaseResult> out;
  auto run = [&](const std::string& name, std::vector<Tensor<double>> leaves, const Builder& b) {
    CaseResult r{"awc", name, 0, 0};
    r.max_error = compare(leaves, b, Metric::elementwise, &r.checked);
    out.push_back(r);
  };
  const PyramidConfig pc = detail::small_pyramid();
  awc::ClassifierConfig cc;
  auto params = awc::build_classifier<double>(cc, pc, rng);
  std::vector<Tensor<double>> leaves;
  params.visit([&](const std::string&, Tensor<double>& t, TensorRole role) {
    if (role == TensorRole::parameter) leaves.push_back(t);
  });
  PyramidFeatures<double> pyr;
  for (std::size_t k = 0; k < PyramidConfig::num_scales; ++k) {
    const std::size_t s = pc.scale_size(k);
    pyr.scales.push_back(random({3, pc.adjusted_channels, s, s}, rng));
  }
  pyr.final = random({3, pc.final_dim()}, rng);
  std::vector<Tensor<double>> feature_leaves(pyr.scales);
  feature_leaves.push_back(pyr.final);
  const std::vector<std::size_t> labels{0, 0, 1};
  {
    auto r = random({3, 3}, rng);
    std::vector<Tensor<double>> all = feature_leaves;
    all.insert(all.end(), leaves.begin(), leaves.end());
    run("predict_weights", all, [=](Tape<double>& t) mutable {
      return detail::project(t, awc::predict_weights(t, awc::scale_vectors(t, pyr), params, ops::Mode::train), r);
    });
  }
  {
    std::vector<Tensor<double>> all = feature_leaves;
    all.insert(all.end(), leaves.begin(), leaves.end());
    run("weights + fusion + recognition loss", all, [=](Tape<double>& t) mutable {
      auto w = awc::predict_weights(t, awc::scale_vectors(t, pyr), params, ops::Mode::train);
      auto pred = awc::fuse_and_classify(t, awc::apply_weights(t, pyr, w), params);
      return awc::recognition_loss(t, pred, labels);
    });
  }
  {
    auto a = random({1}, rng), b = random({1}, rng);
    run("total_loss", {a, b}, [=](Tape<double>& t) { return awc::total_loss(t, a, b, awc::LossWeights{}); });
  }
  return out;
}

/// Whole model on one randomized triplet: pyramid, principal vectors,
/// attention loss, adaptive weights, fusion and cross-entropy, with respect
/// to every parameter and the input images. ReLU kinks make single-element
/// differences unreliable here, so errors are measured per tensor.
inline std::vector<CaseResult> pipeline_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelConfig mc;
  mc.pyramid = detail::small_pyramid();
  Model<double> model(mc, seed);
  auto images = detail::uniform({3, 1, 16, 16}, rng, 0.05, 0.95);
  std::uniform_int_distribution<std::size_t> cls(0, 2);
  const std::size_t i = cls(rng);
  const std::size_t j = (i + 1 + cls(rng) % 2) % 3;
  const std::vector<std::size_t> labels{i, i, j};
  const std::vector<msfa::Triplet> triplets{{0, 1, 2}};
  // Zero-initialized biases put pre-activations fed by all-zero inputs exactly
  // on a ReLU kink; evaluate at a random point instead.
  std::normal_distribution<double> jitter(0.0, 0.1);
  std::vector<Tensor<double>> leaves;
  model.visit([&](const std::string&, Tensor<double>& t, TensorRole role) {
    if (role != TensorRole::parameter) return;
    if (t.rank() == 1)
      for (double& v : t.mutable_data()) v += jitter(rng);
    leaves.push_back(t);
  });
  leaves.push_back(images);
  const awc::LossWeights lw;
  Model<double>* m = &model;
  Builder build = [=](Tape<double>& t) {
    auto fwd = m->forward(t, images, ops::Mode::train);
    std::vector<msfa::PrincipalVectors<double>> pvs;
    for (const auto& s : fwd.pyramid.scales) pvs.push_back(msfa::principal_vectors(t, s, 20));
    auto att = msfa::attention_loss(t, pvs, triplets, labels, 3.0);
    auto recg = awc::recognition_loss(t, fwd.prediction, labels);
    return awc::total_loss(t, att, recg, lw);
  };
  CaseResult r{"pipeline", "model + attention + recognition", 0, 0};
  r.max_error = compare(leaves, build, Metric::normwise, &r.checked, kPipelineStep, kPipelineFloor);
  return {r};
}

inline std::vector<CaseResult> run_all(std::uint64_t seed) {
  std::vector<CaseResult> out;
  for (auto suite : {ops_suite, msfa_suite, awc_suite, pipeline_suite}) {
    auto part = suite(seed);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

}  // namespace msaw::gradcheck
