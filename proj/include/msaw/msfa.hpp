#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "msaw/errors.hpp"
#include "msaw/ops.hpp"
#include "msaw/tape.hpp"
#include "msaw/tensor.hpp"

// Multi-scale feature attention: one principal feature vector per image,
// channel and scale, and a cosine-margin hinge that pulls same-class vectors
// together and pushes other-class vectors apart.

namespace msaw::msfa {

struct AttentionConfig {
  double margin = 0.5;
  std::size_t power_iterations = 20;

  void validate() const {
    if (!std::isfinite(margin) || margin < 0.0) throw ConfigError("attention margin must be finite and >= 0");
    if (power_iterations < 1) throw ConfigError("power_iterations must be >= 1");
  }
};

/// Read-only view of a [N,c,h,w] tensor as c groups, one per channel, each
/// holding the [h,w] map of every image.
template <typename T>
class ChannelGroups {
 public:
  explicit ChannelGroups(Tensor<T> features) : features_(std::move(features)) {
    ops::detail::require_rank("group_by_channel", features_.shape(), 4);
  }

  std::size_t groups() const { return features_.dim(1); }
  std::size_t members() const { return features_.dim(0); }
  std::size_t height() const { return features_.dim(2); }
  std::size_t width() const { return features_.dim(3); }

  std::span<const T> map(std::size_t channel, std::size_t image) const {
    const std::size_t area = height() * width();
    return features_.data().subspan((image * groups() + channel) * area, area);
  }

  /// Rebuilds the [N,c,h,w] tensor from the groups.
  Tensor<T> regroup() const {
    const std::size_t area = height() * width();
    std::vector<T> out(features_.size());
    for (std::size_t ch = 0; ch < groups(); ++ch)
      for (std::size_t n = 0; n < members(); ++n) {
        auto m = map(ch, n);
        std::copy(m.begin(), m.end(), out.begin() + (n * groups() + ch) * area);
      }
    return Tensor<T>(features_.shape(), std::move(out));
  }

 private:
  Tensor<T> features_;
};

template <typename T>
ChannelGroups<T> group_by_channel(const Tensor<T>& features) {
  return ChannelGroups<T>(features);
}

namespace detail {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Vector<T> start_vector(std::size_t width) {
  Vector<T> v(static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < width; ++i)
    v[static_cast<Eigen::Index>(i)] = T{1} + T{0.5} * static_cast<T>(i) / static_cast<T>(width);
  return v / v.norm();
}

/// Normalized squarings applied to the Gram matrix before iterating, so each
/// power step multiplies by G^(2^kSquarings). Twenty steps then reach maps
/// whose two leading eigenvalues differ by well under 1%.
inline constexpr std::size_t kSquarings = 5;

/// Everything the backward pass needs from one power iteration.
template <typename T>
struct PowerTrace {
  Matrix<T> centered;               // h x w
  std::vector<Matrix<T>> powers;    // G/|G|, then each squared and renormalized
  std::vector<T> power_norms;       // Frobenius norm divided out at each level
  std::vector<Vector<T>> iterates;  // v_0 .. v_iters
  std::vector<T> norms;             // |P v_t|
  T sign = T{1};
  bool degenerate = false;

  const Matrix<T>& op() const { return powers.back(); }
};

template <typename T>
PowerTrace<T> power_iterate(std::span<const T> map, std::size_t h, std::size_t w, std::size_t iters) {
  PowerTrace<T> trace;
  const auto rows = static_cast<Eigen::Index>(h), cols = static_cast<Eigen::Index>(w);
  Eigen::Map<const Matrix<T>> a(map.data(), rows, cols);
  trace.centered = a.rowwise() - a.colwise().mean();
  Matrix<T> gram = trace.centered.transpose() * trace.centered;
  trace.iterates.push_back(start_vector<T>(w));

  const T magnitude = a.cwiseAbs().maxCoeff();
  const T rms = std::sqrt(gram.trace() / static_cast<T>(h));
  const T tolerance = T{1000} * std::numeric_limits<T>::epsilon() * magnitude;
  if (rms <= tolerance) {
    trace.degenerate = true;
    return trace;
  }
  trace.power_norms.push_back(gram.norm());
  trace.powers.push_back(gram / trace.power_norms.back());
  for (std::size_t k = 0; k < kSquarings; ++k) {
    Matrix<T> sq = trace.powers.back() * trace.powers.back();
    trace.power_norms.push_back(sq.norm());
    trace.powers.push_back(sq / trace.power_norms.back());
  }
  for (std::size_t t = 0; t < iters; ++t) {
    Vector<T> u = trace.op() * trace.iterates.back();
    const T norm = u.norm();
    if (!(norm > std::numeric_limits<T>::min())) {
      trace.degenerate = true;
      trace.iterates.resize(1);
      trace.norms.clear();
      return trace;
    }
    trace.norms.push_back(norm);
    trace.iterates.push_back(u / norm);
  }
  const Vector<T>& v = trace.iterates.back();
  Eigen::Index largest = 0;
  v.cwiseAbs().maxCoeff(&largest);
  trace.sign = v[largest] < T{0} ? T{-1} : T{1};
  return trace;
}

}  // namespace detail

template <typename T>
struct PrincipalVector {
  std::vector<T> vector;
  bool degenerate = false;
};

/// Dominant eigenvector of the column covariance of a row-major [h,w] map:
/// rows are spatial samples of a w-dimensional profile. The map is centered by
/// subtracting its mean row, then power iteration runs from a fixed start
/// vector. The returned vector has unit norm and a non-negative
/// largest-magnitude entry. A zero-variance map returns the start vector with
/// the degenerate flag set.
template <typename T>
PrincipalVector<T> principal_vector(std::span<const T> map, std::size_t h, std::size_t w,
                                    std::size_t iters) {
  if (h < 2 || w < 1) throw DimensionError("principal_vector: map must have h >= 2 and w >= 1");
  if (map.size() != h * w) throw DimensionError("principal_vector: map size does not match h*w");
  if (iters < 1) throw ContractError("principal_vector: iterations must be >= 1");
  auto trace = detail::power_iterate(map, h, w, iters);
  const auto& v = trace.iterates.back();
  PrincipalVector<T> out;
  out.degenerate = trace.degenerate;
  out.vector.resize(w);
  for (std::size_t i = 0; i < w; ++i) out.vector[i] = trace.sign * v[static_cast<Eigen::Index>(i)];
  return out;
}

/// Per image and channel principal vectors of one pyramid scale.
template <typename T>
struct PrincipalVectors {
  Tensor<T> vectors;                  // [N,c,w]
  std::vector<std::uint8_t> degenerate;  // N*c flags

  std::size_t batch() const { return vectors.dim(0); }
  std::size_t channels() const { return vectors.dim(1); }
  std::size_t width() const { return vectors.dim(2); }
  std::span<const T> vector(std::size_t image, std::size_t channel) const {
    return vectors.data().subspan((image * channels() + channel) * width(), width());
  }
  bool is_degenerate(std::size_t image, std::size_t channel) const {
    return degenerate[image * channels() + channel] != 0;
  }
};

/// Differentiable principal_vector() over every map of a [N,c,h,w] tensor.
/// The gradient flows through the unrolled power iteration and the centering.
template <typename T>
PrincipalVectors<T> principal_vectors(Tape<T>& tape, const Tensor<T>& features, std::size_t iters) {
  ops::detail::require_rank("principal_vectors", features.shape(), 4);
  const std::size_t n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  if (h < 2) throw DimensionError("principal_vectors: maps need at least 2 rows");
  if (iters < 1) throw ContractError("principal_vectors: iterations must be >= 1");
  const std::size_t area = h * w;
  std::vector<detail::PowerTrace<T>> traces;
  traces.reserve(n * c);
  std::vector<T> out(n * c * w);
  std::vector<std::uint8_t> flags(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    traces.push_back(detail::power_iterate(features.data().subspan(i * area, area), h, w, iters));
    const auto& tr = traces.back();
    flags[i] = tr.degenerate ? 1 : 0;
    for (std::size_t j = 0; j < w; ++j)
      out[i * w + j] = tr.sign * tr.iterates.back()[static_cast<Eigen::Index>(j)];
  }
  const bool tracked = tape.tracks({&features});
  Tensor<T> vectors = ops::detail::make_output("principal_vectors", {n, c, w}, std::move(out), tracked);
  if (tracked) {
    tape.record("principal_vectors", {features}, [=, traces = std::move(traces)]() mutable {
      if (!vectors.has_grad()) return;
      auto g = vectors.grad();
      auto dx = features.grad_buffer();
      using Vec = detail::Vector<T>;
      using Mat = detail::Matrix<T>;
      for (std::size_t i = 0; i < n * c; ++i) {
        const auto& tr = traces[i];
        if (tr.degenerate) continue;
        Vec gv = Eigen::Map<const Vec>(g.data() + i * w, static_cast<Eigen::Index>(w)) * tr.sign;
        if (gv.squaredNorm() == T{0}) continue;
        Mat dop = Mat::Zero(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(w));
        for (std::size_t t = tr.norms.size(); t-- > 0;) {
          const Vec& next = tr.iterates[t + 1];
          Vec du = (gv - next * next.dot(gv)) / tr.norms[t];
          dop.noalias() += du * tr.iterates[t].transpose();
          gv = tr.op() * du;
        }
        // Through P_k = S / |S|, S = P_{k-1}^2, down to P_0 = G / |G|.
        for (std::size_t k = tr.powers.size(); k-- > 0;) {
          const Mat& p = tr.powers[k];
          Mat ds = (dop - p * (p.cwiseProduct(dop)).sum()) / tr.power_norms[k];
          if (k == 0) {
            dop = ds;
            break;
          }
          const Mat& prev = tr.powers[k - 1];
          dop = ds * prev + prev * ds;
        }
        Mat dcentered = tr.centered * (dop + dop.transpose());
        Eigen::Map<Mat> dmap(dx.data() + i * area, static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
        dmap += dcentered.rowwise() - dcentered.colwise().mean();
      }
    });
  }
  return PrincipalVectors<T>{vectors, std::move(flags)};
}

/// Dot product of the L2-normalized inputs.
template <typename T>
T cosine_similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  T dot{0}, na{0}, nb{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == T{0} || nb == T{0}) throw ContractError("cosine_similarity: undefined for a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), T{-1}, T{1});
}

/// max(neg1 + neg2 + margin - pos, 0).
template <typename T>
T hinge(T pos, T neg1, T neg2, T margin) {
  return std::max(neg1 + neg2 + margin - pos, T{0});
}

/// Batch positions of (anchor, positive, negative): the first two share a
/// class, the third belongs to a different class.
using Triplet = std::array<std::size_t, 3>;

/// Attention loss over every triplet, scale and channel. Each term is the
/// hinge of the three pairwise similarities; terms are averaged over channels,
/// then scales, then triplets. A channel whose map is degenerate for any of the
/// three images contributes zero.
template <typename T>
Tensor<T> attention_loss(Tape<T>& tape, const std::vector<PrincipalVectors<T>>& scales,
                         const std::vector<Triplet>& triplets, const std::vector<std::size_t>& labels,
                         T margin) {
  if (scales.empty() || triplets.empty()) throw ContractError("attention_loss: empty input");
  for (const auto& tr : triplets) {
    for (std::size_t idx : tr)
      if (idx >= labels.size()) throw ContractError("attention_loss: triplet index out of range");
    if (labels[tr[0]] != labels[tr[1]]) throw ContractError("attention_loss: first pair must share a class");
    if (labels[tr[2]] == labels[tr[0]]) throw ContractError("attention_loss: negative has the anchor's class (j == i)");
  }
  struct Term {
    std::size_t scale, channel, triplet;
    T weight;
  };
  const T per_triplet = T{1} / static_cast<T>(triplets.size());
  const T per_scale = T{1} / static_cast<T>(scales.size());
  std::vector<Term> active;
  T loss{0};
  for (std::size_t t = 0; t < triplets.size(); ++t) {
    T triplet_sum{0};
    for (std::size_t s = 0; s < scales.size(); ++s) {
      const auto& pv = scales[s];
      T scale_sum{0};
      for (std::size_t ch = 0; ch < pv.channels(); ++ch) {
        const auto [a, b, q] = triplets[t];
        if (pv.is_degenerate(a, ch) || pv.is_degenerate(b, ch) || pv.is_degenerate(q, ch)) continue;
        const T pos = cosine_similarity(pv.vector(a, ch), pv.vector(b, ch));
        const T neg1 = cosine_similarity(pv.vector(a, ch), pv.vector(q, ch));
        const T neg2 = cosine_similarity(pv.vector(b, ch), pv.vector(q, ch));
        const T term = hinge(pos, neg1, neg2, margin);
        if (term > T{0}) {
          active.push_back({s, ch, t, per_triplet * per_scale / static_cast<T>(pv.channels())});
          scale_sum += term;
        }
      }
      triplet_sum += scale_sum / static_cast<T>(pv.channels());
    }
    loss += triplet_sum * per_scale;
  }
  loss *= per_triplet;

  bool tracked = false;
  std::vector<Tensor<T>> inputs;
  for (const auto& pv : scales) {
    inputs.push_back(pv.vectors);
    tracked = tracked || tape.tracks({&pv.vectors});
  }
  Tensor<T> out = ops::detail::make_output("attention_loss", {1}, std::vector<T>{loss}, tracked);
  if (tracked) {
    tape.record("attention_loss", inputs, [=]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      // d cos(x, y) / dx = (y_hat - cos * x_hat) / |x|
      auto accumulate = [](std::span<const T> x, std::span<const T> y, T coef, std::span<T> dx) {
        T nx{0}, ny{0}, dot{0};
        for (std::size_t i = 0; i < x.size(); ++i) {
          nx += x[i] * x[i];
          ny += y[i] * y[i];
          dot += x[i] * y[i];
        }
        nx = std::sqrt(nx);
        ny = std::sqrt(ny);
        const T cos = dot / (nx * ny);
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] += coef * (y[i] / ny - cos * x[i] / nx) / nx;
      };
      for (const Term& term : active) {
        Tensor<T> vec = inputs[term.scale];
        if (!vec.requires_grad()) continue;
        const auto& pv = scales[term.scale];
        const auto [a, b, q] = triplets[term.triplet];
        const std::size_t w = pv.width();
        auto grad = vec.grad_buffer();
        auto slot = [&](std::size_t image) { return grad.subspan((image * pv.channels() + term.channel) * w, w); };
        const T coef = g * term.weight;
        auto va = pv.vector(a, term.channel), vb = pv.vector(b, term.channel), vq = pv.vector(q, term.channel);
        // -pos
        accumulate(va, vb, -coef, slot(a));
        accumulate(vb, va, -coef, slot(b));
        // +neg1
        accumulate(va, vq, coef, slot(a));
        accumulate(vq, va, coef, slot(q));
        // +neg2
        accumulate(vb, vq, coef, slot(b));
        accumulate(vq, vb, coef, slot(q));
      }
    });
  }
  return out;
}

/// Mean same-class cosine minus mean other-class cosine of the principal
/// vectors, averaged over every non-degenerate (scale, channel) pair.
template <typename T>
double separation_gap(const std::vector<PrincipalVectors<T>>& scales, const std::vector<std::size_t>& labels) {
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& pv : scales) {
    for (std::size_t ch = 0; ch < pv.channels(); ++ch) {
      double intra = 0.0, inter = 0.0;
      std::size_t n_intra = 0, n_inter = 0;
      for (std::size_t a = 0; a < pv.batch(); ++a) {
        if (pv.is_degenerate(a, ch)) continue;
        for (std::size_t b = a + 1; b < pv.batch(); ++b) {
          if (pv.is_degenerate(b, ch)) continue;
          const double s = cosine_similarity(pv.vector(a, ch), pv.vector(b, ch));
          if (labels[a] == labels[b]) {
            intra += s;
            ++n_intra;
          } else {
            inter += s;
            ++n_inter;
          }
        }
      }
      if (n_intra == 0 || n_inter == 0) continue;
      total += intra / static_cast<double>(n_intra) - inter / static_cast<double>(n_inter);
      ++counted;
    }
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

/// Pairwise similarity matrix of one channel as CSV; rows and columns are
/// sample ids. Degenerate entries are left empty.
template <typename T>
void write_similarity_csv(std::ostream& os, const PrincipalVectors<T>& pv, std::size_t channel,
                          const std::vector<std::string>& ids) {
  if (ids.size() != pv.batch()) throw ContractError("write_similarity_csv: one id per sample required");
  os << "id";
  for (const auto& id : ids) os << ',' << id;
  os << '\n';
  for (std::size_t a = 0; a < pv.batch(); ++a) {
    os << ids[a];
    for (std::size_t b = 0; b < pv.batch(); ++b) {
      os << ',';
      if (!pv.is_degenerate(a, channel) && !pv.is_degenerate(b, channel))
        os << cosine_similarity(pv.vector(a, channel), pv.vector(b, channel));
    }
    os << '\n';
  }
}

}  // namespace msaw::msfa
