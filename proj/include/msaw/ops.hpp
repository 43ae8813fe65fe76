#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "msaw/errors.hpp"
#include "msaw/tape.hpp"
#include "msaw/tensor.hpp"

// Differentiable tensor operations. Every op takes the tape first and records
// its backward closure only when the tape is enabled and some input requires
// a gradient.

namespace msaw::ops {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

enum class Mode { train, eval };

namespace detail {

template <typename T>
Tensor<T> make_output(const char* op, Shape shape, std::vector<T> data, bool tracked) {
  if (!all_finite<T>(data)) throw NumericError(std::string("non-finite value produced by ") + op);
  return Tensor<T>(std::move(shape), std::move(data), tracked, nullptr);
}

template <typename T>
using ConstVectorMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using VectorMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
ConstVectorMap<T> slice(const T* p, std::size_t n) {
  return ConstVectorMap<T>(p, static_cast<Eigen::Index>(n));
}

template <typename T>
VectorMap<T> slice(T* p, std::size_t n) {
  return VectorMap<T>(p, static_cast<Eigen::Index>(n));
}

// Sum of f(0..n-1) in eight interleaved lanes. Eigen reductions peel to the
// buffer's alignment, which makes float results depend on heap addresses;
// this order depends only on n.
template <typename T, typename F>
T lane_sum(std::size_t n, F f) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += f(i + l);
  for (std::size_t l = 0; i < n; ++i, ++l) lanes[l] += f(i);
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

template <typename T>
T sum_of(const T* p, std::size_t n) {
  return lane_sum<T>(n, [p](std::size_t i) { return p[i]; });
}

template <typename T>
T dot_of(const T* a, const T* b, std::size_t n) {
  return lane_sum<T>(n, [a, b](std::size_t i) { return a[i] * b[i]; });
}

inline void require_rank(const char* op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(shape));
  }
}

/// Output columns [begin, end) whose input column ox*stride + k - pad lies
/// inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t extent, std::size_t k,
                                                       std::size_t stride, std::size_t pad) {
  std::size_t begin = 0;
  if (k < pad) begin = (pad - k + stride - 1) / stride;
  std::size_t end = 0;
  if (extent + pad > k) end = std::min(out, (extent + pad - k - 1) / stride + 1);
  return {std::min(begin, end), end};
}

template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, T* cols) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      const auto [y0, y1] = valid_range(out_h, height, ki, stride, pad);
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const auto [x0, x1] = valid_range(out_w, width, kj, stride, pad);
        T* row = cols + ((c * kh + ki) * kw + kj) * out_h * out_w;
        std::fill(row, row + y0 * out_w, T{0});
        for (std::size_t oy = y0; oy < y1; ++oy) {
          T* dst = row + oy * out_w;
          const T* src = image + (c * height + oy * stride + ki - pad) * width + kj - pad;
          std::fill(dst, dst + x0, T{0});
          if (stride == 1) {
            std::copy(src + x0, src + x1, dst + x0);
          } else {
            for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] = src[ox * stride];
          }
          std::fill(dst + x1, dst + out_w, T{0});
        }
        std::fill(row + y1 * out_w, row + out_h * out_w, T{0});
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, std::size_t out_h,
            std::size_t out_w, T* image) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      const auto [y0, y1] = valid_range(out_h, height, ki, stride, pad);
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const auto [x0, x1] = valid_range(out_w, width, kj, stride, pad);
        const T* row = cols + ((c * kh + ki) * kw + kj) * out_h * out_w;
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const T* src = row + oy * out_w;
          T* dst = image + (c * height + oy * stride + ki - pad) * width + kj - pad;
          if (stride == 1) {
            for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] += src[ox];
          } else {
            for (std::size_t ox = x0; ox < x1; ++ox) dst[ox * stride] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. No bias; see channel_bias().
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t pad) {
  detail::require_rank("conv2d input", input.shape(), 4);
  detail::require_rank("conv2d kernel", kernel.shape(), 4);
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    throw DimensionError("conv2d: input has " + std::to_string(c) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                         to_string(input.shape()));
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  const std::size_t patch = c * kh * kw, positions = oh * ow;

  std::vector<T> out_data(n * f * positions);
  std::vector<T> cols(patch * positions);
  ConstMatrixMap<T> kmat(kernel.data().data(), f, patch);
  for (std::size_t b = 0; b < n; ++b) {
    detail::im2col(input.data().data() + b * c * h * w, c, h, w, kh, kw, stride, pad, oh, ow,
                   cols.data());
    MatrixMap<T> omat(out_data.data() + b * f * positions, f, positions);
    omat.noalias() = kmat * ConstMatrixMap<T>(cols.data(), patch, positions);
  }

  const bool tracked = tape.tracks({&input, &kernel});
  Tensor<T> out = detail::make_output("conv2d", {n, f, oh, ow}, std::move(out_data), tracked);
  if (tracked) {
    tape.record("conv2d", {input, kernel}, [=]() mutable {
      if (!out.has_grad()) return;
      std::vector<T> scratch(patch * positions);
      ConstMatrixMap<T> km(kernel.data().data(), f, patch);
      for (std::size_t b = 0; b < n; ++b) {
        ConstMatrixMap<T> dout(out.grad().data() + b * f * positions, f, positions);
        if (kernel.requires_grad()) {
          detail::im2col(input.data().data() + b * c * h * w, c, h, w, kh, kw, stride, pad, oh, ow,
                         scratch.data());
          MatrixMap<T> dk(kernel.grad_buffer().data(), f, patch);
          dk.noalias() += dout * ConstMatrixMap<T>(scratch.data(), patch, positions).transpose();
        }
        if (input.requires_grad()) {
          MatrixMap<T> dcols(scratch.data(), patch, positions);
          dcols.noalias() = km.transpose() * dout;
          detail::col2im(scratch.data(), c, h, w, kh, kw, stride, pad, oh, ow,
                         input.grad_buffer().data() + b * c * h * w);
        }
      }
    });
  }
  return out;
}

/// Adds bias[c] to every element of channel c (axis 1).
template <typename T>
Tensor<T> channel_bias(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& bias) {
  if (input.rank() < 2 || bias.size() != input.dim(1)) {
    throw DimensionError("channel_bias: bias " + to_string(bias.shape()) + " vs input " +
                         to_string(input.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1), inner = input.size() / (n * c);
  std::vector<T> data(input.data().begin(), input.data().end());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = data.data() + (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bias[ch];
    }
  const bool tracked = tape.tracks({&input, &bias});
  Tensor<T> out = detail::make_output("channel_bias", input.shape(), std::move(data), tracked);
  if (tracked) {
    tape.record("channel_bias", {input, bias}, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (input.requires_grad()) {
        auto dx = input.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto db = bias.grad_buffer();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            db[ch] += detail::sum_of(g.data() + (b * c + ch) * inner, inner);
          }
      }
    });
  }
  return out;
}

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization over every axis except 1. Train mode uses batch
/// statistics and folds them into the running estimates (unbiased variance);
/// eval mode uses the running estimates only.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BatchNormState<T>& state, Mode mode) {
  if (input.rank() < 2) throw DimensionError("batch_norm: input must have rank >= 2");
  const std::size_t n = input.dim(0), c = input.dim(1), inner = input.size() / (n * c);
  if (gamma.size() != c || beta.size() != c || state.running_mean.size() != c ||
      state.running_var.size() != c) {
    throw DimensionError("batch_norm: parameter size does not match " + std::to_string(c) +
                         " channels");
  }
  if (mode == Mode::train && n < 2) {
    throw DegenerateBatchError("batch_norm: train mode needs a batch of at least 2, got 1");
  }
  const T eps = static_cast<T>(kBatchNormEpsilon);
  const T count = static_cast<T>(n * inner);
  const T* x = input.data().data();
  std::vector<T> mean(c), inv_std(c);
  if (mode == Mode::train) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    const T momentum = static_cast<T>(kBatchNormMomentum);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T total{0};
      for (std::size_t b = 0; b < n; ++b) total += detail::sum_of(x + (b * c + ch) * inner, inner);
      const T mu = total / count;
      T sq{0};
      for (std::size_t b = 0; b < n; ++b)
        sq += detail::lane_sum<T>(inner, [p = x + (b * c + ch) * inner, mu](std::size_t i) {
          return (p[i] - mu) * (p[i] - mu);
        });
      mean[ch] = mu;
      inv_std[ch] = T{1} / std::sqrt(sq / count + eps);
      rm[ch] = (T{1} - momentum) * rm[ch] + momentum * mu;
      rv[ch] = (T{1} - momentum) * rv[ch] + momentum * (sq / (count - T{1}));
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = T{1} / std::sqrt(state.running_var[ch] + eps);
    }
  }

  std::vector<T> xhat(input.size()), y(input.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * inner;
      auto xh = detail::slice(xhat.data() + off, inner);
      xh = (detail::slice(x + off, inner) - mean[ch]) * inv_std[ch];
      detail::slice(y.data() + off, inner) = xh * gamma[ch] + beta[ch];
    }

  const bool tracked = tape.tracks({&input, &gamma, &beta});
  Tensor<T> out = detail::make_output("batch_norm", input.shape(), std::move(y), tracked);
  if (tracked) {
    tape.record("batch_norm", {input, gamma, beta},
                [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (b * c + ch) * inner;
          sum_g[ch] += detail::sum_of(g + off, inner);
          sum_gx[ch] += detail::dot_of(g + off, xhat.data() + off, inner);
        }
      if (gamma.requires_grad()) {
        auto dg = gamma.grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += sum_gx[ch];
      }
      if (beta.requires_grad()) {
        auto db = beta.grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) db[ch] += sum_g[ch];
      }
      if (!input.requires_grad()) return;
      T* dx = input.grad_buffer().data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (b * c + ch) * inner;
          const T scale = gamma[ch] * inv_std[ch];
          auto d = detail::slice(dx + off, inner);
          auto gs = detail::slice(g + off, inner);
          if (mode == Mode::train) {
            const T mg = sum_g[ch] / count, mgx = sum_gx[ch] / count;
            d += scale * (gs - mg - detail::slice(xhat.data() + off, inner) * mgx);
          } else {
            d += scale * gs;
          }
        }
    });
  }
  return out;
}

/// max(x, 0); the subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& input) {
  std::vector<T> y(input.size());
  detail::slice(y.data(), y.size()) = detail::slice(input.data().data(), y.size()).max(T{0});
  const bool tracked = tape.tracks({&input});
  Tensor<T> out = detail::make_output("relu", input.shape(), std::move(y), tracked);
  if (tracked) {
    tape.record("relu", {input}, [=]() mutable {
      if (!out.has_grad()) return;
      const std::size_t len = out.size();
      auto dx = detail::slice(input.grad_buffer().data(), len);
      dx += (detail::slice(input.data().data(), len) > T{0}).select(detail::slice(out.grad().data(), len), T{0});
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  const bool tracked = tape.tracks({&a, &b});
  Tensor<T> out = detail::make_output("add", a.shape(), std::move(y), tracked);
  if (tracked) {
    tape.record("add", {a, b}, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (Tensor<T> t : {a, b}) {
        if (!t.requires_grad()) continue;
        auto d = t.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  return out;
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  const bool tracked = tape.tracks({&a, &b});
  Tensor<T> out = detail::make_output("mul", a.shape(), std::move(y), tracked);
  if (tracked) {
    tape.record("mul", {a, b}, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto d = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto d = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& input) {
  const T acc = detail::sum_of(input.data().data(), input.size());
  const bool tracked = tape.tracks({&input});
  Tensor<T> out = detail::make_output("sum", {1}, std::vector<T>{acc}, tracked);
  if (tracked) {
    tape.record("sum", {input}, [=]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (T& d : input.grad_buffer()) d += g;
    });
  }
  return out;
}

/// input[N,D] * weight[D,M] + bias[M].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  detail::require_rank("linear input", input.shape(), 2);
  detail::require_rank("linear weight", weight.shape(), 2);
  const std::size_t n = input.dim(0), d = input.dim(1), m = weight.dim(1);
  if (weight.dim(0) != d || bias.size() != m) {
    throw DimensionError("linear: input " + to_string(input.shape()) + ", weight " +
                         to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  }
  std::vector<T> y(n * m);
  MatrixMap<T> ym(y.data(), n, m);
  ym.noalias() = ConstMatrixMap<T>(input.data().data(), n, d) *
                 ConstMatrixMap<T>(weight.data().data(), d, m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t col = 0; col < m; ++col) y[r * m + col] += bias[col];

  const bool tracked = tape.tracks({&input, &weight, &bias});
  Tensor<T> out = detail::make_output("linear", {n, m}, std::move(y), tracked);
  if (tracked) {
    tape.record("linear", {input, weight, bias}, [=]() mutable {
      if (!out.has_grad()) return;
      ConstMatrixMap<T> g(out.grad().data(), n, m);
      if (input.requires_grad()) {
        MatrixMap<T>(input.grad_buffer().data(), n, d).noalias() +=
            g * ConstMatrixMap<T>(weight.data().data(), d, m).transpose();
      }
      if (weight.requires_grad()) {
        MatrixMap<T>(weight.grad_buffer().data(), d, m).noalias() +=
            ConstMatrixMap<T>(input.data().data(), n, d).transpose() * g;
      }
      if (bias.requires_grad()) {
        auto db = bias.grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t col = 0; col < m; ++col) db[col] += g(r, col);
      }
    });
  }
  return out;
}

/// Softmax over the trailing axis, computed with max subtraction.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& input) {
  const std::size_t k = input.shape().back(), rows = input.size() / k;
  std::vector<T> y(input.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = input.data().data() + r * k;
    T* p = y.data() + r * k;
    const T mx = *std::max_element(x, x + k);
    T z{0};
    for (std::size_t j = 0; j < k; ++j) z += (p[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < k; ++j) p[j] /= z;
  }
  const bool tracked = tape.tracks({&input});
  Tensor<T> out = detail::make_output("softmax", input.shape(), std::move(y), tracked);
  if (tracked) {
    tape.record("softmax", {input}, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto p = out.data();
      auto dx = input.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot{0};
        for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * p[r * k + j];
        for (std::size_t j = 0; j < k; ++j) dx[r * k + j] += p[r * k + j] * (g[r * k + j] - dot);
      }
    });
  }
  return out;
}

/// [N,C,H,W] -> [N,C], mean over the spatial extent.
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& input) {
  detail::require_rank("global_avg_pool", input.shape(), 4);
  const std::size_t n = input.dim(0), c = input.dim(1), area = input.dim(2) * input.dim(3);
  std::vector<T> y(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    y[i] = detail::sum_of(input.data().data() + i * area, area) / static_cast<T>(area);
  }
  const bool tracked = tape.tracks({&input});
  Tensor<T> out = detail::make_output("global_avg_pool", {n, c}, std::move(y), tracked);
  if (tracked) {
    tape.record("global_avg_pool", {input}, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto dx = input.grad_buffer();
      const T inv = T{1} / static_cast<T>(area);
      for (std::size_t i = 0; i < n * c; ++i) {
        T* d = dx.data() + i * area;
        for (std::size_t j = 0; j < area; ++j) d[j] += g[i] * inv;
      }
    });
  }
  return out;
}

/// Concatenates [N,D_i] tensors along axis 1.
template <typename T>
Tensor<T> concat_columns(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_columns: no inputs");
  const std::size_t n = parts.front().dim(0);
  std::size_t width = 0;
  for (const auto& p : parts) {
    detail::require_rank("concat_columns", p.shape(), 2);
    if (p.dim(0) != n) throw DimensionError("concat_columns: batch extents differ");
    width += p.dim(1);
  }
  std::vector<T> y(n * width);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t d = p.dim(1);
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(p.data().data() + r * d, d, y.data() + r * width + offset);
    offset += d;
  }
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || tape.tracks({&p});
  Tensor<T> out = detail::make_output("concat_columns", {n, width}, std::move(y), tracked);
  if (tracked) {
    tape.record("concat_columns", parts, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::size_t off = 0;
      for (Tensor<T> p : parts) {
        const std::size_t d = p.dim(1);
        if (p.requires_grad()) {
          auto dp = p.grad_buffer();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) dp[r * d + j] += g[r * width + off + j];
        }
        off += d;
      }
    });
  }
  return out;
}

/// Multiplies sample n of input[N,...] by the scalar weights[n, column].
template <typename T>
Tensor<T> scale_samples(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weights,
                        std::size_t column) {
  detail::require_rank("scale_samples weights", weights.shape(), 2);
  const std::size_t n = input.dim(0), k = weights.dim(1), inner = input.size() / n;
  if (weights.dim(0) != n || column >= k) {
    throw DimensionError("scale_samples: weights " + to_string(weights.shape()) + " vs input " +
                         to_string(input.shape()));
  }
  std::vector<T> y(input.size());
  for (std::size_t b = 0; b < n; ++b) {
    const T s = weights[b * k + column];
    for (std::size_t i = 0; i < inner; ++i) y[b * inner + i] = s * input[b * inner + i];
  }
  const bool tracked = tape.tracks({&input, &weights});
  Tensor<T> out = detail::make_output("scale_samples", input.shape(), std::move(y), tracked);
  if (tracked) {
    tape.record("scale_samples", {input, weights}, [=]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::size_t b = 0; b < n; ++b) {
        const T s = weights[b * k + column];
        if (input.requires_grad()) {
          auto dx = input.grad_buffer();
          for (std::size_t i = 0; i < inner; ++i) dx[b * inner + i] += s * g[b * inner + i];
        }
        if (weights.requires_grad()) {
          weights.grad_buffer()[b * k + column] +=
              detail::dot_of(g.data() + b * inner, input.data().data() + b * inner, inner);
        }
      }
    });
  }
  return out;
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean cross-entropy -sum_j y_j log p_j of probabilities[N,K] against one-hot
/// targets[N,K]. Probabilities are clamped to kProbabilityFloor before the log.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& probabilities, const Tensor<T>& targets) {
  detail::require_rank("cross_entropy", probabilities.shape(), 2);
  if (targets.shape() != probabilities.shape()) {
    throw DimensionError("cross_entropy: targets " + to_string(targets.shape()) +
                         " vs probabilities " + to_string(probabilities.shape()));
  }
  const std::size_t n = probabilities.dim(0), k = probabilities.dim(1);
  std::vector<std::size_t> label(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const T y = targets[r * k + j];
      if (y == T{1}) {
        ++ones;
        label[r] = j;
      } else if (y != T{0}) {
        ones = 2;
      }
    }
    if (ones != 1) throw ContractError("cross_entropy: target row " + std::to_string(r) + " is not one-hot");
  }
  const T floor = static_cast<T>(kProbabilityFloor);
  T acc{0};
  for (std::size_t r = 0; r < n; ++r) acc -= std::log(std::max(probabilities[r * k + label[r]], floor));
  acc /= static_cast<T>(n);

  const bool tracked = tape.tracks({&probabilities});
  Tensor<T> out = detail::make_output("cross_entropy", {1}, std::vector<T>{acc}, tracked);
  if (tracked) {
    tape.record("cross_entropy", {probabilities}, [=]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(n);
      auto dp = probabilities.grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        const T p = probabilities[r * k + label[r]];
        if (p > floor) dp[r * k + label[r]] -= g / p;
      }
    });
  }
  return out;
}

/// weight_a * a + weight_b * b for scalar a and b.
template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T weight_a,
                       T weight_b) {
  if (a.size() != 1 || b.size() != 1) throw DimensionError("weighted_sum: operands must be scalar");
  if (!std::isfinite(a.item()) || !std::isfinite(b.item()))
    throw NumericError("weighted_sum: non-finite operand");
  const T value = weight_a * a.item() + weight_b * b.item();
  const bool tracked = tape.tracks({&a, &b});
  Tensor<T> out = detail::make_output("weighted_sum", {1}, std::vector<T>{value}, tracked);
  if (tracked) {
    tape.record("weighted_sum", {a, b}, [=]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      if (a.requires_grad()) a.grad_buffer()[0] += weight_a * g;
      if (b.requires_grad()) b.grad_buffer()[0] += weight_b * g;
    });
  }
  return out;
}

/// [N] labels -> [N,K] one-hot rows.
template <typename T>
Tensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  std::vector<T> y(labels.size() * classes, T{0});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= classes) throw ContractError("one_hot: label out of range");
    y[r * classes + labels[r]] = T{1};
  }
  return Tensor<T>({labels.size(), classes}, std::move(y));
}

}  // namespace msaw::ops
