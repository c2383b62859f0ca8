#pragma once

// Differentiable layer vocabulary for the generators, discriminators and the
// embedding autoencoder. Image tensors are NCHW; every op works for float
// (training) and double (gradient checking).

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>

#include "stagegen/rng.hpp"
#include "stagegen/tensor.hpp"

namespace stagegen {

enum class Mode { Train, Eval };

inline constexpr double kNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kLeakySlope = 0.2;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::int64_t channels, height, width;  // image side of the im2col transform
  std::int64_t kh, kw, stride, pad;
  std::int64_t out_h, out_w;             // sliding-window grid

  std::int64_t col_rows() const { return channels * kh * kw; }
  std::int64_t col_cols() const { return out_h * out_w; }
};

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = img[c][oy*s - p + i][ox*s - p + j], zero outside.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * g.col_cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t y = oy * g.stride - g.pad + i;
          T* out = row + oy * g.out_w;
          if (y < 0 || y >= g.height) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + y) * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t x = ox * g.stride - g.pad + j;
            out[ox] = (x >= 0 && x < g.width) ? src[x] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back onto the image.
template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * g.col_cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t y = oy * g.stride - g.pad + i;
          if (y < 0 || y >= g.height) continue;
          T* dst = img + (c * g.height + y) * g.width;
          const T* in = row + oy * g.out_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t x = ox * g.stride - g.pad + j;
            if (x >= 0 && x < g.width) dst[x] += in[ox];
          }
        }
      }
    }
  }
}

inline void check_conv_args(std::int64_t stride, std::int64_t pad, const char* op) {
  if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0) throw ShapeError(std::string(op) + ": padding must be >= 0, got " + std::to_string(pad));
}

template <class T>
void check_bias(const std::optional<Tensor<T>>& bias, std::int64_t channels, const char* op) {
  if (bias && (bias->rank() != 1 || bias->dim(0) != channels)) {
    throw ShapeError(std::string(op) + ": bias length " + shape_str(bias->shape()) + " != output channels " +
                     std::to_string(channels));
  }
}

}  // namespace detail

/// 2-D cross-correlation. input N×C×H×W, weight O×C×Kh×Kw, zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                 std::int64_t stride = 1, std::int64_t padding = 0) {
  using namespace detail;
  require_shape(input, 4, "conv2d input");
  require_shape(weight, 4, "conv2d weight");
  check_conv_args(stride, padding, "conv2d");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d: input channels C=" + std::to_string(c) + " != weight in-channels I=" + std::to_string(weight.dim(1)));
  }
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input height/width " +
                     shape_str(input.shape()));
  }
  check_bias(bias, o, "conv2d");
  const ConvGeometry g{c, h, w, kh, kw, stride, padding, (h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1};
  const auto in_plane = c * h * w, out_plane = o * g.col_cols();

  std::vector<T> out(static_cast<std::size_t>(n * out_plane));
  std::vector<T> cols(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  ConstMatMap<T> wm(weight.data().data(), o, g.col_rows());
  for (std::int64_t b = 0; b < n; ++b) {
    im2col(input.data().data() + b * in_plane, g, cols.data());
    MatMap<T> om(out.data() + b * out_plane, o, g.col_cols());
    om.noalias() = wm * ConstMatMap<T>(cols.data(), g.col_rows(), g.col_cols());
    if (bias) {
      for (std::int64_t oc = 0; oc < o; ++oc) om.row(oc).array() += (*bias)[oc];
    }
  }

  std::vector<const Tensor<T>*> ins{&input, &weight};
  if (bias) ins.push_back(&*bias);
  return make_result<T>(
      {n, o, g.out_h, g.out_w}, std::move(out), ins, [g, n, o, in_plane, out_plane, has_bias = bias.has_value()](const Node<T>& self) {
        auto& xin = *self.parents[0];
        auto& win = *self.parents[1];
        auto dx = input_grad(self.parents[0]);
        auto dw = input_grad(self.parents[1]);
        std::span<T> db = has_bias ? input_grad(self.parents[2]) : std::span<T>{};
        std::vector<T> cols(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
        ConstMatMap<T> wm(win.value.data(), o, g.col_rows());
        for (std::int64_t b = 0; b < n; ++b) {
          ConstMatMap<T> gm(self.grad.data() + b * out_plane, o, g.col_cols());
          if (!dw.empty()) {
            im2col(xin.value.data() + b * in_plane, g, cols.data());
            MatMap<T>(dw.data(), o, g.col_rows()).noalias() += gm * ConstMatMap<T>(cols.data(), g.col_rows(), g.col_cols()).transpose();
          }
          if (!dx.empty()) {
            MatMap<T>(cols.data(), g.col_rows(), g.col_cols()).noalias() = wm.transpose() * gm;
            col2im_add(cols.data(), g, dx.data() + b * in_plane);
          }
          if (!db.empty()) {
            // Plain loops: Eigen's vectorized reductions peel by address, so
            // their summation order (and low bits) would vary between runs.
            const T* gout = self.grad.data() + b * out_plane;
            for (std::int64_t oc = 0; oc < o; ++oc) {
              T s(0);
              for (std::int64_t i = 0; i < g.col_cols(); ++i) s += gout[oc * g.col_cols() + i];
              db[oc] += s;
            }
          }
        }
      });
}

/// Transposed convolution (adjoint of conv2d). input N×I×H×W, weight I×O×Kh×Kw,
/// output N×O×((H-1)·s - 2p + Kh)×((W-1)·s - 2p + Kw).
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias,
                           std::int64_t stride = 1, std::int64_t padding = 0) {
  using namespace detail;
  require_shape(input, 4, "conv_transpose2d input");
  require_shape(weight, 4, "conv_transpose2d weight");
  check_conv_args(stride, padding, "conv_transpose2d");
  const auto n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto o = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(0) != ci) {
    throw ShapeError("conv_transpose2d: input channels C=" + std::to_string(ci) + " != weight in-channels I=" +
                     std::to_string(weight.dim(0)));
  }
  const auto oh = (h - 1) * stride - 2 * padding + kh;
  const auto ow = (w - 1) * stride - 2 * padding + kw;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: non-positive output height/width for input " + shape_str(input.shape()));
  check_bias(bias, o, "conv_transpose2d");
  // The output image is the "input" side of an im2col whose window grid is H×W.
  const ConvGeometry g{o, oh, ow, kh, kw, stride, padding, h, w};
  const auto in_plane = ci * h * w, out_plane = o * oh * ow;

  std::vector<T> out(static_cast<std::size_t>(n * out_plane), T(0));
  std::vector<T> cols(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  ConstMatMap<T> wm(weight.data().data(), ci, g.col_rows());
  for (std::int64_t b = 0; b < n; ++b) {
    MatMap<T>(cols.data(), g.col_rows(), g.col_cols()).noalias() =
        wm.transpose() * ConstMatMap<T>(input.data().data() + b * in_plane, ci, h * w);
    col2im_add(cols.data(), g, out.data() + b * out_plane);
    if (bias) {
      for (std::int64_t oc = 0; oc < o; ++oc) {
        T* plane = out.data() + b * out_plane + oc * oh * ow;
        for (std::int64_t i = 0; i < oh * ow; ++i) plane[i] += (*bias)[oc];
      }
    }
  }

  std::vector<const Tensor<T>*> ins{&input, &weight};
  if (bias) ins.push_back(&*bias);
  return make_result<T>(
      {n, o, oh, ow}, std::move(out), ins, [g, n, ci, o, h, w, in_plane, out_plane, has_bias = bias.has_value()](const Node<T>& self) {
        auto& xin = *self.parents[0];
        auto& win = *self.parents[1];
        auto dx = input_grad(self.parents[0]);
        auto dw = input_grad(self.parents[1]);
        std::span<T> db = has_bias ? input_grad(self.parents[2]) : std::span<T>{};
        std::vector<T> cols(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
        ConstMatMap<T> wm(win.value.data(), ci, g.col_rows());
        for (std::int64_t b = 0; b < n; ++b) {
          const T* gout = self.grad.data() + b * out_plane;
          im2col(gout, g, cols.data());
          ConstMatMap<T> cm(cols.data(), g.col_rows(), g.col_cols());
          if (!dx.empty()) MatMap<T>(dx.data() + b * in_plane, ci, h * w).noalias() += wm * cm;
          if (!dw.empty()) {
            MatMap<T>(dw.data(), ci, g.col_rows()).noalias() += ConstMatMap<T>(xin.value.data() + b * in_plane, ci, h * w) * cm.transpose();
          }
          if (!db.empty()) {
            const auto plane = g.height * g.width;
            for (std::int64_t oc = 0; oc < o; ++oc) {
              T s(0);
              for (std::int64_t i = 0; i < plane; ++i) s += gout[oc * plane + i];
              db[oc] += s;
            }
          }
        }
      });
}

/// Running mean/variance buffers for batch normalization (not trained by gradient).
template <class T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  RunningStats() = default;
  explicit RunningStats(std::int64_t channels) : mean(Shape{channels}), var(Tensor<T>::full(Shape{channels}, T(1))) {}
};

namespace detail {

// Normalizes groups of elements, each group being a list of contiguous
// segments. Group g's affine parameters are gamma[affine_index(g)].
template <class T>
struct NormPlan {
  std::int64_t groups;
  std::int64_t group_size;
  std::vector<std::vector<std::int64_t>> segment_starts;  // per group
  std::int64_t segment_len;
  std::vector<std::int64_t> affine_index;
};

template <class T>
NormPlan<T> batch_norm_plan(std::int64_t n, std::int64_t c, std::int64_t hw) {
  NormPlan<T> p{c, n * hw, {}, hw, {}};
  p.segment_starts.resize(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t b = 0; b < n; ++b) p.segment_starts[ch].push_back((b * c + ch) * hw);
    p.affine_index.push_back(ch);
  }
  return p;
}

template <class T>
NormPlan<T> instance_norm_plan(std::int64_t n, std::int64_t c, std::int64_t hw) {
  NormPlan<T> p{n * c, hw, {}, hw, {}};
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      p.segment_starts.push_back({(b * c + ch) * hw});
      p.affine_index.push_back(ch);
    }
  }
  return p;
}

// Shared forward/backward for normalization with given per-group mean and inverse std.
template <class T>
Tensor<T> normalize_apply(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, NormPlan<T> plan,
                          std::vector<T> mean, std::vector<T> inv_std, bool batch_statistics) {
  std::vector<T> out(input.values().size());
  const auto& x = input.values();
  for (std::int64_t g = 0; g < plan.groups; ++g) {
    const T ga = gamma[plan.affine_index[g]], be = beta[plan.affine_index[g]];
    for (auto s : plan.segment_starts[g]) {
      for (std::int64_t i = s; i < s + plan.segment_len; ++i) out[i] = (x[i] - mean[g]) * inv_std[g] * ga + be;
    }
  }
  return make_result<T>(input.shape(), std::move(out), {&input, &gamma, &beta},
                        [plan = std::move(plan), mean = std::move(mean), inv_std = std::move(inv_std), batch_statistics](const Node<T>& self) {
                          const auto& x = self.parents[0]->value;
                          const auto& gamma = self.parents[1]->value;
                          auto dx = input_grad(self.parents[0]);
                          auto dgamma = input_grad(self.parents[1]);
                          auto dbeta = input_grad(self.parents[2]);
                          const auto& dy = self.grad;
                          const T m = static_cast<T>(plan.group_size);
                          for (std::int64_t g = 0; g < plan.groups; ++g) {
                            T sum_dy(0), sum_dy_xhat(0);
                            for (auto s : plan.segment_starts[g]) {
                              for (std::int64_t i = s; i < s + plan.segment_len; ++i) {
                                const T xhat = (x[i] - mean[g]) * inv_std[g];
                                sum_dy += dy[i];
                                sum_dy_xhat += dy[i] * xhat;
                              }
                            }
                            const auto a = plan.affine_index[g];
                            if (!dgamma.empty()) dgamma[a] += sum_dy_xhat;
                            if (!dbeta.empty()) dbeta[a] += sum_dy;
                            if (dx.empty()) continue;
                            const T scale = gamma[a] * inv_std[g];
                            for (auto s : plan.segment_starts[g]) {
                              for (std::int64_t i = s; i < s + plan.segment_len; ++i) {
                                if (batch_statistics) {
                                  const T xhat = (x[i] - mean[g]) * inv_std[g];
                                  dx[i] += scale * (dy[i] - sum_dy / m - xhat * sum_dy_xhat / m);
                                } else {
                                  dx[i] += scale * dy[i];
                                }
                              }
                            }
                          }
                        });
}

template <class T>
void group_moments(const std::vector<T>& x, const NormPlan<T>& plan, std::vector<T>& mean, std::vector<T>& var) {
  mean.assign(static_cast<std::size_t>(plan.groups), T(0));
  var.assign(static_cast<std::size_t>(plan.groups), T(0));
  for (std::int64_t g = 0; g < plan.groups; ++g) {
    // two-pass in double for stability
    double s = 0.0;
    for (auto st : plan.segment_starts[g]) {
      for (std::int64_t i = st; i < st + plan.segment_len; ++i) s += x[i];
    }
    const double mu = s / static_cast<double>(plan.group_size);
    double ss = 0.0;
    for (auto st : plan.segment_starts[g]) {
      for (std::int64_t i = st; i < st + plan.segment_len; ++i) ss += (x[i] - mu) * (x[i] - mu);
    }
    mean[g] = static_cast<T>(mu);
    var[g] = static_cast<T>(ss / static_cast<double>(plan.group_size));
  }
}

template <class T>
void check_norm_args(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, const char* op) {
  require_shape(input, 4, op);
  if (input.dim(0) == 0) throw ShapeError(std::string(op) + ": batch size N=0");
  const auto c = input.dim(1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError(std::string(op) + ": gamma/beta length must equal channels C=" + std::to_string(c));
  }
}

}  // namespace detail

/// Batch normalization over (N, H, W) per channel. Train mode normalizes with
/// batch statistics (biased variance) and updates the running stats by
/// momentum with the unbiased variance; eval mode uses the running stats.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& running, Mode mode,
                       double momentum = kBatchNormMomentum, double eps = kNormEps) {
  using namespace detail;
  check_norm_args(input, gamma, beta, "batch_norm2d");
  const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (running.mean.numel() != c || running.var.numel() != c) {
    throw ShapeError("batch_norm2d: running stats length must equal channels C=" + std::to_string(c));
  }
  auto plan = batch_norm_plan<T>(n, c, hw);
  std::vector<T> mean, var, inv_std(static_cast<std::size_t>(c));
  if (mode == Mode::Train) {
    group_moments(input.values(), plan, mean, var);
    const double count = static_cast<double>(n * hw);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double unbiased = count > 1 ? var[ch] * count / (count - 1) : var[ch];
      running.mean[ch] = static_cast<T>((1 - momentum) * running.mean[ch] + momentum * mean[ch]);
      running.var[ch] = static_cast<T>((1 - momentum) * running.var[ch] + momentum * unbiased);
    }
  } else {
    mean = running.mean.values();
    var = running.var.values();
  }
  for (std::int64_t ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(var[ch] + static_cast<T>(eps));
  return normalize_apply(input, gamma, beta, std::move(plan), std::move(mean), std::move(inv_std), mode == Mode::Train);
}

/// Instance normalization: statistics per (sample, channel), affine per channel.
template <class T>
Tensor<T> instance_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = kNormEps) {
  using namespace detail;
  check_norm_args(input, gamma, beta, "instance_norm2d");
  auto plan = instance_norm_plan<T>(input.dim(0), input.dim(1), input.dim(2) * input.dim(3));
  std::vector<T> mean, var;
  group_moments(input.values(), plan, mean, var);
  std::vector<T> inv_std(var.size());
  for (std::size_t g = 0; g < var.size(); ++g) inv_std[g] = T(1) / std::sqrt(var[g] + static_cast<T>(eps));
  return normalize_apply(input, gamma, beta, std::move(plan), std::move(mean), std::move(inv_std), true);
}

namespace detail {

// Elementwise op whose derivative is a function of (input, output).
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& x, F f, D df) {
  std::vector<T> out(x.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, [df](const Node<T>& self) {
    auto dx = input_grad(self.parents[0]);
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = kLeakySlope) {
  const T s = static_cast<T>(slope);
  return detail::unary(x, [s](T v) { return v > T(0) ? v : s * v; }, [s](T v, T) { return v > T(0) ? T(1) : s; });
}

/// Hyperbolic tangent kept strictly inside (-1, 1): results that round to
/// ±1 in T are pulled back to the nearest representable interior value.
template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  static constexpr T kEdge = T(1) - std::numeric_limits<T>::epsilon() / 2;
  return detail::unary(x, [](T v) { return std::clamp(std::tanh(v), -kEdge, kEdge); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// Inverted dropout: in train mode zeroes each element with probability
/// `rate` and rescales survivors by 1/(1-rate); identity in eval mode.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.values().size());
  for (auto& m : mask) m = keep(rng) ? scale : T(0);
  std::vector<T> out(mask.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [mask = std::move(mask)](const detail::Node<T>& self) {
    auto dx = detail::input_grad(self.parents[0]);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * mask[i];
  });
}

/// Reflection padding of the two spatial dims (edge pixel not repeated).
template <class T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, std::int64_t pad) {
  require_shape(x, 4, "reflect_pad2d");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (pad < 0 || pad >= h || pad >= w) {
    throw ShapeError("reflect_pad2d: pad " + std::to_string(pad) + " must be < height/width of " + shape_str(x.shape()));
  }
  const auto oh = h + 2 * pad, ow = w + 2 * pad;
  auto reflect = [](std::int64_t i, std::int64_t len) {
    if (i < 0) return -i;
    if (i >= len) return 2 * (len - 1) - i;
    return i;
  };
  std::vector<std::int64_t> src(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y) {
    for (std::int64_t xx = 0; xx < ow; ++xx) src[y * ow + xx] = reflect(y - pad, h) * w + reflect(xx - pad, w);
  }
  std::vector<T> out(static_cast<std::size_t>(n * c * oh * ow));
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t i = 0; i < oh * ow; ++i) out[p * oh * ow + i] = x[p * h * w + src[i]];
  }
  return detail::make_result<T>({n, c, oh, ow}, std::move(out), {&x}, [src = std::move(src), n, c, h, w, oh, ow](const detail::Node<T>& self) {
    auto dx = detail::input_grad(self.parents[0]);
    for (std::int64_t p = 0; p < n * c; ++p) {
      for (std::int64_t i = 0; i < oh * ow; ++i) dx[p * h * w + src[i]] += self.grad[p * oh * ow + i];
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](const detail::Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      auto d = detail::input_grad(self.parents[k]);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  const T f = static_cast<T>(s);
  std::vector<T> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * f;
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [f](const detail::Node<T>& self) {
    auto d = detail::input_grad(self.parents[0]);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * f;
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s(0);
  for (auto v : a.values()) s += v;
  return detail::make_result<T>({1}, {s}, {&a}, [](const detail::Node<T>& self) {
    auto d = detail::input_grad(self.parents[0]);
    for (auto& v : d) v += self.grad[0];
  });
}

/// Concatenates two N×C×H×W tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a, 4, "concat_channels");
  require_shape(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: N/H/W mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<T> out(static_cast<std::size_t>(n * (ca + cb) * hw));
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  return detail::make_result<T>({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {&a, &b}, [n, ca, cb, hw](const detail::Node<T>& self) {
    auto da = detail::input_grad(self.parents[0]);
    auto db = detail::input_grad(self.parents[1]);
    for (std::int64_t i = 0; i < n; ++i) {
      const T* g = self.grad.data() + i * (ca + cb) * hw;
      if (!da.empty()) {
        for (std::int64_t k = 0; k < ca * hw; ++k) da[i * ca * hw + k] += g[k];
      }
      if (!db.empty()) {
        for (std::int64_t k = 0; k < cb * hw; ++k) db[i * cb * hw + k] += g[ca * hw + k];
      }
    }
  });
}

/// Adds a per-(sample, channel) value N×C to every pixel of x (N×C×H×W).
template <class T>
Tensor<T> add_channelwise(const Tensor<T>& x, const Tensor<T>& v) {
  require_shape(x, 4, "add_channelwise input");
  require_shape(v, 2, "add_channelwise vector");
  if (v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1)) {
    throw ShapeError("add_channelwise: vector " + shape_str(v.shape()) + " does not match N×C of " + shape_str(x.shape()));
  }
  const auto nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.values());
  for (std::int64_t p = 0; p < nc; ++p) {
    for (std::int64_t i = 0; i < hw; ++i) out[p * hw + i] += v[p];
  }
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &v}, [nc, hw](const detail::Node<T>& self) {
    auto dx = detail::input_grad(self.parents[0]);
    auto dv = detail::input_grad(self.parents[1]);
    for (std::int64_t p = 0; p < nc; ++p) {
      T s(0);
      for (std::int64_t i = 0; i < hw; ++i) {
        const T g = self.grad[p * hw + i];
        s += g;
        if (!dx.empty()) dx[p * hw + i] += g;
      }
      if (!dv.empty()) dv[p] += s;
    }
  });
}

/// Fully connected layer: x N×In, weight Out×In, bias Out.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias) {
  using namespace detail;
  require_shape(x, 2, "linear input");
  require_shape(weight, 2, "linear weight");
  const auto n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: input features " + std::to_string(in) + " != weight in-features " + std::to_string(weight.dim(1)));
  }
  check_bias(bias, out_f, "linear");
  std::vector<T> out(static_cast<std::size_t>(n * out_f));
  MatMap<T> om(out.data(), n, out_f);
  om.noalias() = ConstMatMap<T>(x.data().data(), n, in) * ConstMatMap<T>(weight.data().data(), out_f, in).transpose();
  if (bias) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < out_f; ++j) out[i * out_f + j] += (*bias)[j];
    }
  }
  std::vector<const Tensor<T>*> ins{&x, &weight};
  if (bias) ins.push_back(&*bias);
  return make_result<T>({n, out_f}, std::move(out), ins, [n, in, out_f, has_bias = bias.has_value()](const Node<T>& self) {
    ConstMatMap<T> gm(self.grad.data(), n, out_f);
    auto dx = input_grad(self.parents[0]);
    auto dw = input_grad(self.parents[1]);
    if (!dx.empty()) MatMap<T>(dx.data(), n, in).noalias() += gm * ConstMatMap<T>(self.parents[1]->value.data(), out_f, in);
    if (!dw.empty()) MatMap<T>(dw.data(), out_f, in).noalias() += gm.transpose() * ConstMatMap<T>(self.parents[0]->value.data(), n, in);
    if (has_bias) {
      auto db = input_grad(self.parents[2]);
      for (std::int64_t j = 0; j < out_f && !db.empty(); ++j) {
        T s(0);
        for (std::int64_t i = 0; i < n; ++i) s += self.grad[i * out_f + j];
        db[j] += s;
      }
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return detail::make_result<T>(std::move(shape), x.values(), {&x}, [](const detail::Node<T>& self) {
    auto d = detail::input_grad(self.parents[0]);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
  });
}

/// Mean binary cross-entropy on logits: softplus(z) - t·z, evaluated as
/// max(z,0) - t·z + log1p(exp(-|z|)). Targets must lie in [0, 1].
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " + shape_str(targets.shape()));
  }
  if (logits.numel() == 0) throw ShapeError("bce_with_logits: empty input");
  for (auto t : targets.values()) {
    if (!(t >= T(0) && t <= T(1))) throw ConfigError("bce_with_logits: target outside [0,1]: " + std::to_string(t));
  }
  double total = 0.0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const double z = logits[i], t = targets[i];
    total += std::max(z, 0.0) - t * z + std::log1p(std::exp(-std::abs(z)));
  }
  const T loss = static_cast<T>(total / static_cast<double>(logits.numel()));
  return detail::make_result<T>({1}, {loss}, {&logits, &targets}, [](const detail::Node<T>& self) {
    const auto& z = self.parents[0]->value;
    const auto& t = self.parents[1]->value;
    const T inv_n = T(1) / static_cast<T>(z.size());
    const T g = self.grad[0];
    auto dz = detail::input_grad(self.parents[0]);
    auto dt = detail::input_grad(self.parents[1]);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const T sig = z[i] >= T(0) ? T(1) / (T(1) + std::exp(-z[i])) : std::exp(z[i]) / (T(1) + std::exp(z[i]));
      if (!dz.empty()) dz[i] += g * (sig - t[i]) * inv_n;
      if (!dt.empty()) dt[i] += -g * z[i] * inv_n;
    }
  });
}

template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, T target) {
  return bce_with_logits(logits, Tensor<T>::full(logits.shape(), target));
}

/// Mean absolute error. The subgradient at an exact tie is 0.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  if (pred.numel() == 0) throw ShapeError("l1_loss: empty input");
  double total = 0.0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) total += std::abs(static_cast<double>(pred[i]) - static_cast<double>(target[i]));
  const T loss = static_cast<T>(total / static_cast<double>(pred.numel()));
  return detail::make_result<T>({1}, {loss}, {&pred, &target}, [](const detail::Node<T>& self) {
    const auto& p = self.parents[0]->value;
    const auto& t = self.parents[1]->value;
    const T g = self.grad[0] / static_cast<T>(p.size());
    auto dp = detail::input_grad(self.parents[0]);
    auto dt = detail::input_grad(self.parents[1]);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T s = p[i] > t[i] ? T(1) : (p[i] < t[i] ? T(-1) : T(0));
      if (!dp.empty()) dp[i] += g * s;
      if (!dt.empty()) dt[i] -= g * s;
    }
  });
}

/// Mean squared error.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  if (pred.numel() == 0) throw ShapeError("mse_loss: empty input");
  double total = 0.0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    total += d * d;
  }
  const T loss = static_cast<T>(total / static_cast<double>(pred.numel()));
  return detail::make_result<T>({1}, {loss}, {&pred, &target}, [](const detail::Node<T>& self) {
    const auto& p = self.parents[0]->value;
    const auto& t = self.parents[1]->value;
    const T g = T(2) * self.grad[0] / static_cast<T>(p.size());
    auto dp = detail::input_grad(self.parents[0]);
    auto dt = detail::input_grad(self.parents[1]);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T d = p[i] - t[i];
      if (!dp.empty()) dp[i] += g * d;
      if (!dt.empty()) dt[i] -= g * d;
    }
  });
}

}  // namespace stagegen
