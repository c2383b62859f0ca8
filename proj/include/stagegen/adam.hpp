#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "stagegen/tensor.hpp"

namespace stagegen {

struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for a fixed, ordered list of parameters.
template <class T>
struct AdamState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::int64_t step_count = 0;

  AdamState() = default;
  explicit AdamState(const std::vector<Tensor<T>>& params) {
    for (const auto& p : params) {
      first_moment.emplace_back(p.values().size(), T(0));
      second_moment.emplace_back(p.values().size(), T(0));
    }
  }
};

/// One bias-corrected Adam update of a single buffer at (1-based) step `t`.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::int64_t t,
                 const AdamHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam_update: buffer sizes differ");
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] = static_cast<T>(param[i] - h.lr * m_hat / (std::sqrt(v_hat) + h.eps));
  }
}

/// Applies one Adam step to every parameter using its accumulated gradient
/// (parameters without a gradient buffer are treated as zero-gradient).
template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamHyper& h) {
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter list");
  ++state.step_count;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (state.first_moment[k].size() != p.values().size()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + std::to_string(k));
    }
    std::span<const T> g = p.grad();
    adam_update<T>(p.data(), g, state.first_moment[k], state.second_moment[k], state.step_count, h);
  }
}

template <class T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace stagegen
