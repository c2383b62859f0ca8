#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "stagegen/tensor.hpp"

namespace stagegen {

struct GradCheckOptions {
  double eps = 1e-6;
  /// Relative error denominators never drop below floor_fraction × max|numeric| of that input.
  double floor_fraction = 1e-3;
  /// Check at most this many coordinates per input (0 = all), sampled with `seed`.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients of a scalar-valued graph with central
/// finite differences, in double precision. `graph` must rebuild the graph
/// from the given inputs on every call.
inline GradCheckReport grad_check_report(const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& graph,
                                         std::vector<Tensor<double>>& inputs, const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  auto out = graph(inputs);
  if (out.numel() != 1) throw ShapeError("grad_check: graph must return a scalar, got " + shape_str(out.shape()));
  out.backward();

  GradCheckReport report;
  std::mt19937_64 rng(opt.seed);
  for (auto& in : inputs) {
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    std::vector<std::size_t> coords(static_cast<std::size_t>(in.numel()));
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords_per_input && coords.size() > opt.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_input);
    }
    std::vector<double> numeric(coords.size());
    {
      NoGradGuard no_grad;
      for (std::size_t k = 0; k < coords.size(); ++k) {
        const auto i = coords[k];
        const double orig = in[i];
        in[i] = orig + opt.eps;
        const double up = graph(inputs).item();
        in[i] = orig - opt.eps;
        const double down = graph(inputs).item();
        in[i] = orig;
        numeric[k] = (up - down) / (2 * opt.eps);
      }
    }
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double floor = std::max(opt.floor_fraction * scale, 1e-12);
    for (std::size_t k = 0; k < coords.size(); ++k) {
      const double a = analytic[coords[k]], n = numeric[k];
      const double denom = std::max({std::abs(a), std::abs(n), floor});
      report.max_relative_error = std::max(report.max_relative_error, std::abs(a - n) / denom);
    }
    report.coords_checked += coords.size();
  }
  return report;
}

inline double grad_check(const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& graph,
                         std::vector<Tensor<double>>& inputs, const GradCheckOptions& opt = {}) {
  return grad_check_report(graph, inputs, opt).max_relative_error;
}

}  // namespace stagegen
