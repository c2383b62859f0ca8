#pragma once

// Loss curves as a standalone SVG line chart: discriminator and generator
// loss against step.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "stagegen/training.hpp"

namespace stagegen {

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace detail

/// The generator curve is g_loss_adv + g_loss_l1 (the L1 column is already weighted).
inline std::string loss_plot_svg(const LossLog& log, const std::string& title = "training losses") {
  if (log.rows.empty()) throw FormatError("loss plot: the CSV has no rows");
  constexpr double W = 640, H = 400, L = 60, R = 20, T = 40, B = 50;
  std::vector<double> steps, d, g;
  for (const auto& r : log.rows) {
    steps.push_back(static_cast<double>(r.step));
    d.push_back(r.d_loss);
    g.push_back(static_cast<double>(r.g_loss_adv) + r.g_loss_l1);
  }
  for (double v : d) if (!std::isfinite(v)) throw FormatError("loss plot: non-finite d_loss");
  for (double v : g) if (!std::isfinite(v)) throw FormatError("loss plot: non-finite g_loss");
  double x0 = steps.front(), x1 = steps.back();
  if (x1 <= x0) x1 = x0 + 1;
  double y0 = std::min(*std::min_element(d.begin(), d.end()), *std::min_element(g.begin(), g.end()));
  double y1 = std::max(*std::max_element(d.begin(), d.end()), *std::max_element(g.begin(), g.end()));
  y0 = std::min(0.0, y0);
  if (y1 <= y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  auto polyline = [&](const std::vector<double>& ys, const char* color, const char* id) {
    std::string s = std::string("<polyline id=\"") + id + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i) {
      if (i) s += ' ';
      s += detail::fmt("%.2f", px(steps[i])) + "," + detail::fmt("%.2f", py(ys[i]));
    }
    return s + "\"/>\n";
  };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
  svg += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" + title + "</text>\n";
  // axes with end-point labels
  svg += "<line x1=\"60\" y1=\"350\" x2=\"620\" y2=\"350\" stroke=\"black\"/>\n";
  svg += "<line x1=\"60\" y1=\"40\" x2=\"60\" y2=\"350\" stroke=\"black\"/>\n";
  const std::string label = "font-family=\"sans-serif\" font-size=\"11\"";
  svg += "<text x=\"60\" y=\"366\" text-anchor=\"middle\" " + label + ">" + detail::fmt("%.0f", x0) + "</text>\n";
  svg += "<text x=\"620\" y=\"366\" text-anchor=\"middle\" " + label + ">" + detail::fmt("%.0f", x1) + "</text>\n";
  svg += "<text x=\"340\" y=\"390\" text-anchor=\"middle\" " + label + ">step</text>\n";
  svg += "<text x=\"54\" y=\"354\" text-anchor=\"end\" " + label + ">" + detail::fmt("%.3g", y0) + "</text>\n";
  svg += "<text x=\"54\" y=\"44\" text-anchor=\"end\" " + label + ">" + detail::fmt("%.3g", y1) + "</text>\n";
  svg += polyline(d, "#1f77b4", "d_loss");
  svg += polyline(g, "#d62728", "g_loss");
  svg += "<text x=\"480\" y=\"56\" fill=\"#1f77b4\" " + label + ">d_loss</text>\n";
  svg += "<text x=\"480\" y=\"70\" fill=\"#d62728\" " + label + ">g_loss</text>\n";
  svg += "</svg>\n";
  return svg;
}

}  // namespace stagegen
