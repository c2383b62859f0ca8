#pragma once

// Independent reference implementations used only by tests. They are
// deliberately naive (direct loops over the defining formulas) and share no
// code with the library's implementations.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

struct Image4 {
  std::int64_t n, c, h, w;
  std::vector<double> v;
  double& at(std::int64_t a, std::int64_t b, std::int64_t y, std::int64_t x) { return v[((a * c + b) * h + y) * w + x]; }
  double at(std::int64_t a, std::int64_t b, std::int64_t y, std::int64_t x) const { return v[((a * c + b) * h + y) * w + x]; }
};

// Six nested loops (plus kernel taps) straight from the definition of cross-correlation.
inline Image4 conv2d(const Image4& x, const std::vector<double>& wt, std::int64_t o, std::int64_t kh, std::int64_t kw,
                     const std::vector<double>* bias, std::int64_t stride, std::int64_t pad) {
  const std::int64_t oh = (x.h + 2 * pad - kh) / stride + 1, ow = (x.w + 2 * pad - kw) / stride + 1;
  Image4 out{x.n, o, oh, ow, std::vector<double>(static_cast<std::size_t>(x.n * o * oh * ow), 0.0)};
  for (std::int64_t b = 0; b < x.n; ++b)
    for (std::int64_t oc = 0; oc < o; ++oc)
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          double s = bias ? (*bias)[oc] : 0.0;
          for (std::int64_t ic = 0; ic < x.c; ++ic)
            for (std::int64_t i = 0; i < kh; ++i)
              for (std::int64_t j = 0; j < kw; ++j) {
                const std::int64_t y = oy * stride - pad + i, xx = ox * stride - pad + j;
                if (y < 0 || y >= x.h || xx < 0 || xx >= x.w) continue;
                s += x.at(b, ic, y, xx) * wt[((oc * x.c + ic) * kh + i) * kw + j];
              }
          out.at(b, oc, oy, ox) = s;
        }
  return out;
}

// Transposed convolution via zero insertion: dilate the input by `stride`,
// pad by k-1-p, and correlate with the spatially flipped, channel-swapped kernel.
// weight layout I×O×kh×kw.
inline Image4 conv_transpose2d_zero_stuff(const Image4& x, const std::vector<double>& wt, std::int64_t o, std::int64_t kh,
                                          std::int64_t kw, std::int64_t stride, std::int64_t pad) {
  const std::int64_t dh = (x.h - 1) * stride + 1, dw = (x.w - 1) * stride + 1;
  const std::int64_t ph = kh - 1 - pad, pw = kw - 1 - pad;  // requires pad <= k-1
  const std::int64_t sh = dh + 2 * ph, sw = dw + 2 * pw;
  Image4 stuffed{x.n, x.c, sh, sw, std::vector<double>(static_cast<std::size_t>(x.n * x.c * sh * sw), 0.0)};
  for (std::int64_t b = 0; b < x.n; ++b)
    for (std::int64_t c = 0; c < x.c; ++c)
      for (std::int64_t y = 0; y < x.h; ++y)
        for (std::int64_t xx = 0; xx < x.w; ++xx) stuffed.at(b, c, ph + y * stride, pw + xx * stride) = x.at(b, c, y, xx);
  std::vector<double> flipped(static_cast<std::size_t>(o * x.c * kh * kw));
  for (std::int64_t ic = 0; ic < x.c; ++ic)
    for (std::int64_t oc = 0; oc < o; ++oc)
      for (std::int64_t i = 0; i < kh; ++i)
        for (std::int64_t j = 0; j < kw; ++j)
          flipped[((oc * x.c + ic) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] = wt[((ic * o + oc) * kh + i) * kw + j];
  return conv2d(stuffed, flipped, o, kh, kw, nullptr, 1, 0);
}

// Sobel magnitude straight from the definition, replicate padding via index clamping.
// Row-major single-channel pixels in, same layout out.
inline std::vector<std::uint8_t> sobel(const std::vector<std::uint8_t>& g, int w, int h) {
  const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  std::vector<std::uint8_t> out(g.size());
  auto px = [&](int x, int y) {
    x = x < 0 ? 0 : (x >= w ? w - 1 : x);
    y = y < 0 ? 0 : (y >= h ? h - 1 : y);
    return static_cast<long>(g[y * w + x]);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      long gx = 0, gy = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          gx += kx[i][j] * px(x + j - 1, y + i - 1);
          gy += kx[j][i] * px(x + j - 1, y + i - 1);  // transposed kernel
        }
      const double m = std::round(std::sqrt(static_cast<double>(gx * gx + gy * gy)));
      out[y * w + x] = static_cast<std::uint8_t>(m > 255 ? 255 : m);
    }
  return out;
}

inline double bce_naive(double z, double t) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return -t * std::log(s) - (1 - t) * std::log(1 - s);
}

// Textbook Adam, written out longhand.
struct AdamRef {
  double lr, b1, b2, eps;
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& p, const std::vector<double>& g) {
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      p[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

}  // namespace oracle
