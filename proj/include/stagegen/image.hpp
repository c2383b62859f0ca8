#pragma once

// Image preprocessing chain: RGB -> grayscale -> Sobel edge magnitude,
// bilinear resizing, and conversion to/from the generators' [-1, 1] range.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stagegen/error.hpp"
#include "stagegen/tensor.hpp"

namespace stagegen {

/// Decoded 8-bit image, row-major with interleaved channels (1 or 3).
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {
    validate();
  }
  ImageBuffer(int w, int h, int c, std::vector<std::uint8_t> px) : width(w), height(h), channels(c), pixels(std::move(px)) {
    validate();
  }

  void validate() const {
    if (channels != 1 && channels != 3) throw ShapeError("ImageBuffer: channels must be 1 or 3, got " + std::to_string(channels));
    if (width < 0 || height < 0) throw ShapeError("ImageBuffer: negative width/height");
    if (pixels.size() != static_cast<std::size_t>(width) * height * channels) {
      throw ShapeError("ImageBuffer: pixel count " + std::to_string(pixels.size()) + " != width*height*channels");
    }
  }

  std::uint8_t& at(int x, int y, int c = 0) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::uint8_t at(int x, int y, int c = 0) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  bool operator==(const ImageBuffer&) const = default;
};

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

/// ITU-R 601 luma: L = round(0.299 R + 0.587 G + 0.114 B). Single-channel input is copied.
inline ImageBuffer to_grayscale(const ImageBuffer& img) {
  img.validate();
  if (img.channels == 1) return img;
  ImageBuffer out(img.width, img.height, 1);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double l = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
    out.pixels[i] = clamp_u8(l);
  }
  return out;
}

/// 3×3 kernel used by the edge filter, correlation convention (k[dy+1][dx+1]).
struct EdgeKernels {
  int gx[3][3];
  int gy[3][3];
};

inline constexpr EdgeKernels kSobel{{{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}}, {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}}};

/// Gradient magnitude clamp(round(sqrt(gx² + gy²)), 0, 255) with replicate-edge padding.
inline ImageBuffer sobel_edges(const ImageBuffer& gray, const EdgeKernels& k = kSobel) {
  gray.validate();
  if (gray.channels != 1) throw ShapeError("sobel_edges: expected single-channel input, got " + std::to_string(gray.channels) + " channels");
  if (gray.width < 3 || gray.height < 3) {
    throw ShapeError("sobel_edges: width and height must be >= 3, got " + std::to_string(gray.width) + "x" + std::to_string(gray.height));
  }
  ImageBuffer out(gray.width, gray.height, 1);
  for (int y = 0; y < gray.height; ++y) {
    for (int x = 0; x < gray.width; ++x) {
      int gx = 0, gy = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        const int sy = std::clamp(y + dy, 0, gray.height - 1);
        for (int dx = -1; dx <= 1; ++dx) {
          const int sx = std::clamp(x + dx, 0, gray.width - 1);
          const int v = gray.at(sx, sy);
          gx += k.gx[dy + 1][dx + 1] * v;
          gy += k.gy[dy + 1][dx + 1] * v;
        }
      }
      out.at(x, y) = clamp_u8(std::sqrt(static_cast<double>(gx) * gx + static_cast<double>(gy) * gy));
    }
  }
  return out;
}

/// Bilinear resize with half-pixel-center alignment and edge clamping.
inline ImageBuffer resize_bilinear(const ImageBuffer& img, int out_w, int out_h) {
  img.validate();
  if (out_w <= 0 || out_h <= 0) throw ShapeError("resize_bilinear: output width/height must be positive");
  if (img.width == 0 || img.height == 0) throw ShapeError("resize_bilinear: empty input");
  if (out_w == img.width && out_h == img.height) return img;
  ImageBuffer out(out_w, out_h, img.channels);
  const double sx = static_cast<double>(img.width) / out_w, sy = static_cast<double>(img.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = img.at(x0, y0, c) * (1 - wx) + img.at(x1, y0, c) * wx;
        const double bottom = img.at(x0, y1, c) * (1 - wx) + img.at(x1, y1, c) * wx;
        out.at(x, y, c) = clamp_u8(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

/// Pixel p -> p/127.5 - 1, as a 1×C×H×W tensor.
inline Tensor<float> to_model_range(const ImageBuffer& img) {
  img.validate();
  Tensor<float> t({1, img.channels, img.height, img.width});
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  for (int c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) t[c * plane + i] = static_cast<float>(img.pixels[i * img.channels + c] / 127.5 - 1.0);
  }
  return t;
}

/// Inverse of to_model_range for sample `index` of an N×C×H×W tensor; values are clamped to [-1, 1].
template <class T>
ImageBuffer from_model_range(const Tensor<T>& t, std::int64_t index = 0) {
  require_shape(t, 4, "from_model_range");
  const auto c = t.dim(1), h = t.dim(2), w = t.dim(3);
  if (c != 1 && c != 3) throw ShapeError("from_model_range: channels must be 1 or 3, got " + std::to_string(c));
  if (index < 0 || index >= t.dim(0)) throw ShapeError("from_model_range: sample index out of range");
  ImageBuffer img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  const auto plane = h * w;
  const T* base = t.data().data() + index * c * plane;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = 0; i < plane; ++i) {
      const double v = std::clamp(static_cast<double>(base[ch * plane + i]), -1.0, 1.0);
      img.pixels[i * c + ch] = clamp_u8((v + 1.0) * 127.5);
    }
  }
  return img;
}

/// Stacks equally sized images into one N×C×H×W tensor in [-1, 1].
inline Tensor<float> stack_model_range(const std::vector<ImageBuffer>& images) {
  if (images.empty()) throw ShapeError("stack_model_range: no images");
  const auto& first = images.front();
  const std::size_t per = static_cast<std::size_t>(first.width) * first.height * first.channels;
  Tensor<float> out({static_cast<std::int64_t>(images.size()), first.channels, first.height, first.width});
  for (std::size_t k = 0; k < images.size(); ++k) {
    const auto& img = images[k];
    if (img.width != first.width || img.height != first.height || img.channels != first.channels) {
      throw ShapeError("stack_model_range: image " + std::to_string(k) + " differs in width/height/channels");
    }
    auto t = to_model_range(img);
    std::copy(t.values().begin(), t.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return out;
}

}  // namespace stagegen
