#pragma once

// Procedural tiny images and the hidden attribute functions that label them.
//
// Content images are muted "scenes": a two-colour gradient background with a
// few flat shapes and mild noise. Style images are "abstract art": vivid
// palettes laid out as stripes, blobs, checkers or blocky noise. The two
// attributes are fixed smooth-ish functions of simple image statistics; the
// predictors only ever see their labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "bae/rng.hpp"
#include "bae/tensor.hpp"

namespace bae::synth {

inline constexpr std::size_t kImageSize = 16;
inline constexpr std::size_t kImageChannels = 3;

using Rgb = std::array<double, 3>;

inline Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  double m = v - c;
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

class Canvas {
 public:
  explicit Canvas(std::size_t size = kImageSize) : n_(size), px_(kImageChannels * size * size, 0.0) {}

  std::size_t size() const { return n_; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return px_[(c * n_ + y) * n_ + x]; }
  void set(std::size_t y, std::size_t x, const Rgb& rgb) {
    for (std::size_t c = 0; c < 3; ++c) at(c, y, x) = rgb[c];
  }
  void blend(std::size_t y, std::size_t x, const Rgb& rgb, double w) {
    for (std::size_t c = 0; c < 3; ++c) at(c, y, x) = (1 - w) * at(c, y, x) + w * rgb[c];
  }
  Tensor to_tensor() const {
    std::vector<double> v(px_);
    for (auto& p : v) p = std::clamp(p, 0.0, 1.0);
    return Tensor({kImageChannels, n_, n_}, std::move(v));
  }

 private:
  std::size_t n_;
  std::vector<double> px_;
};

inline Tensor content_image(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Canvas cv;
  const std::size_t n = cv.size();
  double sat = 0.8 * std::pow(u(rng), 1.3);
  Rgb a = hsv(u(rng), sat, 0.2 + 0.7 * u(rng));
  Rgb b = hsv(u(rng), sat, 0.2 + 0.7 * u(rng));
  double ang = 2 * M_PI * u(rng);
  double dx = std::cos(ang), dy = std::sin(ang);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double t = 0.5 + 0.5 * ((x / (n - 1.0) - 0.5) * dx + (y / (n - 1.0) - 0.5) * dy) * 1.4;
      t = std::clamp(t, 0.0, 1.0);
      cv.set(y, x, {a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])});
    }
  int shapes = 1 + static_cast<int>(u(rng) * 5);
  for (int s = 0; s < shapes; ++s) {
    Rgb col = hsv(u(rng), std::min(1.0, sat + 0.3 * u(rng)), 0.15 + 0.8 * u(rng));
    double cx = n * u(rng), cy = n * u(rng);
    double rx = 1.5 + 4.5 * u(rng), ry = 1.5 + 4.5 * u(rng);
    bool ellipse = u(rng) < 0.5;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        double ex = (x + 0.5 - cx) / rx, ey = (y + 0.5 - cy) / ry;
        bool inside = ellipse ? ex * ex + ey * ey <= 1.0 : std::abs(ex) <= 1.0 && std::abs(ey) <= 1.0;
        if (inside) cv.set(y, x, col);
      }
  }
  std::normal_distribution<double> noise(0.0, 0.06 * u(rng));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) cv.at(c, y, x) += noise(rng);
  return cv.to_tensor();
}

inline Tensor style_image(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Canvas cv;
  const std::size_t n = cv.size();
  double base_hue = u(rng);
  double spread = 0.1 + 0.4 * u(rng);
  double value = 0.15 + 0.8 * u(rng);
  std::array<Rgb, 3> pal;
  for (std::size_t i = 0; i < 3; ++i)
    pal[i] = hsv(base_hue + spread * (static_cast<double>(i) - 1.0), 0.3 + 0.7 * u(rng),
                 std::clamp(value + 0.35 * (u(rng) - 0.5), 0.05, 1.0));
  int kind = static_cast<int>(u(rng) * 4);
  switch (kind) {
    case 0: {  // stripes
      double freq = 1.0 + 4.0 * u(rng);
      double ang = M_PI * u(rng);
      double sharp = u(rng) < 0.5 ? 8.0 : 1.0;
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          double p = (x * std::cos(ang) + y * std::sin(ang)) / n * freq * 2 * M_PI;
          double w = 0.5 + 0.5 * std::tanh(sharp * std::sin(p));
          for (std::size_t c = 0; c < 3; ++c) cv.at(c, y, x) = (1 - w) * pal[0][c] + w * pal[1][c];
        }
      break;
    }
    case 1: {  // blobs
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) cv.set(y, x, pal[0]);
      int blobs = 3 + static_cast<int>(u(rng) * 5);
      for (int b = 0; b < blobs; ++b) {
        const Rgb& col = pal[1 + b % 2];
        double cx = n * u(rng), cy = n * u(rng), r = 1.5 + 3.5 * u(rng);
        for (std::size_t y = 0; y < n; ++y)
          for (std::size_t x = 0; x < n; ++x) {
            double d2 = ((x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy)) / (r * r);
            cv.blend(y, x, col, std::exp(-d2));
          }
      }
      break;
    }
    case 2: {  // checker
      std::size_t cell = 2 + static_cast<std::size_t>(u(rng) * 4);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) cv.set(y, x, pal[((y / cell) + (x / cell)) % 2 == 0 ? 0 : 2]);
      break;
    }
    default: {  // blocky noise over the palette
      std::size_t cell = 1 + static_cast<std::size_t>(u(rng) * 4);
      std::size_t cells = (n + cell - 1) / cell;
      std::vector<std::size_t> idx(cells * cells);
      for (auto& i : idx) i = static_cast<std::size_t>(u(rng) * 3) % 3;
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) cv.set(y, x, pal[idx[(y / cell) * cells + x / cell]]);
      break;
    }
  }
  return cv.to_tensor();
}

// ---------------------------------------------------------------------------
// Image statistics and hidden attributes

struct ImageStats {
  double chroma = 0;      // mean over pixels of max(R,G,B) - min(R,G,B)
  double edges = 0;       // mean absolute difference between 4-neighbours
  double brightness = 0;  // mean intensity
  double redness = 0;     // mean of R - (G + B) / 2
};

inline ImageStats image_stats(const Tensor& img) {
  const std::size_t h = img.dim(1), w = img.dim(2), hw = h * w;
  const auto& v = img.values();
  ImageStats s;
  for (std::size_t i = 0; i < hw; ++i) {
    double r = v[i], g = v[hw + i], b = v[2 * hw + i];
    s.chroma += std::max({r, g, b}) - std::min({r, g, b});
    s.brightness += (r + g + b) / 3.0;
    s.redness += r - 0.5 * (g + b);
  }
  s.chroma /= static_cast<double>(hw);
  s.brightness /= static_cast<double>(hw);
  s.redness /= static_cast<double>(hw);
  double e = 0;
  std::size_t pairs = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double p = v[(c * h + y) * w + x];
        if (x + 1 < w) {
          e += std::abs(v[(c * h + y) * w + x + 1] - p);
          ++pairs;
        }
        if (y + 1 < h) {
          e += std::abs(v[(c * h + y + 1) * w + x] - p);
          ++pairs;
        }
      }
  s.edges = e / static_cast<double>(pairs);
  return s;
}

/// Regression attribute ("synthetic memorability"): rewards colourful,
/// high-contrast, mid-brightness images.
inline double memorability(const Tensor& img) {
  auto s = image_stats(img);
  double drive = 4.0 * (s.chroma - 0.2) + 6.0 * (s.edges - 0.08);
  return 2.0 * std::tanh(drive) - 6.0 * (s.brightness - 0.5) * (s.brightness - 0.5) + 0.6;
}

/// Score behind the binary attribute ("synthetic scariness"): dark, red and
/// busy images score high.
inline double scariness_score(const Tensor& img) {
  auto s = image_stats(img);
  return 4.0 * (0.45 - s.brightness) + 5.0 * s.redness + 3.0 * s.edges;
}

inline constexpr double kScarinessThreshold = 1.2;

inline double scariness_label(const Tensor& img) { return scariness_score(img) > kScarinessThreshold ? 1.0 : 0.0; }

}  // namespace bae::synth
