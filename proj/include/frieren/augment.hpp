#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "frieren/model.hpp"
#include "frieren/rng.hpp"
#include "frieren/tensor.hpp"

namespace frieren {

struct AugmentConfig {
  double flip_prob = 0.5;
  double sigma_weak = 0.02;
  double sigma_strong = 0.1;
  double gain_lo = 0.7;
  double gain_hi = 1.3;
  double gray_prob = 0.2;
  double drop_prob = 0.5;  // p_d; 0 disables feature dropout
  double cutmix_prob = 0.5;
  bool strong_labeled = false;  // labeled images train on strong1 instead of the weak view

  /// Every perturbation switched off.
  static AugmentConfig identity() { return {0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0}; }
};

struct Geometry {
  bool flipped = false;
};

struct ViewBundle {
  NdArray weak;
  NdArray strong1;
  NdArray strong2;
  Geometry geometry;
  std::optional<Dropout> dropout1;
  std::optional<Dropout> dropout2;  // bitwise complement of dropout1
};

/// Mirrors an [H x W x ch] image (or [H x W] map) left to right.
inline NdArray hflip(const NdArray& img) {
  const std::size_t H = img.dim(0), W = img.dim(1);
  const std::size_t ch = img.rank() == 3 ? img.dim(2) : 1;
  NdArray out(img.shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t k = 0; k < ch; ++k) out[(y * W + x) * ch + k] = img[(y * W + (W - 1 - x)) * ch + k];
  return out;
}

/// Applies the bundle geometry to per-pixel labels (row-major H x W).
inline std::vector<int> apply_geometry(std::span<const int> labels, std::size_t H, std::size_t W, const Geometry& g) {
  std::vector<int> out(labels.begin(), labels.end());
  if (!g.flipped) return out;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out[y * W + x] = labels[y * W + (W - 1 - x)];
  return out;
}

namespace detail {

inline NdArray make_strong(const NdArray& weak, Rng& rng, const AugmentConfig& cfg) {
  const std::size_t ch = weak.dim(2);
  const std::size_t n = weak.size() / ch;
  std::vector<double> gain(ch);
  for (auto& g : gain) g = cfg.gain_lo == cfg.gain_hi ? cfg.gain_lo : rng.uniform(cfg.gain_lo, cfg.gain_hi);
  const bool gray = cfg.gray_prob > 0.0 && rng.bernoulli(cfg.gray_prob);
  NdArray s(weak.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t k = 0; k < ch; ++k) {
      s[i * ch + k] = gain[k] * weak[i * ch + k];
      mean += s[i * ch + k];
    }
    mean /= static_cast<double>(ch);
    for (std::size_t k = 0; k < ch; ++k) {
      if (gray) s[i * ch + k] = mean;
      s[i * ch + k] += rng.normal(cfg.sigma_strong);
    }
  }
  return s;
}

}  // namespace detail

/**
 * Weak view plus two strong views sharing its geometry, and a pair of
 * complementary hidden-channel dropout masks of length `hidden`.
 */
inline ViewBundle make_views(const NdArray& img, Rng& rng, const AugmentConfig& cfg, std::size_t hidden) {
  if (img.empty() || img.rank() != 3) throw ShapeError("make_views: expected a nonempty [H x W x ch] image");
  ViewBundle b;
  b.geometry.flipped = cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob);
  b.weak = b.geometry.flipped ? hflip(img) : img;
  for (auto& x : b.weak.data()) x += rng.normal(cfg.sigma_weak);
  b.strong1 = detail::make_strong(b.weak, rng, cfg);
  b.strong2 = detail::make_strong(b.weak, rng, cfg);
  if (cfg.drop_prob > 0.0 && hidden > 0) {
    Dropout d1{std::vector<std::uint8_t>(hidden), 1.0 - cfg.drop_prob};
    Dropout d2{std::vector<std::uint8_t>(hidden), cfg.drop_prob};
    for (std::size_t k = 0; k < hidden; ++k) {
      d1.keep[k] = rng.bernoulli(1.0 - cfg.drop_prob) ? 1 : 0;
      d2.keep[k] = d1.keep[k] ? 0 : 1;
    }
    b.dropout1 = std::move(d1);
    b.dropout2 = std::move(d2);
  }
  return b;
}

/// Half-open pixel rectangle [y0, y1) x [x0, x1); empty when either side has zero length.
struct Box {
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  [[nodiscard]] bool contains(std::size_t y, std::size_t x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

struct CutMixResult {
  NdArray strong1;
  NdArray strong2;
  std::vector<std::uint8_t> from_b;  // per pixel, 1 where B supplies the value
  Box box;
};

inline CutMixResult cutmix_with_box(const ViewBundle& a, const ViewBundle& b, const Box& box) {
  if (a.strong1.shape() != b.strong1.shape()) throw ShapeError("cutmix: image shapes differ");
  const std::size_t H = a.strong1.dim(0), W = a.strong1.dim(1), ch = a.strong1.dim(2);
  CutMixResult r{a.strong1, a.strong2, std::vector<std::uint8_t>(H * W, 0), box};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (!box.contains(y, x)) continue;
      const std::size_t i = y * W + x;
      r.from_b[i] = 1;
      for (std::size_t k = 0; k < ch; ++k) {
        r.strong1[i * ch + k] = b.strong1[i * ch + k];
        r.strong2[i * ch + k] = b.strong2[i * ch + k];
      }
    }
  return r;
}

/// Pastes a uniformly drawn rectangle of B's strong views into A's.
inline CutMixResult cutmix(const ViewBundle& a, const ViewBundle& b, Rng& rng) {
  if (a.strong1.shape() != b.strong1.shape()) throw ShapeError("cutmix: image shapes differ");
  const auto H = static_cast<std::int64_t>(a.strong1.dim(0));
  const auto W = static_cast<std::int64_t>(a.strong1.dim(1));
  auto span_of = [&](std::int64_t n) {
    auto p = rng.integer(0, n), q = rng.integer(0, n);
    if (p > q) std::swap(p, q);
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(p), static_cast<std::size_t>(q));
  };
  const auto [y0, y1] = span_of(H);
  const auto [x0, x1] = span_of(W);
  return cutmix_with_box(a, b, Box{y0, y1, x0, x1});
}

}  // namespace frieren
