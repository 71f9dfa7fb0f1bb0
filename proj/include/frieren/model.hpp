#pragma once

// Per-pixel segmentation model: a two-layer MLP vision pathway feeding a
// cosine-similarity head against frozen class embeddings.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "frieren/errors.hpp"
#include "frieren/rng.hpp"
#include "frieren/tensor.hpp"

namespace frieren {

struct ModelDims {
  std::size_t in_channels = 6;  // d_in
  std::size_t hidden = 32;      // h
  std::size_t embed = 8;        // d
  std::size_t classes = 5;      // C

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

inline constexpr double kInitialLogitScale = 10.0;

/**
 * All model parameters. `T` holds the class embeddings and is frozen; the
 * logit temperature lives in a one-element array so every parameter can be
 * visited uniformly.
 */
struct ParamSet {
  NdArray W1;     // [h x d_in]
  NdArray b1;     // [h]
  NdArray W2;     // [d x h]
  NdArray b2;     // [d]
  NdArray T;      // [C x d], frozen
  NdArray scale;  // [1]

  [[nodiscard]] ModelDims dims() const { return {W1.dim(1), W1.dim(0), W2.dim(0), T.dim(0)}; }
  [[nodiscard]] double logit_scale() const { return scale[0]; }

  /// Visits (name, array, trainable) in checkpoint order.
  template <typename F>
  void visit(F&& f) {
    f(std::string_view("W1"), W1, true);
    f(std::string_view("b1"), b1, true);
    f(std::string_view("W2"), W2, true);
    f(std::string_view("b2"), b2, true);
    f(std::string_view("T"), T, false);
    f(std::string_view("scale"), scale, true);
  }
  template <typename F>
  void visit(F&& f) const {
    f(std::string_view("W1"), W1, true);
    f(std::string_view("b1"), b1, true);
    f(std::string_view("W2"), W2, true);
    f(std::string_view("b2"), b2, true);
    f(std::string_view("T"), T, false);
    f(std::string_view("scale"), scale, true);
  }

  [[nodiscard]] std::size_t numel() const {
    std::size_t n = 0;
    visit([&](auto, const NdArray& a, bool) { n += a.size(); });
    return n;
  }

  [[nodiscard]] bool all_finite() const {
    bool ok = true;
    visit([&](auto, const NdArray& a, bool) { ok = ok && a.all_finite(); });
    return ok;
  }

  /// Zero-filled arrays of identical shapes.
  [[nodiscard]] ParamSet zeros_like() const {
    ParamSet z = *this;
    z.visit([](auto, NdArray& a, bool) { std::fill(a.vec().begin(), a.vec().end(), 0.0); });
    return z;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

inline bool same_shapes(const ParamSet& a, const ParamSet& b) {
  return a.W1.shape() == b.W1.shape() && a.b1.shape() == b.b1.shape() && a.W2.shape() == b.W2.shape() &&
         a.b2.shape() == b.b2.shape() && a.T.shape() == b.T.shape() && a.scale.shape() == b.scale.shape();
}

inline void require_same_shapes(const ParamSet& a, const ParamSet& b, const char* what) {
  if (!same_shapes(a, b)) throw ShapeError(std::string(what) + ": parameter shapes differ");
}

/// Applies f(dst, src...) elementwise over matching arrays. f receives (double& d, double s, bool trainable).
template <typename F>
void zip_arrays(ParamSet& dst, const ParamSet& src, F&& f) {
  NdArray* d[] = {&dst.W1, &dst.b1, &dst.W2, &dst.b2, &dst.T, &dst.scale};
  const NdArray* s[] = {&src.W1, &src.b1, &src.W2, &src.b2, &src.T, &src.scale};
  const bool trainable[] = {true, true, true, true, false, true};
  for (int k = 0; k < 6; ++k) {
    auto dd = d[k]->data();
    auto ss = s[k]->data();
    for (std::size_t i = 0; i < dd.size(); ++i) f(dd[i], ss[i], trainable[k]);
  }
}

/// Channel keep-mask over the hidden layer with inverted-dropout scaling.
struct Dropout {
  std::vector<std::uint8_t> keep;  // length h, 1 = channel kept
  double keep_prob = 0.5;
};

// ---------------------------------------------------------------------------
// Initialization

/// Fixed unit-norm class embeddings derived from class ids.
inline NdArray class_embeddings(std::size_t classes, std::size_t embed) {
  NdArray T({classes, embed});
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::uint64_t salt = 0;; ++salt) {
      auto row = T.row(c);
      for (std::size_t j = 0; j < embed; ++j) row[j] = hashed_normal(derive_seed({0xC1A55ULL, c, j, salt}));
      const double n = l2_norm(row);
      for (auto& x : row) x /= std::max(n, kNormEpsilon);
      bool distinct = n > 1e-6;
      for (std::size_t o = 0; o < c && distinct; ++o) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < embed; ++j) d2 += (row[j] - T.at(o, j)) * (row[j] - T.at(o, j));
        distinct = std::sqrt(d2) > 1e-3;
      }
      if (distinct) break;
      if (salt > 64) throw ShapeError("class_embeddings: cannot place distinct unit vectors in dimension " +
                                      std::to_string(embed));
    }
  }
  return T;
}

inline ParamSet init_params(std::uint64_t seed, const ModelDims& dims) {
  if (dims.in_channels == 0 || dims.hidden == 0 || dims.embed == 0 || dims.classes == 0)
    throw ShapeError("init_params: dimensions must be positive");
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kInit)}));
  auto fill = [&](NdArray& a, double r) {
    for (auto& x : a.data()) x = rng.uniform(-r, r);
  };
  ParamSet p;
  p.W1 = NdArray({dims.hidden, dims.in_channels});
  p.b1 = NdArray({dims.hidden});
  p.W2 = NdArray({dims.embed, dims.hidden});
  p.b2 = NdArray({dims.embed});
  const double r1 = std::sqrt(6.0 / static_cast<double>(dims.in_channels + dims.hidden));
  const double r2 = std::sqrt(6.0 / static_cast<double>(dims.hidden + dims.embed));
  fill(p.W1, r1);
  fill(p.b1, r1);
  fill(p.W2, r2);
  fill(p.b2, r2);
  p.T = class_embeddings(dims.classes, dims.embed);
  p.scale = NdArray({1}, kInitialLogitScale);
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

/// Activations of one forward pass, kept for the backward sweep.
struct PassCache {
  NdArray x;       // [N x d_in]
  NdArray z1;      // [N x h] pre-activation
  NdArray a;       // [N x h] post ReLU and dropout
  NdArray v;       // [N x d]
  std::vector<double> vnorm;  // [N]
  NdArray cos;     // [N x C]
  NdArray logits;  // [N x C]
  NdArray probs;   // [N x C]
  std::vector<double> drop_scale;  // [h], mask/keep_prob (all ones without dropout)
};

inline NdArray normalized_rows(const NdArray& T) {
  NdArray out = T;
  for (std::size_t c = 0; c < T.dim(0); ++c) {
    auto r = out.row(c);
    const double n = std::max(l2_norm(r), kNormEpsilon);
    for (auto& x : r) x /= n;
  }
  return out;
}

inline PassCache run_forward(const ParamSet& p, const NdArray& img, const Dropout* drop) {
  const ModelDims dims = p.dims();
  if (img.empty() || img.rank() != 3 || img.dim(2) != dims.in_channels)
    throw ShapeError("forward: image must be [H x W x " + std::to_string(dims.in_channels) + "], got " +
                     shape_str(img.shape()));
  if (drop && drop->keep.size() != dims.hidden)
    throw ShapeError("forward: dropout mask length " + std::to_string(drop->keep.size()) + " != hidden " +
                     std::to_string(dims.hidden));
  if (drop && !(drop->keep_prob > 0.0 && drop->keep_prob <= 1.0))
    throw ShapeError("forward: keep probability must lie in (0, 1]");

  const std::size_t n = img.dim(0) * img.dim(1);
  const std::size_t din = dims.in_channels, h = dims.hidden, d = dims.embed, C = dims.classes;
  PassCache c;
  c.x = img.reshaped({n, din});
  c.z1 = NdArray({n, h});
  c.a = NdArray({n, h});
  c.v = NdArray({n, d});
  c.vnorm.resize(n);
  c.cos = NdArray({n, C});
  c.logits = NdArray({n, C});
  c.drop_scale.assign(h, 1.0);
  if (drop)
    for (std::size_t k = 0; k < h; ++k) c.drop_scale[k] = drop->keep[k] ? 1.0 / drop->keep_prob : 0.0;

  const NdArray Tn = normalized_rows(p.T);
  const double s = p.logit_scale();
  for (std::size_t i = 0; i < n; ++i) {
    auto x = c.x.row(i);
    auto z = c.z1.row(i);
    auto a = c.a.row(i);
    for (std::size_t k = 0; k < h; ++k) {
      double acc = p.b1[k];
      for (std::size_t j = 0; j < din; ++j) acc += p.W1.at(k, j) * x[j];
      z[k] = acc;
      a[k] = (acc > 0.0 ? acc : 0.0) * c.drop_scale[k];
    }
    auto v = c.v.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      double acc = p.b2[j];
      for (std::size_t k = 0; k < h; ++k) acc += p.W2.at(j, k) * a[k];
      v[j] = acc;
    }
    const double nv = l2_norm(v);
    c.vnorm[i] = nv;
    const double denom = std::max(nv, kNormEpsilon);
    for (std::size_t cl = 0; cl < C; ++cl) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += v[j] * Tn.at(cl, j);
      c.cos.at(i, cl) = dot / denom;
      c.logits.at(i, cl) = s * c.cos.at(i, cl);
    }
  }
  c.probs = softmax_rows(c.logits);
  return c;
}

/// Accumulates parameter gradients of sum(dlogits * logits) into g.
inline void run_backward(const ParamSet& p, const PassCache& c, const NdArray& dlogits, ParamSet& g) {
  const ModelDims dims = p.dims();
  const std::size_t n = c.x.dim(0);
  const std::size_t din = dims.in_channels, h = dims.hidden, d = dims.embed, C = dims.classes;
  const NdArray Tn = normalized_rows(p.T);
  const double s = p.logit_scale();
  std::vector<double> du(d), dv(d), da(h);
  for (std::size_t i = 0; i < n; ++i) {
    auto dl = dlogits.row(i);
    bool any = false;
    for (double x : dl) any = any || x != 0.0;
    if (!any) continue;

    double dscale = 0.0;
    std::fill(du.begin(), du.end(), 0.0);
    for (std::size_t cl = 0; cl < C; ++cl) {
      dscale += dl[cl] * c.cos.at(i, cl);
      for (std::size_t j = 0; j < d; ++j) du[j] += s * dl[cl] * Tn.at(cl, j);
    }
    g.scale[0] += dscale;

    auto v = c.v.row(i);
    const double nv = c.vnorm[i];
    if (nv > kNormEpsilon) {
      double udu = 0.0;
      for (std::size_t j = 0; j < d; ++j) udu += (v[j] / nv) * du[j];
      for (std::size_t j = 0; j < d; ++j) dv[j] = (du[j] - (v[j] / nv) * udu) / nv;
    } else {
      for (std::size_t j = 0; j < d; ++j) dv[j] = du[j] / kNormEpsilon;
    }

    auto a = c.a.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      g.b2[j] += dv[j];
      for (std::size_t k = 0; k < h; ++k) g.W2.at(j, k) += dv[j] * a[k];
    }
    auto z = c.z1.row(i);
    auto x = c.x.row(i);
    for (std::size_t k = 0; k < h; ++k) {
      if (z[k] <= 0.0 || c.drop_scale[k] == 0.0) continue;
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += p.W2.at(j, k) * dv[j];
      const double dz = acc * c.drop_scale[k];
      g.b1[k] += dz;
      for (std::size_t j = 0; j < din; ++j) g.W1.at(k, j) += dz * x[j];
    }
  }
}

}  // namespace detail

/// Per-pixel logits [(H*W) x C]; `drop` applies inverted channel dropout to the hidden layer.
inline NdArray forward(const ParamSet& p, const NdArray& img, const Dropout* drop = nullptr) {
  return detail::run_forward(p, img, drop).logits;
}

inline NdArray predict_probs(const ParamSet& p, const NdArray& img, const Dropout* drop = nullptr) {
  return detail::run_forward(p, img, drop).probs;
}

/**
 * Records forward passes so a scalar loss built from them can be
 * differentiated. Loss code reads `probs(id)`/`logits(id)` and deposits
 * dL/dlogits with `add_logit_grad`; `backward` then sweeps every pass.
 */
class Tape {
 public:
  using PassId = std::size_t;

  Tape(const ParamSet& params, bool record) : params_(params), record_(record) {}

  PassId forward(const NdArray& img, const Dropout* drop = nullptr) {
    passes_.push_back(detail::run_forward(params_, img, drop));
    grads_.emplace_back();
    return passes_.size() - 1;
  }

  [[nodiscard]] const NdArray& probs(PassId id) const { return passes_.at(id).probs; }
  [[nodiscard]] const NdArray& logits(PassId id) const { return passes_.at(id).logits; }
  [[nodiscard]] bool recording() const noexcept { return record_; }
  [[nodiscard]] const ParamSet& params() const noexcept { return params_; }

  void add_logit_grad(PassId id, const NdArray& dlogits) {
    if (!record_) return;
    auto& g = grads_.at(id);
    if (!g) {
      g = dlogits;
      return;
    }
    if (g->shape() != dlogits.shape()) throw ShapeError("add_logit_grad: shape mismatch");
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += dlogits[i];
  }

  [[nodiscard]] ParamSet backward() const {
    ParamSet g = params_.zeros_like();
    for (std::size_t k = 0; k < passes_.size(); ++k)
      if (grads_[k]) detail::run_backward(params_, passes_[k], *grads_[k], g);
    return g;
  }

 private:
  const ParamSet& params_;
  bool record_;
  std::vector<detail::PassCache> passes_;
  std::vector<std::optional<NdArray>> grads_;
};

/// A scalar loss over any number of recorded forward passes.
using LossClosure = std::function<double(Tape&)>;

struct LossAndGrad {
  double loss = 0.0;
  ParamSet grads;
};

/// Evaluates the closure and its exact gradient. Frozen arrays get zero gradient.
inline LossAndGrad loss_and_grad(const ParamSet& p, const LossClosure& fn) {
  Tape tape(p, true);
  const double loss = fn(tape);
  if (!std::isfinite(loss)) throw DivergenceError("diverged: non-finite loss");
  LossAndGrad out{loss, tape.backward()};
  std::fill(out.grads.T.vec().begin(), out.grads.T.vec().end(), 0.0);
  return out;
}

/// Loss value only, without gradient bookkeeping.
inline double loss_value(const ParamSet& p, const LossClosure& fn) {
  Tape tape(p, false);
  return fn(tape);
}

// ---------------------------------------------------------------------------
// Updates

inline ParamSet sgd_step(const ParamSet& p, const ParamSet& grads, double lr) {
  require_same_shapes(p, grads, "sgd_step");
  ParamSet out = p;
  zip_arrays(out, grads, [lr](double& w, double g, bool trainable) {
    if (trainable) w -= lr * g;
  });
  if (!out.all_finite()) throw DivergenceError("diverged: non-finite parameters after SGD step");
  return out;
}

struct TeacherState {
  ParamSet params;
  double momentum = 0.996;
};

/// teacher <- momentum * teacher + (1 - momentum) * student, on every array.
inline TeacherState ema_update(const TeacherState& teacher, const ParamSet& student) {
  require_same_shapes(teacher.params, student, "ema_update");
  TeacherState out = teacher;
  const double g = teacher.momentum;
  zip_arrays(out.params, student, [g](double& t, double s, bool) { t = g * t + (1.0 - g) * s; });
  return out;
}

}  // namespace frieren
