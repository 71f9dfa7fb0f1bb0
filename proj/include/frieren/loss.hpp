#pragma once

// Training objectives. Every term reduces to a weighted per-pixel negative
// log-likelihood against fixed targets, so each has a scalar form over
// probability maps and a differentiable form over Tape passes.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "frieren/model.hpp"
#include "frieren/tensor.hpp"

namespace frieren {

inline constexpr double kProbClamp = 1e-12;

/// Number of times a target probability fell below kProbClamp (process-wide).
inline std::atomic<std::uint64_t>& prob_clamp_events() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

inline double clamped_nll(double p) {
  if (p < kProbClamp) {
    prob_clamp_events().fetch_add(1, std::memory_order_relaxed);
    return -std::log(kProbClamp);
  }
  return -std::log(p);
}

struct PseudoLabels {
  std::vector<int> labels;
  std::vector<double> conf;
  std::vector<std::uint8_t> mask;
  double tau = 0.0;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::size_t masked_in() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

/// Per-pixel argmax label, max-probability confidence and the mask conf >= tau.
inline PseudoLabels make_pseudo_labels(const NdArray& weak_probs, double tau) {
  auto am = argmax_with_conf(weak_probs);
  PseudoLabels pl;
  pl.tau = tau;
  pl.mask.resize(am.conf.size());
  for (std::size_t i = 0; i < am.conf.size(); ++i) pl.mask[i] = am.conf[i] >= tau ? 1 : 0;
  pl.labels = std::move(am.labels);
  pl.conf = std::move(am.conf);
  return pl;
}

/// Picks, per pixel, A's or B's pseudo-label according to a CutMix provenance map (1 = from B).
inline PseudoLabels mix_pseudo_labels(const PseudoLabels& a, const PseudoLabels& b,
                                      std::span<const std::uint8_t> from_b) {
  if (a.size() != b.size() || a.size() != from_b.size()) throw ShapeError("mix_pseudo_labels: size mismatch");
  PseudoLabels out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!from_b[i]) continue;
    out.labels[i] = b.labels[i];
    out.conf[i] = b.conf[i];
    out.mask[i] = b.mask[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pixel targets shared by the scalar and differentiable forms

/// Loss = sum_i weight[i] * -ln p(label[i]); pixels with zero weight are inactive.
struct PixelTargets {
  std::vector<int> labels;
  std::vector<double> weights;
};

inline void check_labels(const NdArray& probs, std::span<const int> labels) {
  require_rank2(probs, "loss");
  if (labels.size() != probs.dim(0)) throw ShapeError("loss: label count does not match pixel count");
  const auto C = static_cast<int>(probs.dim(1));
  for (int y : labels)
    if (y < 0 || y >= C) throw ShapeError("loss: label out of range");
}

/// OHEM selection: weight 1/k on the k = ceil(keep * N) largest per-pixel losses.
/// Ties in loss are broken toward the lower pixel index.
inline PixelTargets ohem_targets(const NdArray& probs, std::span<const int> labels, double ohem_keep,
                                 double scale = 1.0) {
  check_labels(probs, labels);
  if (!(ohem_keep > 0.0 && ohem_keep <= 1.0)) throw ShapeError("supervised_ce: ohem_keep must lie in (0, 1]");
  const std::size_t n = labels.size();
  PixelTargets t{std::vector<int>(labels.begin(), labels.end()), std::vector<double>(n, 0.0)};
  if (ohem_keep >= 1.0) {
    std::fill(t.weights.begin(), t.weights.end(), scale / static_cast<double>(n));
    return t;
  }
  const auto k = std::min<std::size_t>(
      n, std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(ohem_keep * static_cast<double>(n) - 1e-12))));
  std::vector<double> per(n);
  for (std::size_t i = 0; i < n; ++i) per[i] = -std::log(std::max(probs.at(i, labels[i]), kProbClamp));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return per[a] > per[b]; });
  for (std::size_t j = 0; j < k; ++j) t.weights[idx[j]] = scale / static_cast<double>(k);
  return t;
}

/// Consistency targets: pseudo-label with weight mask/N_p, scaled.
inline PixelTargets masked_targets(const PseudoLabels& pl, double scale = 1.0) {
  const std::size_t n = pl.size();
  PixelTargets t{pl.labels, std::vector<double>(n, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    if (pl.mask[i]) t.weights[i] = scale / static_cast<double>(n);
  return t;
}

inline double weighted_nll(const NdArray& probs, const PixelTargets& t) {
  check_labels(probs, t.labels);
  double s = 0.0;
  for (std::size_t i = 0; i < t.labels.size(); ++i)
    if (t.weights[i] != 0.0) s += t.weights[i] * clamped_nll(probs.at(i, t.labels[i]));
  return s;
}

/// Differentiable weighted NLL on a recorded pass. Clamped pixels carry no gradient.
inline double weighted_nll(Tape& tape, Tape::PassId id, const PixelTargets& t) {
  const NdArray& probs = tape.probs(id);
  const double value = weighted_nll(probs, t);
  if (tape.recording()) {
    NdArray dl(probs.shape());
    for (std::size_t i = 0; i < t.labels.size(); ++i) {
      const double w = t.weights[i];
      if (w == 0.0 || probs.at(i, t.labels[i]) < kProbClamp) continue;
      auto p = probs.row(i);
      auto d = dl.row(i);
      for (std::size_t c = 0; c < p.size(); ++c) d[c] = w * p[c];
      d[t.labels[i]] -= w;
    }
    tape.add_logit_grad(id, dl);
  }
  return value;
}

// ---------------------------------------------------------------------------
// Scalar loss terms over probability maps

/// Mean pixel cross-entropy, optionally restricted to the hardest ohem_keep fraction.
inline double supervised_ce(const NdArray& probs, std::span<const int> labels, double ohem_keep = 1.0) {
  return weighted_nll(probs, ohem_targets(probs, labels, ohem_keep));
}

/// (1/N_p) sum_i mask_i * -ln p_strong(label_i). Normalized by all pixels, not masked ones.
inline double consistency_loss(const NdArray& strong_probs, const PseudoLabels& pl) {
  return weighted_nll(strong_probs, masked_targets(pl));
}

struct DualTerms {
  double s1 = 0.0;
  double s2 = 0.0;
};

inline DualTerms dual_consistency(const NdArray& strong1_probs, const NdArray& strong2_probs, const PseudoLabels& pl) {
  return {consistency_loss(strong1_probs, pl), consistency_loss(strong2_probs, pl)};
}

/// Teacher pseudo-labels at tau_t supervising the student's strong-view prediction.
inline double teacher_loss(const NdArray& student_strong_probs, const NdArray& teacher_weak_probs, double tau_t) {
  if (student_strong_probs.shape() != teacher_weak_probs.shape()) throw ShapeError("teacher_loss: shape mismatch");
  return consistency_loss(student_strong_probs, make_pseudo_labels(teacher_weak_probs, tau_t));
}

/// Same form as teacher_loss with the frozen prior as the label source.
inline double prior_distill_loss(const NdArray& strong_probs, const NdArray& prior_weak_probs, double tau_p) {
  if (strong_probs.shape() != prior_weak_probs.shape()) throw ShapeError("prior_distill_loss: shape mismatch");
  return consistency_loss(strong_probs, make_pseudo_labels(prior_weak_probs, tau_p));
}

// ---------------------------------------------------------------------------
// Objective assembly

struct LossBreakdown {
  double l_sup = 0.0;
  double l_cons_s1 = 0.0;
  double l_cons_s2 = 0.0;
  double l_teacher = 0.0;
  double l_mclip_s1 = 0.0;
  double l_mclip_s2 = 0.0;
  double total = 0.0;
  double masked_pixel_fraction = 0.0;
};

/// Weights of every objective term. Zero switches a term off.
struct LossWeights {
  double sup = 0.0;
  double cons = 0.0;
  double teacher = 0.0;
  double mclip = 0.0;
};

inline double weighted_total(const LossBreakdown& b, const LossWeights& w) {
  return w.sup * b.l_sup + w.cons * (b.l_cons_s1 + b.l_cons_s2) + w.teacher * b.l_teacher +
         w.mclip * (b.l_mclip_s1 + b.l_mclip_s2);
}

/// L_sup + lambda_cons (L_cons^s1 + L_cons^s2) + lambda_mclip (L_mclip^s1 + L_mclip^s2).
inline LossBreakdown centralized_objective(LossBreakdown parts, double lambda_cons, double lambda_mclip) {
  parts.l_teacher = 0.0;
  parts.total = weighted_total(parts, {1.0, lambda_cons, 0.0, lambda_mclip});
  return parts;
}

/// lambda_t L_t + lambda_cons (L_cons^s1 + L_cons^s2). No supervised term.
inline LossBreakdown unsupervised_objective(LossBreakdown parts, double lambda_t, double lambda_cons) {
  parts.l_sup = 0.0;
  parts.l_mclip_s1 = parts.l_mclip_s2 = 0.0;
  parts.total = weighted_total(parts, {0.0, lambda_cons, lambda_t, 0.0});
  return parts;
}

}  // namespace frieren
