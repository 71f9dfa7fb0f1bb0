#pragma once

// Minibatch objective shared by pretraining, local client training and the
// gradient certification: one differentiable closure over every view of
// every image in the batch.

#include <optional>
#include <vector>

#include "frieren/augment.hpp"
#include "frieren/loss.hpp"
#include "frieren/model.hpp"

namespace frieren {

/// Per-term weights as they enter the scalar total. Stream terms are weighted separately.
struct TermWeights {
  double sup = 0.0;
  double cons_s1 = 0.0;
  double cons_s2 = 0.0;
  double teacher = 0.0;
  double mclip_s1 = 0.0;
  double mclip_s2 = 0.0;

  static TermWeights from(const LossWeights& w) { return {w.sup, w.cons, w.cons, w.teacher, w.mclip, w.mclip}; }
};

inline double weighted_total(const LossBreakdown& b, const TermWeights& w) {
  return w.sup * b.l_sup + w.cons_s1 * b.l_cons_s1 + w.cons_s2 * b.l_cons_s2 + w.teacher * b.l_teacher +
         w.mclip_s1 * b.l_mclip_s1 + w.mclip_s2 * b.l_mclip_s2;
}

struct LabeledItem {
  NdArray view;            // weak view
  std::vector<int> labels;  // geometry already applied
};

/**
 * One unlabeled image after augmentation and optional CutMix. Pseudo-labels
 * from fixed label sources (teacher, prior) are precomputed and already mixed;
 * the student's own weak-view pseudo-labels are produced inside the closure.
 */
struct UnlabeledItem {
  NdArray weak;
  NdArray strong1;
  NdArray strong2;
  std::optional<Dropout> dropout1;
  std::optional<Dropout> dropout2;
  std::vector<std::uint8_t> from_b;  // empty when not mixed
  std::size_t partner = 0;           // index of the CutMix partner in the unlabeled list
  std::optional<PseudoLabels> teacher_pl;
  std::optional<PseudoLabels> prior_pl;
  std::optional<PseudoLabels> cons_pl;  // overrides the student's own weak-view labels when set
};

struct BatchSpec {
  std::vector<LabeledItem> labeled;
  std::vector<UnlabeledItem> unlabeled;
  double tau = 0.9;        // student weak-view threshold for L_cons
  double ohem_keep = 1.0;
};

namespace detail {

/// Unweighted value of a target set; deposits `weight` times its gradient when weight != 0.
inline double term(Tape& tape, Tape::PassId id, PixelTargets t, double weight) {
  const double value = weighted_nll(tape.probs(id), t);
  if (weight != 0.0 && tape.recording()) {
    for (auto& w : t.weights) w *= weight;
    weighted_nll(tape, id, t);
  }
  return value;
}

}  // namespace detail

/**
 * Evaluates every active term on the batch. Supervised terms are averaged over
 * labeled images, unsupervised terms over unlabeled images; the teacher term
 * averages its two strong streams. Returns the weighted total and fills `out`.
 */
inline double batch_objective(Tape& tape, const BatchSpec& batch, const TermWeights& w, LossBreakdown* out = nullptr) {
  LossBreakdown b;
  if (!batch.labeled.empty() && w.sup != 0.0) {
    const double scale = 1.0 / static_cast<double>(batch.labeled.size());
    for (const auto& item : batch.labeled) {
      const auto id = tape.forward(item.view);
      b.l_sup += detail::term(tape, id, ohem_targets(tape.probs(id), item.labels, batch.ohem_keep, scale), w.sup);
    }
  }

  const std::size_t nu = batch.unlabeled.size();
  const bool need_cons = w.cons_s1 != 0.0 || w.cons_s2 != 0.0;
  const bool need_teacher = w.teacher != 0.0;
  const bool need_prior = w.mclip_s1 != 0.0 || w.mclip_s2 != 0.0;
  if (nu > 0 && (need_cons || need_teacher || need_prior)) {
    const double scale = 1.0 / static_cast<double>(nu);
    std::vector<PseudoLabels> own;
    if (need_cons) {
      own.reserve(nu);
      for (const auto& item : batch.unlabeled)
        own.push_back(item.cons_pl ? *item.cons_pl : make_pseudo_labels(tape.probs(tape.forward(item.weak)), batch.tau));
    }
    std::size_t masked = 0, pixels = 0;
    for (std::size_t j = 0; j < nu; ++j) {
      const auto& item = batch.unlabeled[j];
      const auto s1 = tape.forward(item.strong1, item.dropout1 ? &*item.dropout1 : nullptr);
      const auto s2 = tape.forward(item.strong2, item.dropout2 ? &*item.dropout2 : nullptr);
      if (need_cons) {
        const PseudoLabels pl = item.from_b.empty() || item.cons_pl ? own[j]
                                                                    : mix_pseudo_labels(own[j], own[item.partner], item.from_b);
        masked += pl.masked_in();
        pixels += pl.size();
        b.l_cons_s1 += detail::term(tape, s1, masked_targets(pl, scale), w.cons_s1);
        b.l_cons_s2 += detail::term(tape, s2, masked_targets(pl, scale), w.cons_s2);
      }
      if (need_teacher) {
        if (!item.teacher_pl) throw ShapeError("batch_objective: teacher term active without teacher labels");
        b.l_teacher += 0.5 * detail::term(tape, s1, masked_targets(*item.teacher_pl, scale), 0.5 * w.teacher);
        b.l_teacher += 0.5 * detail::term(tape, s2, masked_targets(*item.teacher_pl, scale), 0.5 * w.teacher);
      }
      if (need_prior) {
        if (!item.prior_pl) throw ShapeError("batch_objective: prior term active without prior labels");
        b.l_mclip_s1 += detail::term(tape, s1, masked_targets(*item.prior_pl, scale), w.mclip_s1);
        b.l_mclip_s2 += detail::term(tape, s2, masked_targets(*item.prior_pl, scale), w.mclip_s2);
      }
    }
    if (pixels > 0) b.masked_pixel_fraction = static_cast<double>(masked) / static_cast<double>(pixels);
  }
  b.total = weighted_total(b, w);
  if (out) *out = b;
  return b.total;
}

}  // namespace frieren
