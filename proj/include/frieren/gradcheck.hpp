#pragma once

// Certifies the hand-derived gradients of every objective term against
// central finite differences on small random configurations.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "frieren/augment.hpp"
#include "frieren/loss.hpp"
#include "frieren/model.hpp"
#include "frieren/objective.hpp"
#include "frieren/rng.hpp"

namespace frieren {

enum class GradTerm { kSup, kConsS1, kConsS2, kTeacher, kMclip, kCentralized, kUnsupervised };

inline constexpr std::array<GradTerm, 7> kAllGradTerms = {GradTerm::kSup,     GradTerm::kConsS1, GradTerm::kConsS2,
                                                          GradTerm::kTeacher, GradTerm::kMclip,  GradTerm::kCentralized,
                                                          GradTerm::kUnsupervised};

inline const char* to_string(GradTerm t) {
  switch (t) {
    case GradTerm::kSup: return "L_sup";
    case GradTerm::kConsS1: return "L_cons^s1";
    case GradTerm::kConsS2: return "L_cons^s2";
    case GradTerm::kTeacher: return "L_t";
    case GradTerm::kMclip: return "L_mclip";
    case GradTerm::kCentralized: return "L_cent";
    case GradTerm::kUnsupervised: return "L_unsup";
  }
  return "?";
}

/// Minimum distance from any non-differentiable point for a trial to be used.
inline constexpr double kKinkMargin = 1e-3;

struct GradcheckOptions {
  std::size_t trials = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  double skip_below = 1e-8;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  GradTerm term = GradTerm::kSup;
  std::size_t trials = 0;
  std::size_t checked = 0;      // parameter entries compared
  std::size_t failures = 0;     // entries above tolerance
  double max_rel_error = 0.0;
  bool frozen_zero = true;      // class embeddings received exactly zero gradient
  bool nonzero_loss = true;     // every trial produced a strictly positive loss

  [[nodiscard]] bool passed() const { return failures == 0 && frozen_zero && nonzero_loss && checked > 0; }
};

namespace detail {

inline NdArray random_image(Rng& rng, std::size_t H, std::size_t W, std::size_t ch) {
  NdArray img({H, W, ch});
  for (auto& x : img.data()) x = rng.normal(1.0);
  return img;
}

inline ParamSet random_params(Rng& rng, const ModelDims& dims) {
  ParamSet p = init_params(static_cast<std::uint64_t>(rng.integer(0, 1 << 30)), dims);
  p.visit([&](auto, NdArray& a, bool trainable) {
    if (trainable) for (auto& x : a.data()) x += rng.normal(0.3);
  });
  p.scale[0] = rng.uniform(1.0, 4.0);
  return p;
}

struct GradTrial {
  ParamSet params;
  BatchSpec batch;
  TermWeights weights;
};

inline TermWeights weights_for(GradTerm term, Rng& rng) {
  TermWeights w;
  switch (term) {
    case GradTerm::kSup: w.sup = 1.0; break;
    case GradTerm::kConsS1: w.cons_s1 = 1.0; break;
    case GradTerm::kConsS2: w.cons_s2 = 1.0; break;
    case GradTerm::kTeacher: w.teacher = 1.0; break;
    case GradTerm::kMclip: w.mclip_s1 = w.mclip_s2 = 1.0; break;
    case GradTerm::kCentralized:
      w.sup = 1.0;
      w.cons_s1 = w.cons_s2 = rng.uniform(0.2, 2.0);
      w.mclip_s1 = w.mclip_s2 = rng.uniform(0.01, 0.5);
      break;
    case GradTerm::kUnsupervised:
      w.teacher = rng.uniform(0.2, 2.0);
      w.cons_s1 = w.cons_s2 = rng.uniform(0.2, 2.0);
      break;
  }
  return w;
}

inline GradTrial make_trial(GradTerm term, Rng& rng) {
  ModelDims dims{static_cast<std::size_t>(rng.integer(2, 4)), static_cast<std::size_t>(rng.integer(3, 6)),
                 static_cast<std::size_t>(rng.integer(2, 4)), static_cast<std::size_t>(rng.integer(2, 4))};
  GradTrial t;
  t.params = random_params(rng, dims);
  const ParamSet teacher = random_params(rng, dims);
  const ParamSet prior = random_params(rng, dims);
  const std::size_t H = 3, W = 3;
  t.batch.tau = rng.uniform(0.0, 0.4);
  t.batch.ohem_keep = rng.bernoulli(0.5) ? 1.0 : 0.5;
  const double tau_t = rng.uniform(0.0, 0.5), tau_p = rng.uniform(0.0, 0.5);

  LabeledItem li{random_image(rng, H, W, dims.in_channels), std::vector<int>(H * W)};
  for (auto& y : li.labels) y = static_cast<int>(rng.integer(0, static_cast<std::int64_t>(dims.classes) - 1));
  t.batch.labeled.push_back(std::move(li));

  AugmentConfig aug;
  std::vector<ViewBundle> bundles;
  for (int j = 0; j < 2; ++j) bundles.push_back(make_views(random_image(rng, H, W, dims.in_channels), rng, aug, dims.hidden));
  std::vector<PseudoLabels> tpl, ppl;
  for (const auto& b : bundles) {
    tpl.push_back(make_pseudo_labels(predict_probs(teacher, b.weak), tau_t));
    ppl.push_back(make_pseudo_labels(predict_probs(prior, b.weak), tau_p));
  }
  for (std::size_t j = 0; j < bundles.size(); ++j) {
    UnlabeledItem item{bundles[j].weak, bundles[j].strong1, bundles[j].strong2, bundles[j].dropout1,
                       bundles[j].dropout2, {}, 0, tpl[j], ppl[j], std::nullopt};
    if (j == 0) {
      auto mix = cutmix_with_box(bundles[0], bundles[1], Box{0, 2, 1, 3});
      item.strong1 = std::move(mix.strong1);
      item.strong2 = std::move(mix.strong2);
      item.from_b = std::move(mix.from_b);
      item.partner = 1;
      item.teacher_pl = mix_pseudo_labels(tpl[0], tpl[1], item.from_b);
      item.prior_pl = mix_pseudo_labels(ppl[0], ppl[1], item.from_b);
    }
    t.batch.unlabeled.push_back(std::move(item));
  }
  t.weights = weights_for(term, rng);
  return t;
}

/// Smallest gap between any two of the values.
inline double min_gap(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double g = 1e300;
  for (std::size_t i = 1; i < v.size(); ++i) g = std::min(g, v[i] - v[i - 1]);
  return g;
}

/**
 * True when the loss is differentiable with room to spare at the trial point:
 * no hidden pre-activation near zero, no student confidence near its threshold,
 * no near-tie in any argmax, and no near-tie at the OHEM cut.
 */
inline bool away_from_kinks(const GradTrial& t, double margin) {
  auto relu_ok = [&](const PassCache& c) {
    for (double z : c.z1.data())
      if (std::abs(z) < margin) return false;
    return true;
  };
  auto argmax_ok = [&](const NdArray& probs, double tau) {
    for (std::size_t i = 0; i < probs.dim(0); ++i) {
      std::vector<double> row(probs.row(i).begin(), probs.row(i).end());
      std::sort(row.rbegin(), row.rend());
      if (row.size() > 1 && row[0] - row[1] < margin) return false;
      if (std::abs(row[0] - tau) < margin) return false;
    }
    return true;
  };
  for (const auto& li : t.batch.labeled) {
    const auto c = run_forward(t.params, li.view, nullptr);
    if (!relu_ok(c)) return false;
    if (t.batch.ohem_keep < 1.0) {
      std::vector<double> per;
      for (std::size_t i = 0; i < li.labels.size(); ++i) per.push_back(-std::log(c.probs.at(i, li.labels[i])));
      if (min_gap(per) < margin) return false;
    }
  }
  for (const auto& u : t.batch.unlabeled) {
    const auto w = run_forward(t.params, u.weak, nullptr);
    if (!relu_ok(w) || !argmax_ok(w.probs, t.batch.tau)) return false;
    if (!relu_ok(run_forward(t.params, u.strong1, u.dropout1 ? &*u.dropout1 : nullptr))) return false;
    if (!relu_ok(run_forward(t.params, u.strong2, u.dropout2 ? &*u.dropout2 : nullptr))) return false;
  }
  return true;
}

}  // namespace detail

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max(std::abs(analytic), std::abs(numeric));
  return denom == 0.0 ? 0.0 : std::abs(analytic - numeric) / denom;
}

/// Central-difference check of every trainable entry over `trials` random configurations.
inline GradcheckReport gradcheck(GradTerm term, const GradcheckOptions& opt = {}) {
  GradcheckReport rep;
  rep.term = term;
  for (std::size_t trial = 0; trial < opt.trials; ++trial) {
    Rng rng(derive_seed({opt.seed, static_cast<std::uint64_t>(Stream::kGradcheck),
                         static_cast<std::uint64_t>(term), trial}));
    detail::GradTrial t = detail::make_trial(term, rng);
    while (!detail::away_from_kinks(t, kKinkMargin)) t = detail::make_trial(term, rng);
    auto closure = [&](Tape& tape) { return batch_objective(tape, t.batch, t.weights); };
    const auto lg = loss_and_grad(t.params, closure);
    rep.nonzero_loss = rep.nonzero_loss && lg.loss > 0.0;
    for (double g : lg.grads.T.data()) rep.frozen_zero = rep.frozen_zero && g == 0.0;

    ParamSet probe = t.params;
    auto check_array = [&](NdArray ParamSet::*member) {
      NdArray& arr = probe.*member;
      const NdArray& grad = lg.grads.*member;
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const double orig = arr[i];
        arr[i] = orig + opt.step;
        const double fp = loss_value(probe, closure);
        arr[i] = orig - opt.step;
        const double fm = loss_value(probe, closure);
        arr[i] = orig;
        const double numeric = (fp - fm) / (2.0 * opt.step);
        if (std::abs(grad[i]) < opt.skip_below && std::abs(numeric) < opt.skip_below) continue;
        const double rel = relative_error(grad[i], numeric);
        ++rep.checked;
        rep.max_rel_error = std::max(rep.max_rel_error, rel);
        if (!(rel < opt.tolerance)) ++rep.failures;
      }
    };
    check_array(&ParamSet::W1);
    check_array(&ParamSet::b1);
    check_array(&ParamSet::W2);
    check_array(&ParamSet::b2);
    check_array(&ParamSet::scale);
  }
  rep.trials = opt.trials;
  return rep;
}

}  // namespace frieren
