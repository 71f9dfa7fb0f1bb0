#pragma once

// Federation engine: client sampling, local training in every label mode,
// FedAvg / FedSWA aggregation, the round loop, and the centralized baselines.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <iostream>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "frieren/augment.hpp"
#include "frieren/errors.hpp"
#include "frieren/eval.hpp"
#include "frieren/loss.hpp"
#include "frieren/model.hpp"
#include "frieren/objective.hpp"
#include "frieren/rng.hpp"
#include "frieren/sched.hpp"
#include "frieren/synthdata.hpp"

namespace frieren {

enum class Aggregator { kFedAvg, kFedSwa };
enum class SwaWeighting { kUniform, kSize };
enum class TeacherMode { kFrozen, kEma };
enum class LrProgress { kRound, kLocal };

inline const char* to_string(Aggregator a) { return a == Aggregator::kFedAvg ? "fedavg" : "fedswa"; }

struct FedConfig {
  std::size_t rounds = 200;            // T
  std::size_t clients_per_round = 5;
  std::size_t local_epochs = 1;        // E
  std::size_t batch_size = 2;
  Aggregator agg = Aggregator::kFedSwa;
  LabelMode mode = LabelMode::kUnsup;
  double swa_gamma = 1.0;              // server EMA coefficient
  SwaWeighting swa_weighting = SwaWeighting::kUniform;
  double swa_delta = 0.1;              // final factor of the per-round linear decay
  ScheduleSpec schedule{ScheduleKind::kPolynomial, 0.05, 0.1, 0.9, 0.0, 1};
  LrProgress lr_progress = LrProgress::kRound;
  double lambda_sup = 1.0;
  double lambda_cons = 1.0;
  double lambda_t = 1.0;
  double lambda_mclip = 0.1;           // initial value, linearly decayed to 0 over the rounds
  double tau = 0.9;
  double tau_t = 0.9;
  double tau_p = 0.9;
  double ohem_keep = 1.0;
  TeacherMode teacher_mode = TeacherMode::kFrozen;
  double ema_momentum = 0.996;
  double labeled_fraction = 0.25;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  std::size_t threads = 0;             // 0 = hardware concurrency
};

/// Frozen snapshot used as the dense prior label source.
struct PriorTeacher {
  ParamSet params;
  double tau_p = 0.9;
};

inline PriorTeacher make_prior_teacher(const ParamSet& w_pretrained, double tau_p) { return {w_pretrained, tau_p}; }

inline PseudoLabels prior_labels(const PriorTeacher& prior, const NdArray& weak_view) {
  return make_pseudo_labels(predict_probs(prior.params, weak_view), prior.tau_p);
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline std::vector<int> predict_labels(const ParamSet& p, const NdArray& img) {
  return argmax_with_conf(forward(p, img)).labels;
}

inline IoUReport evaluate(const ParamSet& p, std::span<const LabeledImage> images) {
  ConfusionMatrix cm(p.dims().classes);
  for (const auto& im : images) {
    if (!im.labeled()) throw ShapeError("evaluate: image without labels");
    cm = accumulate(std::move(cm), im.labels, predict_labels(p, im.pixels));
  }
  return miou(cm);
}

// ---------------------------------------------------------------------------
// Sampling

/// m distinct client ids drawn uniformly without replacement; sorted ascending.
inline std::vector<int> sample_clients(std::size_t K, std::size_t m, std::size_t round, std::uint64_t seed) {
  if (m > K) throw ConfigError("sample_clients: clients_per_round exceeds client count");
  std::vector<int> ids(K);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(Stream::kSampling), round}));
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(i), static_cast<std::int64_t>(K) - 1));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// Aggregation

struct ClientUpdate {
  int client_id = 0;
  ParamSet params;
  std::size_t n = 0;  // local dataset size
};

namespace detail {

/// Recursive pairwise summation.
inline double pairwise_sum(std::span<const double> terms) {
  if (terms.size() <= 2) return terms.empty() ? 0.0 : terms.size() == 1 ? terms[0] : terms[0] + terms[1];
  const std::size_t mid = terms.size() / 2;
  return pairwise_sum(terms.first(mid)) + pairwise_sum(terms.subspan(mid));
}

inline std::vector<const ClientUpdate*> sorted_updates(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw ShapeError("aggregation: no client updates");
  std::vector<const ClientUpdate*> s;
  for (const auto& u : updates) s.push_back(&u);
  std::sort(s.begin(), s.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  for (auto* u : s) require_same_shapes(s.front()->params, u->params, "aggregation");
  return s;
}

/// Elementwise sum_k weights[k] * params_k over id-sorted updates.
inline ParamSet weighted_combination(const std::vector<const ClientUpdate*>& s, std::span<const double> weights) {
  ParamSet out = s.front()->params;
  std::vector<double> terms(s.size());
  auto combine = [&](NdArray ParamSet::*member) {
    NdArray& dst = out.*member;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      for (std::size_t k = 0; k < s.size(); ++k) terms[k] = weights[k] * (s[k]->params.*member)[i];
      dst[i] = pairwise_sum(terms);
    }
  };
  combine(&ParamSet::W1);
  combine(&ParamSet::b1);
  combine(&ParamSet::W2);
  combine(&ParamSet::b2);
  combine(&ParamSet::T);
  combine(&ParamSet::scale);
  return out;
}

}  // namespace detail

/// alpha_k = n_k / sum_j n_j over id-sorted updates.
inline std::vector<double> fedavg_weights(std::span<const ClientUpdate> updates) {
  const auto s = detail::sorted_updates(updates);
  std::vector<double> n(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) n[k] = static_cast<double>(s[k]->n);
  const double total = detail::pairwise_sum(n);
  if (!(total > 0.0)) throw ShapeError("agg_fedavg: total dataset size is zero");
  for (auto& x : n) x /= total;
  return n;
}

inline ParamSet agg_fedavg(std::span<const ClientUpdate> updates) {
  const auto s = detail::sorted_updates(updates);
  return detail::weighted_combination(s, fedavg_weights(updates));
}

/// v = mean of updates (uniform or size-weighted); w+ = w + gamma (v - w).
inline ParamSet agg_fedswa(const ParamSet& w_global, std::span<const ClientUpdate> updates, double gamma,
                           SwaWeighting weighting = SwaWeighting::kUniform) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("agg_fedswa: gamma must lie in [0, 1]");
  const auto s = detail::sorted_updates(updates);
  require_same_shapes(w_global, s.front()->params, "agg_fedswa");
  if (gamma == 0.0) return w_global;
  ParamSet v = weighting == SwaWeighting::kSize
                   ? detail::weighted_combination(s, fedavg_weights(updates))
                   : detail::weighted_combination(s, std::vector<double>(s.size(), 1.0 / static_cast<double>(s.size())));
  if (gamma == 1.0) return v;
  ParamSet out = w_global;
  zip_arrays(out, v, [gamma](double& w, double vv, bool) { w = w + gamma * (vv - w); });
  return out;
}

// ---------------------------------------------------------------------------
// Local training

struct LocalStats {
  LossBreakdown mean;     // per-iteration average
  double mean_lr = 0.0;
  std::size_t iterations = 0;
};

/// Learning rate for local iteration i of N in round t of T.
inline double local_lr(const FedConfig& cfg, std::size_t round, std::size_t i, std::size_t N) {
  ScheduleSpec spec = cfg.schedule;
  double progress;
  if (cfg.lr_progress == LrProgress::kRound)
    progress = static_cast<double>(round) / static_cast<double>(std::max<std::size_t>(cfg.rounds, 1));
  else
    progress = static_cast<double>(i) / static_cast<double>(N);
  double peak = spec.kind == ScheduleKind::kConstant ? spec.base_lr : poly_lr(spec, std::clamp(progress, 0.0, 1.0));
  if (cfg.agg != Aggregator::kFedSwa) return peak;
  ScheduleSpec swa{ScheduleKind::kFedSwaLinear, peak, cfg.swa_delta, 1.0, 0.0, N};
  return fedswa_lr(swa, i);
}

namespace detail {

inline void accumulate_breakdown(LossBreakdown& acc, const LossBreakdown& b) {
  acc.l_sup += b.l_sup;
  acc.l_cons_s1 += b.l_cons_s1;
  acc.l_cons_s2 += b.l_cons_s2;
  acc.l_teacher += b.l_teacher;
  acc.l_mclip_s1 += b.l_mclip_s1;
  acc.l_mclip_s2 += b.l_mclip_s2;
  acc.total += b.total;
  acc.masked_pixel_fraction += b.masked_pixel_fraction;
}

inline void scale_breakdown(LossBreakdown& b, double f) {
  b.l_sup *= f;
  b.l_cons_s1 *= f;
  b.l_cons_s2 *= f;
  b.l_teacher *= f;
  b.l_mclip_s1 *= f;
  b.l_mclip_s2 *= f;
  b.total *= f;
  b.masked_pixel_fraction *= f;
}

/// Augments a minibatch and attaches fixed-source pseudo-labels.
inline BatchSpec build_batch(std::span<const LabeledImage* const> images, Rng& rng, const FedConfig& cfg,
                             std::size_t hidden, const ParamSet* teacher, const PriorTeacher* prior, bool use_sup) {
  BatchSpec batch;
  batch.tau = cfg.tau;
  batch.ohem_keep = cfg.ohem_keep;
  std::vector<ViewBundle> bundles;
  std::vector<PseudoLabels> tpl, ppl;
  for (const auto* im : images) {
    ViewBundle vb = make_views(im->pixels, rng, cfg.augment, hidden);
    if (use_sup && im->labeled()) {
      batch.labeled.push_back({cfg.augment.strong_labeled ? std::move(vb.strong1) : std::move(vb.weak), apply_geometry(im->labels, im->height(), im->width(), vb.geometry)});
      continue;
    }
    if (teacher) tpl.push_back(make_pseudo_labels(predict_probs(*teacher, vb.weak), cfg.tau_t));
    if (prior) ppl.push_back(prior_labels(*prior, vb.weak));
    bundles.push_back(std::move(vb));
  }
  const std::size_t nu = bundles.size();
  for (std::size_t j = 0; j < nu; ++j) {
    UnlabeledItem item;
    item.weak = bundles[j].weak;
    item.strong1 = bundles[j].strong1;
    item.strong2 = bundles[j].strong2;
    item.dropout1 = bundles[j].dropout1;
    item.dropout2 = bundles[j].dropout2;
    if (teacher) item.teacher_pl = tpl[j];
    if (prior) item.prior_pl = ppl[j];
    if (nu >= 2 && cfg.augment.cutmix_prob > 0.0 && rng.bernoulli(cfg.augment.cutmix_prob)) {
      const std::size_t partner = (j + 1) % nu;
      auto mix = cutmix(bundles[j], bundles[partner], rng);
      item.strong1 = std::move(mix.strong1);
      item.strong2 = std::move(mix.strong2);
      item.from_b = std::move(mix.from_b);
      item.partner = partner;
      if (teacher) item.teacher_pl = mix_pseudo_labels(tpl[j], tpl[partner], item.from_b);
      if (prior) item.prior_pl = mix_pseudo_labels(ppl[j], ppl[partner], item.from_b);
    }
    batch.unlabeled.push_back(std::move(item));
  }
  return batch;
}

}  // namespace detail

/// Term weights for a label mode at round t.
inline TermWeights mode_weights(const FedConfig& cfg, std::size_t round, bool with_prior) {
  TermWeights w;
  if (cfg.mode != LabelMode::kUnsup) w.sup = cfg.lambda_sup;
  if (cfg.mode != LabelMode::kSup) {
    w.cons_s1 = w.cons_s2 = cfg.lambda_cons;
    w.teacher = cfg.lambda_t;
    if (with_prior) w.mclip_s1 = w.mclip_s2 = lambda_mclip(std::min(round, cfg.rounds), cfg.rounds, cfg.lambda_mclip);
  }
  return w;
}

struct LocalResult {
  ParamSet params;
  LocalStats stats;
};

/**
 * E local epochs of minibatch SGD on one client. The teacher is the frozen
 * broadcast model unless `teacher` supplies a persistent EMA copy.
 */
inline LocalResult local_train(const ParamSet& w_broadcast, const ClientDataset& client, const FedConfig& cfg,
                               std::size_t round, const PriorTeacher* prior, const ParamSet* teacher = nullptr) {
  if (client.images.empty()) throw ShapeError("local_train: client " + std::to_string(client.client_id) + " has no images");
  if (!w_broadcast.all_finite()) throw DivergenceError("local_train: broadcast parameters are not finite");
  const std::size_t B = std::max<std::size_t>(cfg.batch_size, 1);
  const std::size_t n = client.size();
  const std::size_t per_epoch = (n + B - 1) / B;
  const std::size_t N = cfg.local_epochs * per_epoch;
  const std::size_t hidden = w_broadcast.dims().hidden;
  const bool use_sup = cfg.mode != LabelMode::kUnsup;
  const TermWeights weights = mode_weights(cfg, round, prior != nullptr);
  const bool need_prior = prior && (weights.mclip_s1 != 0.0 || weights.mclip_s2 != 0.0);
  const ParamSet* teacher_params = weights.teacher != 0.0 ? (teacher ? teacher : &w_broadcast) : nullptr;
  ParamSet frozen_teacher;
  if (teacher_params == &w_broadcast) {
    frozen_teacher = w_broadcast;
    teacher_params = &frozen_teacher;
  }

  Rng rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(Stream::kLocal), round,
                       static_cast<std::uint64_t>(client.client_id)}));
  ParamSet w = w_broadcast;
  LocalStats stats;
  std::vector<std::size_t> order(n);
  std::size_t it = 0;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < n; start += B, ++it) {
      std::vector<const LabeledImage*> imgs;
      for (std::size_t j = start; j < std::min(n, start + B); ++j) imgs.push_back(&client.images[order[j]]);
      const BatchSpec batch = detail::build_batch(imgs, rng, cfg, hidden, teacher_params, need_prior ? prior : nullptr, use_sup);
      LossBreakdown br;
      auto lg = loss_and_grad(w, [&](Tape& t) { return batch_objective(t, batch, weights, &br); });
      const double lr = local_lr(cfg, round, it, N);
      w = sgd_step(w, lg.grads, lr);
      detail::accumulate_breakdown(stats.mean, br);
      stats.mean_lr += lr;
    }
  }
  stats.iterations = it;
  if (it > 0) {
    detail::scale_breakdown(stats.mean, 1.0 / static_cast<double>(it));
    stats.mean_lr /= static_cast<double>(it);
  }
  return {std::move(w), stats};
}

// ---------------------------------------------------------------------------
// Round loop

struct RoundRecord {
  std::size_t round = 0;
  LabelMode mode = LabelMode::kUnsup;
  Aggregator agg = Aggregator::kFedSwa;
  double lr = 0.0;
  LossBreakdown losses;  // mean over participating clients
  std::optional<double> miou_eval;
  std::vector<double> per_class_iou;
  std::vector<int> clients;
};

struct FederationResult {
  ParamSet params;
  std::vector<RoundRecord> history;
};

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  const auto hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

inline bool is_eval_round(std::size_t t, std::size_t T, std::size_t every) {
  return every > 0 && ((t + 1) % every == 0 || t + 1 == T);
}

namespace detail {

/// Runs fn(i) for i in [0, count) on up to `threads` workers; rethrows the first failure by index.
template <typename F>
void parallel_for(std::size_t count, std::size_t threads, F&& fn) {
  std::vector<std::exception_ptr> errors(count);
  auto body = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(threads, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) body(i);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline ParamSet aggregate(const FedConfig& cfg, const ParamSet& w, std::span<const ClientUpdate> updates) {
  return cfg.agg == Aggregator::kFedAvg ? agg_fedavg(updates) : agg_fedswa(w, updates, cfg.swa_gamma, cfg.swa_weighting);
}

}  // namespace detail

/// Validates the federation configuration against the client count.
inline void validate(const FedConfig& cfg, std::size_t K) {
  if (cfg.clients_per_round == 0 || cfg.clients_per_round > K)
    throw ConfigError("fed: clients_per_round must lie in [1, " + std::to_string(K) + "]");
  if (cfg.local_epochs == 0) throw ConfigError("fed: local_epochs must be >= 1");
  if (cfg.batch_size == 0) throw ConfigError("fed: batch_size must be >= 1");
  if (!(cfg.swa_gamma >= 0.0 && cfg.swa_gamma <= 1.0)) throw ConfigError("fed: swa_gamma must lie in [0, 1]");
  if (!(cfg.swa_delta >= 0.0 && cfg.swa_delta <= 1.0)) throw ConfigError("fed: swa_delta must lie in [0, 1]");
  if (!(cfg.ema_momentum >= 0.0 && cfg.ema_momentum <= 1.0)) throw ConfigError("fed: ema_momentum must lie in [0, 1]");
  if (!(cfg.ohem_keep > 0.0 && cfg.ohem_keep <= 1.0)) throw ConfigError("fed: ohem_keep must lie in (0, 1]");
  for (double t : {cfg.tau, cfg.tau_t, cfg.tau_p})
    if (!(t >= 0.0)) throw ConfigError("fed: confidence thresholds must be >= 0");
  validate(cfg.schedule);
}

/**
 * Algorithm loop: sample, broadcast, train locally (possibly in parallel),
 * aggregate over id-sorted updates, evaluate on the held-out domain. Only
 * client datasets and the eval set are read; source data is never touched.
 */
inline FederationResult run_federation(const FedConfig& cfg, const ParamSet& w0, const std::vector<ClientDataset>& clients,
                                       std::span<const LabeledImage> eval_set, const PriorTeacher* prior = nullptr,
                                       std::ostream* progress = nullptr) {
  FederationResult res{w0, {}};
  if (cfg.rounds == 0) return res;
  validate(cfg, clients.size());
  const std::size_t threads = resolve_threads(cfg.threads);
  std::optional<TeacherState> ema_teacher;
  if (cfg.teacher_mode == TeacherMode::kEma) ema_teacher = TeacherState{w0, cfg.ema_momentum};

  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto ids = sample_clients(clients.size(), cfg.clients_per_round, t, cfg.seed);
    std::vector<ClientUpdate> updates(ids.size());
    std::vector<LocalStats> stats(ids.size());
    const ParamSet& w = res.params;
    const ParamSet* teacher = ema_teacher ? &ema_teacher->params : nullptr;
    // Any client failure propagates out of the round before aggregation.
    detail::parallel_for(ids.size(), threads, [&](std::size_t k) {
      const auto& client = clients.at(static_cast<std::size_t>(ids[k]));
      try {
        auto r = local_train(w, client, cfg, t, prior, teacher);
        updates[k] = {client.client_id, std::move(r.params), client.size()};
        stats[k] = r.stats;
      } catch (const DivergenceError& e) {
        throw DivergenceError("round " + std::to_string(t) + ", client " + std::to_string(client.client_id) + ": " + e.what());
      } catch (const std::exception& e) {
        throw std::runtime_error("round " + std::to_string(t) + ", client " + std::to_string(client.client_id) + ": " + e.what());
      }
    });

    RoundRecord rec;
    rec.round = t;
    rec.mode = cfg.mode;
    rec.agg = cfg.agg;
    rec.clients = ids;
    for (const auto& s : stats) {
      detail::accumulate_breakdown(rec.losses, s.mean);
      rec.lr += s.mean_lr;
    }
    detail::scale_breakdown(rec.losses, 1.0 / static_cast<double>(stats.size()));
    rec.lr /= static_cast<double>(stats.size());

    res.params = detail::aggregate(cfg, w, updates);
    if (!res.params.all_finite()) throw DivergenceError("round " + std::to_string(t) + ": aggregated model is not finite");
    if (ema_teacher) *ema_teacher = ema_update(*ema_teacher, res.params);

    if (is_eval_round(t, cfg.rounds, cfg.eval_every) && !eval_set.empty()) {
      const auto rep = evaluate(res.params, eval_set);
      rec.miou_eval = rep.mean;
      rec.per_class_iou = rep.per_class;
    }
    if (progress && rec.miou_eval)
      *progress << "round " << t << "  lr " << rec.lr << "  loss " << rec.losses.total << "  mIoU " << *rec.miou_eval << '\n';
    res.history.push_back(std::move(rec));
  }
  return res;
}

/**
 * Centralized self-training on the pooled target data: the same local
 * training logic applied to a single client holding everything, one local
 * run per round and no aggregation.
 */
inline ParamSet cust(const ParamSet& w0, std::vector<LabeledImage> pool, const FedConfig& cfg,
                     const PriorTeacher* prior = nullptr) {
  if (cfg.rounds == 0) return w0;
  ClientDataset all;
  all.client_id = 0;
  all.images = std::move(pool);
  ParamSet w = w0;
  std::optional<TeacherState> ema_teacher;
  if (cfg.teacher_mode == TeacherMode::kEma) ema_teacher = TeacherState{w0, cfg.ema_momentum};
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    w = local_train(w, all, cfg, t, prior, ema_teacher ? &ema_teacher->params : nullptr).params;
    if (ema_teacher) *ema_teacher = ema_update(*ema_teacher, w);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Server pretraining

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 4;
  ScheduleSpec schedule{ScheduleKind::kPolynomial, 0.1, 0.1, 0.9, 0.0, 1};
  double ohem_keep = 1.0;
  double unlabeled_fraction = 0.0;  // share of source images whose labels are hidden
  double lambda_cons = 1.0;
  double lambda_mclip = 0.1;        // only used when a prior teacher is supplied
  double tau = 0.9;
  double ema_momentum = 0.996;
  AugmentConfig augment;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ParamSet params;
  std::vector<double> epoch_loss;
  double nonincreasing_share = 1.0;  // share of consecutive epoch pairs with non-increasing loss
};

/**
 * Minimizes the centralized objective on the labeled source set. With an
 * unlabeled fraction, hidden-label images feed the dual consistency term
 * with pseudo-labels from an EMA teacher of the student.
 */
inline PretrainResult pretrain(const std::vector<LabeledImage>& source, const ParamSet& init, const PretrainConfig& cfg,
                               const PriorTeacher* prior = nullptr, std::ostream* progress = nullptr) {
  if (source.empty()) throw ConfigError("pretrain: labeled source set is empty");
  PretrainResult res{init, {}, 1.0};
  if (cfg.epochs == 0) return res;
  validate(cfg.schedule);

  Rng rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(Stream::kPretrain)}));
  std::vector<LabeledImage> images = source;
  if (cfg.unlabeled_fraction > 0.0) {
    std::vector<std::size_t> idx(images.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    const auto hide = static_cast<std::size_t>(std::floor(cfg.unlabeled_fraction * static_cast<double>(images.size())));
    for (std::size_t j = 0; j < std::min(hide, images.size() - 1); ++j) images[idx[j]].labels.clear();
  }
  const bool semi = std::any_of(images.begin(), images.end(), [](const auto& im) { return !im.labeled(); });

  FedConfig step_cfg;
  step_cfg.tau = cfg.tau;
  step_cfg.tau_t = cfg.tau;
  step_cfg.ohem_keep = cfg.ohem_keep;
  step_cfg.augment = cfg.augment;
  step_cfg.batch_size = cfg.batch_size;

  const std::size_t B = std::max<std::size_t>(cfg.batch_size, 1);
  const std::size_t per_epoch = (images.size() + B - 1) / B;
  const std::size_t total = cfg.epochs * per_epoch;
  const std::size_t hidden = init.dims().hidden;
  TeacherState teacher{init, cfg.ema_momentum};
  ParamSet& w = res.params;
  std::vector<std::size_t> order(images.size());
  std::size_t it = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < images.size(); start += B, ++it, ++steps) {
      std::vector<const LabeledImage*> batch_imgs;
      for (std::size_t j = start; j < std::min(images.size(), start + B); ++j) batch_imgs.push_back(&images[order[j]]);
      TermWeights weights;
      weights.sup = 1.0;
      const PriorTeacher* active_prior = nullptr;
      if (semi) {
        weights.cons_s1 = weights.cons_s2 = cfg.lambda_cons;
        if (prior) {
          weights.mclip_s1 = weights.mclip_s2 = lambda_mclip(it, total, cfg.lambda_mclip);
          active_prior = prior;
        }
      }
      BatchSpec batch = detail::build_batch(batch_imgs, rng, step_cfg, hidden, &teacher.params, active_prior, true);
      // Consistency pseudo-labels come from the EMA teacher's weak view, not the live student.
      for (auto& item : batch.unlabeled) item.cons_pl = std::exchange(item.teacher_pl, std::nullopt);
      LossBreakdown br;
      auto lg = loss_and_grad(w, [&](Tape& t) { return batch_objective(t, batch, weights, &br); });
      const double progress_frac = static_cast<double>(it) / static_cast<double>(total);
      w = sgd_step(w, lg.grads, poly_lr(cfg.schedule, progress_frac));
      teacher = ema_update(teacher, w);
      epoch_sum += lg.loss;
    }
    res.epoch_loss.push_back(epoch_sum / static_cast<double>(steps));
    if (progress) *progress << "epoch " << e << "  loss " << res.epoch_loss.back() << '\n';
  }
  std::size_t ok = 0;
  for (std::size_t e = 1; e < res.epoch_loss.size(); ++e) ok += res.epoch_loss[e] <= res.epoch_loss[e - 1] ? 1 : 0;
  if (res.epoch_loss.size() > 1)
    res.nonincreasing_share = static_cast<double>(ok) / static_cast<double>(res.epoch_loss.size() - 1);
  return res;
}

}  // namespace frieren
