#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "frieren/fed.hpp"
#include "frieren/protocol.hpp"

using namespace frieren;

namespace {

BenchmarkSizes tiny_sizes() {
  BenchmarkSizes s;
  s.height = s.width = 6;
  s.source_images = 12;
  s.eval_images = 6;
  s.images_per_condition = 8;
  s.clients = 6;
  return s;
}

ParamSet random_params(std::uint64_t seed, const ModelDims& dims = {}) {
  ParamSet p = init_params(seed, dims);
  Rng rng(seed * 7 + 1);
  p.visit([&](auto, NdArray& a, bool trainable) {
    if (trainable)
      for (auto& v : a.data()) v += rng.uniform(-0.5, 0.5);
  });
  return p;
}

std::vector<ClientUpdate> random_updates(Rng& rng, std::size_t k) {
  std::vector<ClientUpdate> u;
  for (std::size_t i = 0; i < k; ++i)
    u.push_back({static_cast<int>(i), random_params(rng.engine()() % 1000), static_cast<std::size_t>(rng.integer(1, 50))});
  return u;
}

FedConfig quick_config(std::size_t rounds) {
  FedConfig c;
  c.rounds = rounds;
  c.clients_per_round = 3;
  c.seed = 5;
  c.threads = 1;
  c.schedule.base_lr = 0.05;
  return c;
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  double m = 0.0;
  ParamSet x = a;
  zip_arrays(x, b, [&](double& u, double v, bool) { m = std::max(m, std::abs(u - v)); });
  return m;
}

// Mean pixel cross-entropy over a set of images, gradient written from scratch.
LossClosure pooled_ce(const std::vector<const LabeledImage*>& images) {
  return [images](Tape& t) {
    double total = 0.0;
    const double per_image = 1.0 / static_cast<double>(images.size());
    for (const auto* im : images) {
      const auto id = t.forward(im->pixels);
      const auto& p = t.probs(id);
      const double w = per_image / static_cast<double>(im->labels.size());
      NdArray dl(p.shape());
      for (std::size_t i = 0; i < im->labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(im->labels[i]);
        total -= w * std::log(p.at(i, y));
        for (std::size_t c = 0; c < p.dim(1); ++c) dl.at(i, c) = w * p.at(i, c);
        dl.at(i, y) -= w;
      }
      t.add_logit_grad(id, dl);
    }
    return total;
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// Aggregation

TEST(FedAvg, ScalarExampleAndIdempotence) {
  ParamSet zero = init_params(1, {1, 1, 1, 1}).zeros_like();
  ParamSet four = zero;
  four.W1[0] = 4.0;
  const std::vector<ClientUpdate> u{{0, zero, 1}, {1, four, 3}};
  EXPECT_EQ(agg_fedavg(u).W1[0], 3.0);
  const ParamSet p = random_params(3);
  const std::vector<ClientUpdate> same{{0, p, 4}, {1, p, 9}, {2, p, 1}};
  EXPECT_LE(max_abs_diff(agg_fedavg(same), p), 1e-15);
}

TEST(FedAvg, ScalarLoopOracleAndWeights) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const auto u = random_updates(rng, 5);
    const auto w = fedavg_weights(u);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-15);
    const ParamSet got = agg_fedavg(u);
    double total = 0.0;
    for (const auto& x : u) total += static_cast<double>(x.n);
    const NdArray* arrays[] = {&got.W1, &got.b1, &got.W2, &got.b2, &got.scale};
    for (int a = 0; a < 5; ++a)
      for (std::size_t i = 0; i < arrays[a]->size(); ++i) {
        double want = 0.0;
        for (const auto& x : u) {
          const NdArray* src[] = {&x.params.W1, &x.params.b1, &x.params.W2, &x.params.b2, &x.params.scale};
          want += static_cast<double>(x.n) / total * (*src[a])[i];
        }
        EXPECT_NEAR((*arrays[a])[i], want, 1e-14);
      }
  }
}

TEST(FedAvg, OrderIndependent) {
  Rng rng(42);
  auto u = random_updates(rng, 6);
  const ParamSet ref = agg_fedavg(u);
  const ParamSet ref_swa = agg_fedswa(random_params(9), u, 0.3, SwaWeighting::kSize);
  for (int t = 0; t < 10; ++t) {
    std::shuffle(u.begin(), u.end(), rng.engine());
    EXPECT_EQ(agg_fedavg(u), ref);
    EXPECT_EQ(agg_fedswa(random_params(9), u, 0.3, SwaWeighting::kSize), ref_swa);
  }
}

TEST(FedSwa, GammaCases) {
  ParamSet zero = init_params(1, {1, 1, 1, 1}).zeros_like();
  ParamSet two = zero;
  two.W1[0] = 2.0;
  const std::vector<ClientUpdate> one{{0, two, 1}};
  EXPECT_EQ(agg_fedswa(zero, one, 0.5).W1[0], 1.0);

  Rng rng(43);
  const auto u = random_updates(rng, 4);
  const ParamSet w = random_params(11);
  EXPECT_EQ(agg_fedswa(w, u, 0.0), w);
  // gamma = 1 is plain uniform averaging, with the same reduction order.
  std::vector<ClientUpdate> equal = u;
  for (auto& x : equal) x.n = 1;
  EXPECT_EQ(agg_fedswa(w, u, 1.0), agg_fedavg(equal));
  EXPECT_EQ(agg_fedswa(w, u, 1.0, SwaWeighting::kSize), agg_fedavg(u));
  EXPECT_THROW(agg_fedswa(w, u, 1.5), ConfigError);
}

// ---------------------------------------------------------------------------
// Sampling

TEST(Sampling, Examples) {
  const auto all = sample_clients(7, 7, 3, 1);
  EXPECT_EQ(all, (std::vector<int>{0, 1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(sample_clients(1, 1, 0, 1), (std::vector<int>{0}));
  EXPECT_EQ(sample_clients(28, 5, 4, 9), sample_clients(28, 5, 4, 9));
  EXPECT_THROW(sample_clients(3, 4, 0, 1), ConfigError);
}

TEST(Sampling, ChiSquareUniformity) {
  const std::size_t K = 10, m = 3, draws = 10000;
  std::vector<double> count(K, 0.0);
  for (std::size_t t = 0; t < draws; ++t) {
    const auto ids = sample_clients(K, m, t, 77);
    ASSERT_TRUE(std::is_sorted(ids.begin(), ids.end()));
    ASSERT_EQ(std::adjacent_find(ids.begin(), ids.end()), ids.end());
    for (int i : ids) count[static_cast<std::size_t>(i)] += 1.0;
  }
  const double expected = static_cast<double>(draws * m) / static_cast<double>(K);
  double chi2 = 0.0;
  for (double c : count) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 21.666);  // chi-square critical value, 9 dof, alpha = 0.01
}

// ---------------------------------------------------------------------------
// Local training

TEST(LocalTrain, ZeroLearningRateIsIdentity) {
  auto b = make_benchmark(1, Scenario::kClear2Adverse, tiny_sizes());
  FedConfig cfg = quick_config(4);
  cfg.schedule.base_lr = 0.0;
  cfg.local_epochs = 3;
  const ParamSet w = init_params(1, {});
  const auto prior = make_prior_teacher(w, 0.5);
  const auto r = local_train(w, b.clients[0], cfg, 0, &prior);
  EXPECT_EQ(r.params, w);
  EXPECT_GT(r.stats.iterations, 3u);
}

TEST(LocalTrain, SupModeSingleStepIsOneSgdStep) {
  auto b = make_benchmark(2, Scenario::kClear2Adverse, tiny_sizes());
  ClientDataset c;
  c.client_id = 0;
  c.images = {b.clients[0].images[0]};
  FedConfig cfg = quick_config(1);
  cfg.mode = LabelMode::kSup;
  cfg.agg = Aggregator::kFedAvg;
  cfg.augment = AugmentConfig::identity();
  cfg.batch_size = 1;
  const ParamSet w = random_params(4);
  const auto r = local_train(w, c, cfg, 0, nullptr);
  EXPECT_EQ(r.stats.iterations, 1u);
  const auto g = loss_and_grad(w, pooled_ce({&c.images[0]}));
  EXPECT_LE(max_abs_diff(r.params, sgd_step(w, g.grads, cfg.schedule.base_lr)), 1e-14);
}

TEST(LocalTrain, StrongLabeledViewUsesStrongPhotometry) {
  auto b = make_benchmark(2, Scenario::kClear2Adverse, tiny_sizes());
  ClientDataset c;
  c.client_id = 0;
  c.images = {b.clients[0].images[0]};
  FedConfig cfg = quick_config(1);
  cfg.mode = LabelMode::kSup;
  cfg.agg = Aggregator::kFedAvg;
  cfg.batch_size = 1;
  cfg.augment = AugmentConfig::identity();
  cfg.augment.strong_labeled = true;
  const ParamSet w = random_params(4);
  // No strong perturbation: identical to the weak-view step.
  const auto g = loss_and_grad(w, pooled_ce({&c.images[0]}));
  EXPECT_LE(max_abs_diff(local_train(w, c, cfg, 0, nullptr).params, sgd_step(w, g.grads, cfg.schedule.base_lr)), 1e-14);
  cfg.augment.sigma_strong = 0.3;
  const auto strong = local_train(w, c, cfg, 0, nullptr).params;
  cfg.augment.strong_labeled = false;
  EXPECT_GT(max_abs_diff(strong, local_train(w, c, cfg, 0, nullptr).params), 0.0);
}

TEST(LocalTrain, UnsupStepLeavesEmbeddingsFrozen) {
  auto b = make_benchmark(3, Scenario::kClear2Adverse, tiny_sizes());
  FedConfig cfg = quick_config(1);
  cfg.tau = cfg.tau_t = cfg.tau_p = 0.0;
  const ParamSet w = random_params(5);
  const auto prior = make_prior_teacher(w, 0.0);
  const auto r = local_train(w, b.clients[1], cfg, 0, &prior);
  EXPECT_EQ(r.params.T, w.T);
  EXPECT_NE(r.params.W1, w.W1);
  EXPECT_NE(r.params.scale, w.scale);
}

TEST(LocalTrain, EmptyClientIsAnError) {
  ClientDataset empty;
  empty.client_id = 3;
  EXPECT_THROW(local_train(init_params(1, {}), empty, quick_config(1), 0, nullptr), ShapeError);
}

// ---------------------------------------------------------------------------
// Federation

TEST(Federation, ZeroRoundsReturnsInit) {
  const ParamSet w0 = init_params(1, {});
  const auto r = run_federation(quick_config(0), w0, {}, {});
  EXPECT_EQ(r.params, w0);
  EXPECT_TRUE(r.history.empty());
}

TEST(Federation, SingleClientFedAvgEqualsCentralizedTraining) {
  auto b = make_benchmark(4, Scenario::kClear2Adverse, tiny_sizes());
  const ParamSet w0 = random_params(6);
  const auto prior = make_prior_teacher(w0, 0.6);
  FedConfig cfg = quick_config(3);
  cfg.agg = Aggregator::kFedAvg;
  cfg.clients_per_round = 1;
  cfg.tau = cfg.tau_t = 0.5;
  std::vector<ClientDataset> one{b.clients[0]};
  one[0].client_id = 0;
  const auto fed = run_federation(cfg, w0, one, {}, &prior);

  ParamSet w = w0;
  for (std::size_t t = 0; t < cfg.rounds; ++t) w = local_train(w, one[0], cfg, t, &prior).params;
  EXPECT_LE(max_abs_diff(fed.params, w), 1e-12);
  EXPECT_LE(max_abs_diff(fed.params, cust(w0, one[0].images, cfg, &prior)), 1e-12);
}

TEST(Federation, OneLocalStepEqualsPooledSgdStep) {
  auto b = make_benchmark(5, Scenario::kClear2Adverse, tiny_sizes());
  std::vector<ClientDataset> clients(4);
  std::vector<const LabeledImage*> pooled;
  for (std::size_t k = 0; k < 4; ++k) {
    clients[k].client_id = static_cast<int>(k);
    clients[k].images = {b.clients[k].images[0], b.clients[k].images[1]};
  }
  for (const auto& c : clients)
    for (const auto& im : c.images) pooled.push_back(&im);
  FedConfig cfg = quick_config(1);
  cfg.agg = Aggregator::kFedAvg;
  cfg.mode = LabelMode::kSup;
  cfg.augment = AugmentConfig::identity();
  cfg.batch_size = 2;
  cfg.clients_per_round = 4;
  const ParamSet w0 = random_params(7);
  const auto fed = run_federation(cfg, w0, clients, {});
  const auto g = loss_and_grad(w0, pooled_ce(pooled));
  EXPECT_LE(max_abs_diff(fed.params, sgd_step(w0, g.grads, cfg.schedule.base_lr)), 1e-10);
}

TEST(Federation, DeterministicAcrossThreadCounts) {
  auto b = make_benchmark(6, Scenario::kClear2Adverse, tiny_sizes());
  const ParamSet w0 = random_params(8);
  const auto prior = make_prior_teacher(w0, 0.5);
  FedConfig cfg = quick_config(3);
  cfg.tau = cfg.tau_t = 0.5;
  cfg.threads = 1;
  const auto a = run_federation(cfg, w0, b.clients, b.eval, &prior);
  cfg.threads = 3;
  const auto c = run_federation(cfg, w0, b.clients, b.eval, &prior);
  EXPECT_EQ(a.params, c.params);
  ASSERT_EQ(a.history.size(), c.history.size());
  for (std::size_t t = 0; t < a.history.size(); ++t) {
    EXPECT_EQ(a.history[t].clients, c.history[t].clients);
    EXPECT_EQ(a.history[t].losses.total, c.history[t].losses.total);
    EXPECT_EQ(a.history[t].miou_eval, c.history[t].miou_eval);
  }
}

TEST(Federation, ClientFailureAbortsRound) {
  auto b = make_benchmark(7, Scenario::kClear2Adverse, tiny_sizes());
  auto clients = b.clients;
  clients[2].images.clear();
  FedConfig cfg = quick_config(2);
  cfg.clients_per_round = clients.size();
  try {
    run_federation(cfg, init_params(1, {}), clients, {});
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("client 2"), std::string::npos);
  }
}

TEST(Federation, ConfigValidation) {
  auto b = make_benchmark(7, Scenario::kClear2Adverse, tiny_sizes());
  FedConfig cfg = quick_config(1);
  cfg.clients_per_round = 99;
  EXPECT_THROW(run_federation(cfg, init_params(1, {}), b.clients, {}), ConfigError);
}

TEST(Federation, SourceFreeAfterPretraining) {
  RunConfig rc;
  rc.data = tiny_sizes();
  rc.pretrain.epochs = 1;
  rc.fed = quick_config(1);
  rc.cust_epochs = 1;
  Benchmark bench = build_benchmark(rc);
  const auto pre = pretrain_server(bench, rc);
  ASSERT_FALSE(bench.source.available());
  EXPECT_THROW((void)bench.source.images(), SourceAccessError);
  EXPECT_NO_THROW(federate(rc, pre.params, bench.clients, bench.eval));
  EXPECT_NO_THROW(centralized_self_training(rc, pre.params, bench));
}

// ---------------------------------------------------------------------------
// Centralized baselines

TEST(Cust, ZeroEpochsReturnsInit) {
  const ParamSet w0 = random_params(9);
  EXPECT_EQ(cust(w0, {}, quick_config(0)), w0);
}

TEST(Pretrain, ZeroEpochsAndDeterminism) {
  auto b = make_benchmark(8, Scenario::kClear2Adverse, tiny_sizes());
  const ParamSet init = init_params(8, {});
  PretrainConfig pc;
  pc.epochs = 0;
  EXPECT_EQ(pretrain(b.source.images(), init, pc).params, init);
  pc.epochs = 2;
  pc.unlabeled_fraction = 0.5;
  EXPECT_EQ(pretrain(b.source.images(), init, pc).params, pretrain(b.source.images(), init, pc).params);
  EXPECT_THROW(pretrain({}, init, pc), ConfigError);
}

TEST(Pretrain, SeparableToyReachesHighAccuracy) {
  const auto sig = class_signatures(2, 6);
  DomainSpec dom = identity_domain(6);
  dom.noise_sigma = 0.05;
  std::vector<LabeledImage> images;
  for (std::uint64_t s = 0; s < 24; ++s)
    images.push_back(render(gen_label_map(s, 8, 8, 2), 8, 8, dom, sig, s + 100));

  // Separability oracle: projection on the signature difference splits the classes.
  std::size_t separated = 0, total = 0;
  for (const auto& im : images)
    for (std::size_t i = 0; i < im.labels.size(); ++i, ++total) {
      double proj = 0.0, mid = 0.0;
      for (std::size_t k = 0; k < 6; ++k) {
        const double d = sig.at(0, k) - sig.at(1, k);
        proj += d * im.pixels[i * 6 + k];
        mid += d * 0.5 * (sig.at(0, k) + sig.at(1, k));
      }
      separated += ((proj > mid) == (im.labels[i] == 0)) ? 1 : 0;
    }
  ASSERT_EQ(separated, total);

  PretrainConfig pc;
  pc.epochs = 10;
  const auto r = pretrain(images, init_params(3, {6, 16, 8, 2}), pc);
  std::size_t correct = 0;
  for (const auto& im : images) {
    const auto pred = predict_labels(r.params, im.pixels);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == im.labels[i] ? 1 : 0;
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(total), 0.95);
  EXPECT_EQ(r.epoch_loss.size(), 10u);
}

// ---------------------------------------------------------------------------
// Prior teacher

TEST(PriorTeacher, FrozenSnapshot) {
  auto b = make_benchmark(9, Scenario::kClear2Adverse, tiny_sizes());
  const ParamSet w = random_params(10);
  const auto prior = make_prior_teacher(w, 0.0);
  const auto& img = b.eval[0].pixels;
  const auto a = prior_labels(prior, img);
  EXPECT_EQ(a.labels, predict_labels(w, img));
  EXPECT_EQ(a.masked_in(), a.size());
  EXPECT_EQ(prior_labels(prior, img).labels, a.labels);

  const auto strict = make_prior_teacher(w, 1.0 + 1e-9);
  EXPECT_EQ(prior_labels(strict, img).masked_in(), 0u);
  EXPECT_EQ(prior_distill_loss(predict_probs(w, img), predict_probs(w, img), strict.tau_p), 0.0);
}
