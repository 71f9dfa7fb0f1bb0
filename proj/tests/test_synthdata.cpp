#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "frieren/eval.hpp"
#include "frieren/synthdata.hpp"

using namespace frieren;

namespace {

std::set<std::uint64_t> uids(const ClientDataset& c) {
  std::set<std::uint64_t> s;
  for (const auto& im : c.images) s.insert(im.uid);
  return s;
}

void expect_disjoint(const std::vector<ClientDataset>& clients, const std::vector<LabeledImage>* pool = nullptr) {
  std::set<std::uint64_t> seen, all;
  if (pool)
    for (const auto& im : *pool) all.insert(im.uid);
  for (const auto& c : clients)
    for (auto u : uids(c)) {
      EXPECT_TRUE(seen.insert(u).second) << "uid " << u << " appears twice";
      if (pool) {
        EXPECT_TRUE(all.count(u)) << "uid " << u << " not in pool";
      }
    }
}

/// Least-squares one-vs-rest linear classifier over pixels, fit by normal equations.
class LinearProbe {
 public:
  LinearProbe(const std::vector<LabeledImage>& images, std::size_t C) : C_(C) {
    const std::size_t ch = images.front().pixels.dim(2), D = ch + 1;
    std::vector<double> A(D * D, 0.0), Bm(D * C, 0.0);
    for (const auto& im : images)
      for (std::size_t i = 0; i < im.labels.size(); ++i) {
        const auto f = features(im, i);
        for (std::size_t a = 0; a < D; ++a) {
          for (std::size_t b = 0; b < D; ++b) A[a * D + b] += f[a] * f[b];
          Bm[a * C + static_cast<std::size_t>(im.labels[i])] += f[a];
        }
      }
    // Gauss-Jordan with partial pivoting on [A | B].
    for (std::size_t col = 0; col < D; ++col) {
      std::size_t piv = col;
      for (std::size_t r = col + 1; r < D; ++r)
        if (std::abs(A[r * D + col]) > std::abs(A[piv * D + col])) piv = r;
      for (std::size_t k = 0; k < D; ++k) std::swap(A[col * D + k], A[piv * D + k]);
      for (std::size_t k = 0; k < C; ++k) std::swap(Bm[col * C + k], Bm[piv * C + k]);
      const double d = A[col * D + col];
      for (std::size_t r = 0; r < D; ++r) {
        if (r == col) continue;
        const double f = A[r * D + col] / d;
        for (std::size_t k = 0; k < D; ++k) A[r * D + k] -= f * A[col * D + k];
        for (std::size_t k = 0; k < C; ++k) Bm[r * C + k] -= f * Bm[col * C + k];
      }
    }
    W_.assign(D * C, 0.0);
    for (std::size_t r = 0; r < D; ++r)
      for (std::size_t k = 0; k < C; ++k) W_[r * C + k] = Bm[r * C + k] / A[r * D + r];
  }

  [[nodiscard]] double miou_on(const std::vector<LabeledImage>& images) const {
    ConfusionMatrix cm(C_);
    for (const auto& im : images)
      for (std::size_t i = 0; i < im.labels.size(); ++i) {
        const auto f = features(im, i);
        std::size_t best = 0;
        double bv = -1e300;
        for (std::size_t k = 0; k < C_; ++k) {
          double s = 0.0;
          for (std::size_t a = 0; a < f.size(); ++a) s += f[a] * W_[a * C_ + k];
          if (s > bv) bv = s, best = k;
        }
        cm.add(static_cast<std::size_t>(im.labels[i]), best);
      }
    return miou(cm).mean;
  }

 private:
  static std::vector<double> features(const LabeledImage& im, std::size_t i) {
    const std::size_t ch = im.pixels.dim(2);
    std::vector<double> f(ch + 1, 1.0);
    for (std::size_t k = 0; k < ch; ++k) f[k] = im.pixels[i * ch + k];
    return f;
  }
  std::size_t C_;
  std::vector<double> W_;
};

}  // namespace

TEST(LabelMap, DeterministicAndSingleClass) {
  EXPECT_EQ(gen_label_map(5, 16, 16, 5), gen_label_map(5, 16, 16, 5));
  EXPECT_NE(gen_label_map(5, 16, 16, 5), gen_label_map(6, 16, 16, 5));
  for (int v : gen_label_map(7, 16, 16, 1)) EXPECT_EQ(v, 0);
}

TEST(LabelMap, EveryClassHasAtLeastTwoPercentShare) {
  std::vector<double> share(5, 0.0);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto m = gen_label_map(s, 16, 16, 5);
    for (int v : m) share[static_cast<std::size_t>(v)] += 1.0 / (256.0 * 100.0);
  }
  for (double v : share) EXPECT_GE(v, 0.02);
}

TEST(Render, IdentityDomainReproducesSignatures) {
  const auto sig = class_signatures(5, 6);
  const auto labels = gen_label_map(3, 8, 8, 5);
  const auto img = render(labels, 8, 8, identity_domain(6), sig, 11);
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(img.pixels[i * 6 + k], sig.at(static_cast<std::size_t>(labels[i]), k));
}

TEST(Render, NoiseFreeDomainsAreAffinelyRelated) {
  const auto sig = class_signatures(5, 6);
  const auto labels = gen_label_map(4, 8, 8, 5);
  DomainSpec a{1, "a", {0.5, 0.7, 0.9, 1.1, 1.3, 1.5}, {0.1, -0.2, 0.3, 0.0, 0.05, -0.4}, 0.0};
  DomainSpec b{2, "b", {1.2, 0.4, 0.8, 2.0, 0.6, 1.0}, {-0.3, 0.2, 0.0, 0.1, -0.1, 0.25}, 0.0};
  const auto ia = render(labels, 8, 8, a, sig, 1), ib = render(labels, 8, 8, b, sig, 2);
  // x_b = g_b (x_a / g_a - bias_a + bias_b)
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t k = 0; k < 6; ++k)
      EXPECT_NEAR(ib.pixels[i * 6 + k], b.gain[k] * (ia.pixels[i * 6 + k] / a.gain[k] - a.bias[k] + b.bias[k]), 1e-12);
}

TEST(Render, NoiseVarianceMatchesSigma) {
  const auto sig = class_signatures(5, 6);
  const std::vector<int> labels(100 * 100, 2);
  for (double sigma : {0.05, 0.3}) {
    DomainSpec d = identity_domain(6);
    d.noise_sigma = sigma;
    const auto img = render(labels, 100, 100, d, sig, 17);
    for (std::size_t k = 0; k < 6; ++k) {
      double m = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < 10000; ++i) m += img.pixels[i * 6 + k];
      m /= 10000.0;
      for (std::size_t i = 0; i < 10000; ++i) s2 += std::pow(img.pixels[i * 6 + k] - m, 2);
      s2 /= 9999.0;
      EXPECT_NEAR(s2, sigma * sigma, 0.2 * sigma * sigma);
    }
  }
}

TEST(Partition, CityStyle) {
  const auto b = make_benchmark(3, Scenario::kSyn2Real);
  EXPECT_EQ(b.clients.size(), 144u);
  const auto pool = b.target_pool();
  for (const auto& c : b.clients) {
    EXPECT_GE(c.size(), 10u);
    EXPECT_LE(c.size(), 45u);
    EXPECT_EQ(c.domains.size(), 1u);
  }
  expect_disjoint(b.clients);
}

TEST(Partition, WeatherStyle) {
  const auto b = make_benchmark(3, Scenario::kClear2Adverse);
  EXPECT_EQ(b.clients.size(), 28u);
  for (const auto& c : b.clients) {
    EXPECT_GE(c.domains.size(), 2u);
    EXPECT_LE(c.domains.size(), 4u);
  }
  expect_disjoint(b.clients);
}

TEST(Partition, UnionIsSubsetOfPool) {
  const auto sig = class_signatures(5, 6);
  std::vector<LabeledImage> pool;
  std::uint64_t uid = 0;
  for (int d = 1; d <= 4; ++d) {
    auto dom = identity_domain(6, d);
    for (int j = 0; j < 40; ++j) {
      auto im = render(gen_label_map(static_cast<std::uint64_t>(j), 4, 4, 5), 4, 4, dom, sig, static_cast<std::uint64_t>(j));
      im.uid = uid++;
      pool.push_back(std::move(im));
    }
  }
  expect_disjoint(partition_weather_style(pool, 10, 4, 1), &pool);
  expect_disjoint(partition_city_style(pool, 5, 10, 20, 1), &pool);
  EXPECT_THROW(partition_city_style(pool, 100, 10, 45, 1), ConfigError);
}

TEST(Benchmark, HeldOutDomainsAndDeterminism) {
  for (auto sc : {Scenario::kClear2Adverse, Scenario::kSyn2Real}) {
    const auto a = make_benchmark(9, sc), b = make_benchmark(9, sc);
    for (const auto& d : a.client_domains) {
      EXPECT_NE(d.id, a.eval_domain.id);
      EXPECT_NE(d.id, a.source_domain.id);
      EXPECT_TRUE(d.gain != a.eval_domain.gain || d.bias != a.eval_domain.bias);
    }
    EXPECT_EQ(a.source.images().size(), 256u);
    EXPECT_EQ(a.eval.size(), 64u);
    ASSERT_EQ(a.clients.size(), b.clients.size());
    for (std::size_t c = 0; c < a.clients.size(); ++c)
      for (std::size_t j = 0; j < a.clients[c].size(); ++j) {
        EXPECT_EQ(a.clients[c].images[j].pixels, b.clients[c].images[j].pixels);
        EXPECT_TRUE(a.clients[c].images[j].pixels.all_finite());
      }
    for (std::size_t j = 0; j < a.eval.size(); ++j) EXPECT_EQ(a.eval[j].pixels, b.eval[j].pixels);
  }
}

TEST(Benchmark, DiscardedSourceRefusesAccess) {
  auto b = make_benchmark(1, Scenario::kClear2Adverse);
  ASSERT_TRUE(b.source.available());
  b.source.discard();
  EXPECT_THROW((void)b.source.images(), SourceAccessError);
}

TEST(Benchmark, LinearProbeLosesTenPointsOnStrongestShift) {
  const auto b = make_benchmark(1, Scenario::kClear2Adverse);
  const LinearProbe probe(b.source.images(), b.sizes.classes);
  const double on_source = probe.miou_on(b.source.images());
  double worst = 1.0;
  for (const auto& d : b.client_domains) {
    std::vector<LabeledImage> imgs;
    for (const auto& im : b.target_pool())
      if (im.domain == d.id) imgs.push_back(im);
    worst = std::min(worst, probe.miou_on(imgs));
  }
  RecordProperty("probe_source_miou", std::to_string(on_source));
  RecordProperty("probe_worst_target_miou", std::to_string(worst));
  EXPECT_GE(on_source - worst, 0.10);
}

TEST(LabelModes, StripAccordingToMode) {
  auto b = make_benchmark(2, Scenario::kClear2Adverse);
  auto semi = b.clients;
  apply_label_mode(semi, LabelMode::kSemisup, 0.25, 2);
  for (const auto& c : semi) {
    std::size_t kept = 0;
    for (const auto& im : c.images) kept += im.labeled() ? 1 : 0;
    EXPECT_EQ(kept, static_cast<std::size_t>(std::ceil(0.25 * static_cast<double>(c.size()) - 1e-9)));
  }
  auto un = b.clients;
  apply_label_mode(un, LabelMode::kUnsup, 0.25, 2);
  for (const auto& c : un)
    for (const auto& im : c.images) EXPECT_FALSE(im.labeled());
  EXPECT_THROW(apply_label_mode(un, LabelMode::kSup, 1.0, 2), ConfigError);
}
