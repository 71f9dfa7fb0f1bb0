#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "frieren/eval.hpp"
#include "frieren/rng.hpp"

using namespace frieren;

namespace {

std::vector<int> random_map(Rng& rng, std::size_t n, int C) {
  std::vector<int> m(n);
  for (auto& v : m) v = static_cast<int>(rng.integer(0, C - 1));
  return m;
}

// IoU from explicit pixel-index sets.
std::vector<double> set_oracle(const std::vector<int>& y, const std::vector<int>& p, int C) {
  std::vector<double> iou(static_cast<std::size_t>(C), std::nan(""));
  for (int c = 0; c < C; ++c) {
    std::set<std::size_t> G, P, I, U;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] == c) G.insert(i);
      if (p[i] == c) P.insert(i);
    }
    for (auto i : G) (P.count(i) ? I : U).insert(i);
    U.insert(G.begin(), G.end());
    U.insert(P.begin(), P.end());
    if (!U.empty()) iou[static_cast<std::size_t>(c)] = static_cast<double>(I.size()) / static_cast<double>(U.size());
  }
  return iou;
}

}  // namespace

TEST(Accumulate, EmptyAndDiagonal) {
  ConfusionMatrix cm(3);
  EXPECT_EQ(accumulate(cm, {}, {}), cm);
  const std::vector<int> y{0, 1, 2, 2};
  const auto d = accumulate(cm, y, y);
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(d.at(g, p) > 0, g == p);
  EXPECT_EQ(d.total(), 4u);
}

TEST(Accumulate, MatchesDoubleLoopAndOrderIndependent) {
  Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    const auto y = random_map(rng, 64, 4), p = random_map(rng, 64, 4);
    const auto cm = accumulate(ConfusionMatrix(4), y, p);
    for (int g = 0; g < 4; ++g)
      for (int q = 0; q < 4; ++q) {
        std::uint64_t n = 0;
        for (std::size_t i = 0; i < 64; ++i) n += (y[i] == g && p[i] == q) ? 1 : 0;
        EXPECT_EQ(cm.at(static_cast<std::size_t>(g), static_cast<std::size_t>(q)), n);
      }
    const std::span<const int> ys(y), ps(p);
    ConfusionMatrix a = accumulate(ConfusionMatrix(4), ys.subspan(32), ps.subspan(32));
    a += accumulate(ConfusionMatrix(4), ys.first(32), ps.first(32));
    EXPECT_EQ(a, cm);
  }
}

TEST(Miou, PerfectPrediction) {
  const std::vector<int> y{0, 1, 2, 1};
  const auto r = miou(accumulate(ConfusionMatrix(3), y, y));
  for (double v : r.per_class) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(r.mean, 1.0);
}

TEST(Miou, HalfHalfConstantPrediction) {
  const std::vector<int> y{0, 0, 1, 1}, p{0, 0, 0, 0};
  const auto r = miou(accumulate(ConfusionMatrix(2), y, p));
  EXPECT_EQ(r.per_class[0], 0.5);
  EXPECT_EQ(r.per_class[1], 0.0);
  EXPECT_EQ(r.mean, 0.25);
}

TEST(Miou, NoClassesPresentIsAnError) {
  try {
    miou(ConfusionMatrix(3));
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_STREQ(e.what(), "no classes present");
  }
}

TEST(Miou, SetArithmeticOracle) {
  Rng rng(32);
  for (int t = 0; t < 200; ++t) {
    const int C = static_cast<int>(rng.integer(2, 6));
    const auto n = static_cast<std::size_t>(rng.integer(1, 40));
    const auto y = random_map(rng, n, C), p = random_map(rng, n, C);
    const auto r = miou(accumulate(ConfusionMatrix(static_cast<std::size_t>(C)), y, p));
    const auto want = set_oracle(y, p, C);
    double sum = 0.0;
    int used = 0;
    for (std::size_t c = 0; c < want.size(); ++c) {
      if (std::isnan(want[c])) {
        EXPECT_TRUE(std::isnan(r.per_class[c]));
        EXPECT_EQ(r.present[c], 0);
        continue;
      }
      EXPECT_EQ(r.per_class[c], want[c]);
      EXPECT_GE(r.per_class[c], 0.0);
      EXPECT_LE(r.per_class[c], 1.0);
      sum += want[c];
      ++used;
    }
    EXPECT_EQ(r.mean, sum / used);
  }
}

TEST(Miou, ClassPermutationEquivariance) {
  Rng rng(33);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  for (int t = 0; t < 50; ++t) {
    auto y = random_map(rng, 50, 5), p = random_map(rng, 50, 5);
    const auto r = miou(accumulate(ConfusionMatrix(5), y, p));
    for (auto& v : y) v = perm[static_cast<std::size_t>(v)];
    for (auto& v : p) v = perm[static_cast<std::size_t>(v)];
    const auto q = miou(accumulate(ConfusionMatrix(5), y, p));
    for (std::size_t c = 0; c < 5; ++c) {
      const double a = r.per_class[c], b = q.per_class[static_cast<std::size_t>(perm[c])];
      if (std::isnan(a)) EXPECT_TRUE(std::isnan(b));
      else EXPECT_EQ(a, b);
    }
  }
}
