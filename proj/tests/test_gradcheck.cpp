#include <gtest/gtest.h>

#include <cctype>

#include "frieren/gradcheck.hpp"

using namespace frieren;

class GradcheckTerm : public ::testing::TestWithParam<GradTerm> {};

TEST_P(GradcheckTerm, CentralDifferencesAgree) {
  const auto r = gradcheck(GetParam());
  EXPECT_EQ(r.trials, 20u);
  EXPECT_GT(r.checked, 0u);
  EXPECT_EQ(r.failures, 0u) << "max relative error " << r.max_rel_error;
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_TRUE(r.frozen_zero);
  EXPECT_TRUE(r.nonzero_loss);
}

INSTANTIATE_TEST_SUITE_P(AllTerms, GradcheckTerm, ::testing::ValuesIn(kAllGradTerms),
                         [](const auto& info) {
                           std::string n = to_string(info.param);
                           for (auto& c : n)
                             if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
                           return n;
                         });

TEST(Gradcheck, RelativeErrorDefinition) {
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1.0, 0.9), 0.1);
  EXPECT_DOUBLE_EQ(relative_error(-2.0, 2.0), 2.0);
}
