#include <gtest/gtest.h>

#include <cmath>

#include "trilevel/ops.hpp"
#include "trilevel/optim.hpp"

using namespace trilevel;

TEST(AdamW, ZeroGradientZeroDecayLeavesParams) {
  Tensor<double> p({3}, {1.0, -2.0, 0.5}, true);
  AdamW<double> opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8, 0.0});
  p.node().ensure_grad();
  opt.step();
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(p.data()[1], -2.0);
  EXPECT_EQ(p.data()[2], 0.5);
}

TEST(AdamW, FirstStepClosedForm) {
  Tensor<double> p({}, {1.0}, true);
  AdamW<double> opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8, 0.0});
  p.node().ensure_grad()[0] = 1.0;
  opt.step();
  EXPECT_NEAR(p.item(), 0.9, 1e-6);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdamW, QuadraticBowlDecreasesMonotonically) {
  Tensor<double> p({4}, {3.0, -2.0, 1.5, 4.0}, true);
  AdamW<double> opt({{"p", p}}, {0.1, 0.9, 0.999, 1e-8, 0.01});
  double prev = INFINITY;
  for (int i = 0; i < 10; ++i) {
    double loss = 0;
    auto& g = p.node().ensure_grad();
    for (std::size_t j = 0; j < 4; ++j) {
      loss += p.data()[j] * p.data()[j];
      g[j] = 2 * p.data()[j];
    }
    EXPECT_LT(loss, prev);
    prev = loss;
    opt.step();
    EXPECT_EQ(opt.step_count(), static_cast<std::size_t>(i + 1));
  }
}

TEST(AdamW, ZeroLearningRateIsBitIdentical) {
  Tensor<float> p({2, 2}, {0.1f, -0.7f, 3e-8f, 12.5f}, true);
  const std::vector<float> before(p.data().begin(), p.data().end());
  AdamW<float> opt({{"w", p}}, {0.0, 0.9, 0.999, 1e-8, 0.05});
  for (int i = 0; i < 3; ++i) {
    auto& g = p.node().ensure_grad();
    for (auto& x : g) x = 0.3f;
    opt.step();
  }
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().end()), before);
}

TEST(AdamW, MissingGradNamesParameter) {
  Tensor<double> a({1}, {1.0}, true), b({1}, {1.0}, true);
  AdamW<double> opt({{"a", a}, {"layer.b", b}}, {});
  a.node().ensure_grad();
  try {
    opt.step();
    FAIL();
  } catch (const UnpopulatedGradientError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.b"), std::string::npos);
  }
}

TEST(AdamW, MomentShapesMatchParams) {
  Tensor<double> a({2, 3}, std::vector<double>(6, 1.0), true);
  AdamW<double> opt({{"a", a}}, {});
  EXPECT_EQ(opt.first_moment(0).size(), 6u);
  EXPECT_EQ(opt.second_moment(0).size(), 6u);
}

TEST(Cosine, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_schedule(0, 10, 1.0, 0.7), 1.0);
  EXPECT_DOUBLE_EQ(cosine_schedule(10, 10, 1.0, 0.7), 0.7);
  EXPECT_NEAR(cosine_schedule(5, 10, 1.0, 0.7), 0.85, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_schedule(25, 10, 1.0, 0.7), 0.7);
}

TEST(LearningRate, WarmupThenCosineToFloor) {
  EXPECT_DOUBLE_EQ(learning_rate_at(0, 60, 5, 5e-4), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate_at(4, 60, 5, 5e-4), 5e-4);
  EXPECT_DOUBLE_EQ(learning_rate_at(5, 60, 5, 5e-4), 5e-4);
  EXPECT_NEAR(learning_rate_at(60, 60, 5, 5e-4), 1e-5, 1e-18);
  for (std::size_t e = 5; e < 59; ++e) EXPECT_GE(learning_rate_at(e, 60, 5, 5e-4), learning_rate_at(e + 1, 60, 5, 5e-4));
}
