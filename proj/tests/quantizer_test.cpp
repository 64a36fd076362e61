#include <gtest/gtest.h>

#include <cmath>

#include "qlns/quantize.hpp"
#include "qlns/rng.hpp"
#include "test_util.hpp"

using namespace qlns;

TEST(Quantize, WorkedExample) {
  // b=2 gives the code range [-2, 1].
  const QuantSpec spec{2, 0.5};
  const auto v = quantize(Tensor::vector({0.4, -1.3, 2.0}), spec);
  EXPECT_EQ(v.codes, (std::vector<long>{1, -2, 1}));
  EXPECT_EQ(v.w_hat.data(), (std::vector<double>{0.5, -1.0, 0.5}));
  EXPECT_NEAR(v.delta[0], -0.1, 1e-15);
  EXPECT_NEAR(v.delta[1], -0.3, 1e-15);
  EXPECT_NEAR(v.delta[2], 1.5, 1e-15);
}

TEST(Quantize, ZeroInput) {
  const auto v = quantize(Tensor::vector({0, 0, 0}), QuantSpec{4, 0.25});
  EXPECT_EQ(v.codes, (std::vector<long>{0, 0, 0}));
  EXPECT_EQ(v.w_hat.data(), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(v.delta.data(), (std::vector<double>{0, 0, 0}));
}

TEST(Quantize, Idempotent) {
  Rng rng(3);
  Tensor w({64});
  for (auto& x : w.data()) x = rng.uniform(-2.0, 2.0);
  const QuantSpec spec{4, 0.17};
  const auto once = quantize(w, spec);
  const auto twice = quantize(once.w_hat, spec);
  EXPECT_EQ(once.w_hat.data(), twice.w_hat.data());
}

TEST(Quantize, TiesRoundHalfToEven) {
  const QuantSpec spec{8, 1.0};
  const auto v = quantize(Tensor::vector({0.5, 1.5, 2.5, -0.5, -1.5}), spec);
  EXPECT_EQ(v.codes, (std::vector<long>{0, 2, 2, 0, -2}));
}

TEST(Quantize, RejectsBadStep) {
  EXPECT_THROW(quantize(Tensor::vector({1.0}), QuantSpec{4, 0.0}), std::invalid_argument);
  EXPECT_THROW(quantize(Tensor::vector({1.0}), QuantSpec{4, -1.0}), std::invalid_argument);
}

TEST(Quantize, ScaleCovariance) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor w({16});
    for (auto& x : w.data()) x = rng.uniform(-3.0, 3.0);
    const double s = rng.uniform(0.05, 0.8);
    const int bits = 2 + static_cast<int>(rng.below(4));
    // powers of two rescale exactly in binary floating point
    const double c = std::ldexp(1.0, static_cast<int>(rng.below(7)) - 3);
    Tensor cw = w;
    for (auto& x : cw.data()) x *= c;
    const auto base = quantize(w, QuantSpec{bits, s});
    const auto scaled = quantize(cw, QuantSpec{bits, c * s});
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_DOUBLE_EQ(scaled.w_hat[i], c * base.w_hat[i]);
    }
  }
}

TEST(Quantize, MatchesScalarReference) {
  Rng rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const int bits = (trial % 3 == 0) ? 2 : (trial % 3 == 1 ? 4 : 8);
    const double s = rng.uniform(0.01, 1.5);
    Tensor w({32});
    for (auto& x : w.data()) x = rng.uniform(-4.0, 4.0);
    const auto v = quantize(w, QuantSpec{bits, s});
    const QuantSpec spec{bits, s};
    for (std::size_t i = 0; i < w.size(); ++i) {
      const auto ref = testutil::ref_quantize_scalar(w[i], s, bits);
      EXPECT_EQ(v.codes[i], ref.code);
      EXPECT_EQ(v.w_hat[i], ref.w_hat);
      EXPECT_EQ(v.delta[i], ref.delta);
      EXPECT_GE(v.codes[i], spec.q_min());
      EXPECT_LE(v.codes[i], spec.q_max());
      // in-range weights stay within half a bin of their code
      const double r = w[i] / s;
      if (std::fabs(r) <= static_cast<double>(spec.q_max()) + 0.5 &&
          r >= static_cast<double>(spec.q_min()) - 0.5) {
        EXPECT_LE(std::fabs(v.delta[i]), s / 2 + 1e-15);
      }
    }
  }
}

TEST(Ste, StraightThroughInRange) {
  const QuantSpec spec{8, 1.0};
  Tensor w = Tensor::vector({0.3, -0.7, 2.2});
  Tensor up = Tensor::vector({1, 1, 1});
  const auto g = ste_backward(up, w, spec);
  EXPECT_EQ(g.grad_w.data(), (std::vector<double>{1, 1, 1}));
}

TEST(Ste, ClippedCoordinateBlocksGradient) {
  const QuantSpec spec{2, 0.5};  // range [-2, 1]
  Tensor w = Tensor::vector({5.0, 0.2});
  Tensor up = Tensor::vector({1.0, 1.0});
  const auto g = ste_backward(up, w, spec);
  EXPECT_DOUBLE_EQ(g.grad_w[0], 0.0);  // clipped at q_max
  EXPECT_DOUBLE_EQ(g.grad_w[1], 1.0);
}

TEST(Ste, StepGradientSingleWeight) {
  const QuantSpec spec{2, 0.5};
  const auto g = ste_backward(Tensor::vector({1.0}), Tensor::vector({0.4}), spec);
  EXPECT_NEAR(g.grad_step, 0.2, 1e-12);  // (round(0.8) - 0.8) / sqrt(1*1)
}

TEST(Ste, ClosedFormAgreement) {
  // Re-derive the rule coordinate by coordinate and compare.
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const int bits = 2 + static_cast<int>(rng.below(3)) * 2;
    const QuantSpec spec{bits, rng.uniform(0.05, 0.9)};
    Tensor w({24});
    Tensor up({24});
    for (auto& x : w.data()) x = rng.uniform(-3.0, 3.0);
    for (auto& x : up.data()) x = rng.uniform(-1.0, 1.0);
    const auto g = ste_backward(up, w, spec);
    const double qmin = spec.q_min(), qmax = spec.q_max();
    const double gs = 1.0 / std::sqrt(24.0 * qmax);
    double expect_step = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double r = w[i] / spec.step;
      if (r < qmin) {
        EXPECT_EQ(g.grad_w[i], 0.0);
        expect_step += qmin * up[i];
      } else if (r > qmax) {
        EXPECT_EQ(g.grad_w[i], 0.0);
        expect_step += qmax * up[i];
      } else {
        EXPECT_EQ(g.grad_w[i], up[i]);
        expect_step += (std::rint(r) - r) * up[i];
      }
    }
    EXPECT_NEAR(g.grad_step, expect_step * gs, 1e-12);
  }
}

TEST(InitStep, FormulaAndFallback) {
  EXPECT_DOUBLE_EQ(init_step(Tensor::vector({1, -1, 1, -1}), 2), 2.0);
  EXPECT_DOUBLE_EQ(init_step(Tensor::vector({0, 0}), 4), 1e-3);
}

TEST(InitStep, Homogeneity) {
  Rng rng(5);
  Tensor w({10});
  for (auto& x : w.data()) x = rng.uniform(-1.0, 1.0);
  const double s0 = init_step(w, 4);
  Tensor w3 = w;
  for (auto& x : w3.data()) x *= 3.0;
  EXPECT_NEAR(init_step(w3, 4), 3.0 * s0, 1e-12);
}

TEST(FakeQuantLayer, BackwardBeforeQuantizeThrows) {
  FakeQuantLayer layer(QuantSpec{4, 0.2});
  const Tensor w = Tensor::vector({0.5});
  EXPECT_THROW(layer.backward(Tensor::vector({1.0}), w), std::logic_error);
  layer.quantize_weights(w);
  EXPECT_NO_THROW(layer.backward(Tensor::vector({1.0}), w));
}
