#include <gtest/gtest.h>

#include <cmath>

#include "qlns/data.hpp"
#include "qlns/eval.hpp"
#include "qlns/landscape.hpp"
#include "qlns/model.hpp"

using namespace qlns;

namespace {

ArchSpec small_mlp() {
  ArchSpec a;
  a.kind = ArchKind::kMlp;
  a.depth_multiplier = 1;
  a.width_multiplier = 1;
  a.base_width = 6;
  a.input_shape = {2};
  a.classes = 1;
  a.task = TaskKind::kRegression;
  return a;
}

Model quadratic_model() {
  ArchSpec a;
  a.kind = ArchKind::kLinear;
  a.input_shape = {2};
  a.classes = 1;
  a.task = TaskKind::kRegression;
  Model m = build(a, 1);
  m.state.param("fc1.weight").data().assign(2, 0.0);
  m.state.param("fc1.bias").data().assign(1, 0.0);
  return m;
}

Dataset quadratic_data() {
  Dataset d;
  const double c = std::sqrt(2.0);
  d.x = Tensor({2, 2}, {c, 0.0, 0.0, c});
  d.y = Tensor({2, 1}, {0.0, 0.0});
  return d;
}

}  // namespace

TEST(Directions, FilterNormsMatchWeights) {
  const Model m = build(small_mlp(), 3);
  const Directions dirs = sample_directions(m, 42);
  EXPECT_FALSE(dirs.degenerate);
  const auto w = flat_weights(m.state, WeightSet::kCurrent);
  for (const auto& span : weight_layout(m.state)) {
    const std::size_t blocks = span.shape[0];
    const std::size_t len = span.count / blocks;
    for (std::size_t b = 0; b < blocks; ++b) {
      double wn = 0.0, dn = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double wv = w[span.offset + b * len + i];
        const double dv = dirs.d1[span.offset + b * len + i];
        wn += wv * wv;
        dn += dv * dv;
      }
      EXPECT_NEAR(std::sqrt(dn), std::sqrt(wn), 1e-12 * std::max(1.0, std::sqrt(wn)));
    }
  }
}

TEST(Directions, ZeroWeightsAreDegenerate) {
  Model m = build(small_mlp(), 3);
  for (std::size_t i = 0; i < m.state.count(); ++i) {
    for (auto& v : m.state.param(i).data()) v = 0.0;
  }
  const Directions dirs = sample_directions(m, 1);
  EXPECT_TRUE(dirs.degenerate);
  for (double v : dirs.d1) EXPECT_EQ(v, 0.0);
  for (double v : dirs.d2) EXPECT_EQ(v, 0.0);
}

TEST(Directions, SeedDeterminism) {
  const Model m = build(small_mlp(), 3);
  const Directions a = sample_directions(m, 9);
  const Directions b = sample_directions(m, 9);
  EXPECT_EQ(a.d1, b.d1);
  EXPECT_EQ(a.d2, b.d2);
  const Directions c = sample_directions(m, 10);
  EXPECT_NE(a.d1, c.d1);
}

TEST(Grid, ZeroDirectionsGiveConstantGrid) {
  const Model m = build(small_mlp(), 5);
  const Dataset d = make_linear_regression(12, 2, 1, 0.1, 3);
  Directions zero;
  zero.d1.assign(flat_weights(m.state, WeightSet::kCurrent).size(), 0.0);
  zero.d2 = zero.d1;
  const LandscapeGrid grid = evaluate_grid(m, d, zero, 1.0, 5);
  const double clean = evaluate(m, d).loss;
  for (const auto& row : grid.losses) {
    for (double v : row) EXPECT_EQ(v, clean);
  }
  EXPECT_EQ(grid.center_loss, clean);
}

TEST(Grid, QuadraticClosedForm) {
  const Model m = quadratic_model();
  const Dataset d = quadratic_data();
  Directions dirs;
  dirs.d1 = {1.0, 0.0};
  dirs.d2 = {0.0, 1.0};
  const LandscapeGrid grid = evaluate_grid(m, d, dirs, 1.0, 9);
  for (std::size_t i = 0; i < grid.alphas.size(); ++i) {
    for (std::size_t j = 0; j < grid.betas.size(); ++j) {
      const double expected = grid.alphas[i] * grid.alphas[i] + grid.betas[j] * grid.betas[j];
      EXPECT_NEAR(grid.losses[i][j], expected, 1e-9);
    }
  }
  EXPECT_NEAR(grid.center_loss, 0.0, 1e-12);
}

TEST(Grid, CenterMatchesTrainingLossAndWeightsRestored) {
  Model m = build(small_mlp(), 7);
  const Dataset d = make_linear_regression(20, 2, 1, 0.2, 5);
  const auto before = flat_weights(m.state, WeightSet::kCurrent);
  const double clean = evaluate(m, d).loss;
  const LandscapeGrid grid = evaluate_grid(m, d, 31, 1.0, 5);
  EXPECT_NEAR(grid.center_loss, clean, 1e-9 * std::max(1.0, std::fabs(clean)));
  EXPECT_EQ(flat_weights(m.state, WeightSet::kCurrent), before);
}

TEST(Grid, EvenStepsRejected) {
  const Model m = build(small_mlp(), 7);
  const Dataset d = make_linear_regression(8, 2, 1, 0.2, 5);
  EXPECT_THROW(evaluate_grid(m, d, 1, 1.0, 8), std::invalid_argument);
}

TEST(Grid, CenterIsLocalMinimumAlongAxesForConvexFit) {
  // Linear least squares: put the model at the exact optimum, where every
  // slice direction must not decrease the loss.
  const Dataset d = make_linear_regression(40, 2, 1, 0.1, 11);
  // normal equations for [x 1] beta = y
  double a00 = 0, a01 = 0, a02 = 0, a11 = 0, a12 = 0, a22 = 0;
  double b0 = 0, b1 = 0, b2 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x0 = d.x[i * 2], x1 = d.x[i * 2 + 1], y = d.y[i];
    a00 += x0 * x0; a01 += x0 * x1; a02 += x0;
    a11 += x1 * x1; a12 += x1; a22 += 1.0;
    b0 += x0 * y; b1 += x1 * y; b2 += y;
  }
  // solve the 3x3 system by elimination
  double mat[3][4] = {{a00, a01, a02, b0}, {a01, a11, a12, b1}, {a02, a12, a22, b2}};
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::fabs(mat[r][col]) > std::fabs(mat[pivot][col])) pivot = r;
    }
    std::swap(mat[col], mat[pivot]);
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double f = mat[r][col] / mat[col][col];
      for (int c = col; c < 4; ++c) mat[r][c] -= f * mat[col][c];
    }
  }
  Model m = build(ArchSpec{ArchKind::kLinear, 1, 1, 8, {2}, 1, TaskKind::kRegression}, 1);
  m.state.param("fc1.weight")[0] = mat[0][3] / mat[0][0];
  m.state.param("fc1.weight")[1] = mat[1][3] / mat[1][1];
  m.state.param("fc1.bias")[0] = mat[2][3] / mat[2][2];

  const LandscapeGrid grid = evaluate_grid(m, d, 13, 0.5, 5);
  const std::size_t c = 2;
  EXPECT_LE(grid.center_loss, grid.losses[c - 1][c] + 1e-6);
  EXPECT_LE(grid.center_loss, grid.losses[c + 1][c] + 1e-6);
  EXPECT_LE(grid.center_loss, grid.losses[c][c - 1] + 1e-6);
  EXPECT_LE(grid.center_loss, grid.losses[c][c + 1] + 1e-6);
}

TEST(Grid, QuantizedModelsRequantizeDisplacedWeights) {
  Model m = build(small_mlp(), 19);
  attach_quantization(m, 2);
  const Dataset d = make_linear_regression(12, 2, 1, 0.1, 3);
  const LandscapeGrid grid = evaluate_grid(m, d, 23, 0.25, 3);
  // center equals the quantized model's own loss
  EXPECT_NEAR(grid.center_loss, evaluate(m, d).loss, 1e-12);
  // tiny displacements stay inside the same bins, so re-quantization makes
  // nearby cells exactly equal to the center
  Directions dirs = sample_directions(m, 23);
  for (auto& v : dirs.d1) v *= 1e-9;
  for (auto& v : dirs.d2) v *= 1e-9;
  const LandscapeGrid flat = evaluate_grid(m, d, dirs, 1.0, 3);
  for (const auto& row : flat.losses) {
    for (double v : row) EXPECT_EQ(v, flat.center_loss);
  }
}
