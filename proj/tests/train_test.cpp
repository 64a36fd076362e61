#include <gtest/gtest.h>

#include <cmath>

#include "qlns/config.hpp"
#include "qlns/data.hpp"
#include "qlns/grid.hpp"
#include "qlns/report_io.hpp"
#include "qlns/train.hpp"

using namespace qlns;

namespace {

ExperimentSpec linreg_spec(std::size_t in_dim) {
  ExperimentSpec s;
  s.arch.kind = ArchKind::kLinear;
  s.arch.input_shape = {in_dim};
  s.arch.classes = 1;
  s.arch.task = TaskKind::kRegression;
  s.optimizer = OptimizerKind::kSgdMomentum;
  s.lr = 0.05;
  s.epochs = 300;
  s.lr_schedule = {{100, 0.1}, {200, 0.1}};
  s.batch_size = 64;
  s.seed = 5;
  return s;
}

// least squares for [X 1] via normal equations, Gaussian elimination
std::vector<double> lstsq_with_intercept(const Dataset& d, std::size_t in_dim) {
  const std::size_t k = in_dim + 1;
  std::vector<std::vector<double>> mat(k, std::vector<double>(k + 1, 0.0));
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<double> row(k, 1.0);
    for (std::size_t j = 0; j < in_dim; ++j) row[j] = d.x[i * in_dim + j];
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) mat[a][b] += row[a] * row[b];
      mat[a][k] += row[a] * d.y[i];
    }
  }
  for (std::size_t col = 0; col < k; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < k; ++r) {
      if (std::fabs(mat[r][col]) > std::fabs(mat[pivot][col])) pivot = r;
    }
    std::swap(mat[col], mat[pivot]);
    for (std::size_t r = 0; r < k; ++r) {
      if (r == col) continue;
      const double f = mat[r][col] / mat[col][col];
      for (std::size_t c = col; c <= k; ++c) mat[r][c] -= f * mat[col][c];
    }
  }
  std::vector<double> beta(k);
  for (std::size_t i = 0; i < k; ++i) beta[i] = mat[i][k] / mat[i][i];
  return beta;
}

}  // namespace

TEST(Train, ZeroEpochsReturnsInitialization) {
  ExperimentSpec s = linreg_spec(3);
  s.epochs = 0;
  s.lr_schedule.clear();
  const Dataset d = make_linear_regression(16, 3, 1, 0.1, 7);
  const TrainResult r = train(s, d);
  EXPECT_EQ(r.trace.best_epoch, 0);
  EXPECT_TRUE(r.trace.epochs.empty());
  const Model fresh = build(s.arch, s.seed);
  for (std::size_t i = 0; i < fresh.state.count(); ++i) {
    EXPECT_EQ(r.model.state.param(i).data(), fresh.state.param(i).data());
  }
}

TEST(Train, LrScheduleRecordedExactly) {
  ExperimentSpec s = linreg_spec(2);
  s.epochs = 5;
  s.lr = 0.2;
  s.lr_schedule = {{2, 0.1}};
  const Dataset d = make_linear_regression(8, 2, 1, 0.1, 3);
  const TrainResult r = train(s, d);
  ASSERT_EQ(r.trace.epochs.size(), 5u);
  EXPECT_DOUBLE_EQ(r.trace.epochs[0].lr, 0.2);
  EXPECT_DOUBLE_EQ(r.trace.epochs[1].lr, 0.2);
  EXPECT_DOUBLE_EQ(r.trace.epochs[2].lr, 0.2 * 0.1);
  EXPECT_DOUBLE_EQ(r.trace.epochs[3].lr, 0.2 * 0.1);
  EXPECT_DOUBLE_EQ(r.trace.epochs[4].lr, 0.2 * 0.1);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.trace.epochs[i].epoch, static_cast<int>(i + 1));
}

TEST(Train, LinearRegressionReachesLeastSquares) {
  const std::size_t in_dim = 3;
  const Dataset d = make_linear_regression(64, in_dim, 1, 0.0, 11);
  const TrainResult r = train(linreg_spec(in_dim), d);
  const auto beta = lstsq_with_intercept(d, in_dim);
  const Tensor& w = r.model.state.param("fc1.weight");
  for (std::size_t j = 0; j < in_dim; ++j) {
    EXPECT_NEAR(w[j], beta[j], 1e-4) << "weight " << j;
  }
  EXPECT_NEAR(r.model.state.param("fc1.bias")[0], beta[in_dim], 1e-4);
}

TEST(Train, DivergenceAbortsWithTrace) {
  ExperimentSpec s = linreg_spec(2);
  s.lr = 1e200;  // first update overflows the loss
  s.epochs = 10;
  s.lr_schedule.clear();
  const Dataset d = make_linear_regression(16, 2, 1, 0.1, 3);
  try {
    train(s, d);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
  }
}

TEST(Train, DeterministicAcrossRuns) {
  ExperimentSpec s = linreg_spec(2);
  s.epochs = 20;
  s.lr_schedule = {{10, 0.1}};
  const Dataset d = make_linear_regression(32, 2, 1, 0.2, 9);
  const TrainResult a = train(s, d);
  const TrainResult b = train(s, d);
  for (std::size_t i = 0; i < a.model.state.count(); ++i) {
    EXPECT_EQ(a.model.state.param(i).data(), b.model.state.param(i).data());
  }
  EXPECT_EQ(a.trace.best_epoch, b.trace.best_epoch);
}

TEST(Train, QuantizedTrainingUpdatesSteps) {
  ExperimentSpec s;
  s.arch.kind = ArchKind::kNin;
  s.arch.base_width = 4;
  s.arch.input_shape = {1, 8, 8};
  s.arch.classes = 2;
  s.bits = 4;
  s.lr = 0.05;
  s.epochs = 4;
  s.lr_schedule.clear();
  s.batch_size = 16;
  s.seed = 3;
  const Dataset d = make_blobs(48, 8, 0.2, 5);
  const TrainResult r = train(s, d);
  ASSERT_TRUE(r.model.state.quantized());
  const Model fresh = build(s.arch, s.seed);
  Model fresh_q = fresh;
  attach_quantization(fresh_q, 4);
  bool any_step_moved = false;
  for (const auto& [name, spec_q] : r.model.state.quant) {
    EXPECT_GT(spec_q.step, 0.0);
    if (spec_q.step != fresh_q.state.quant.at(name).step) any_step_moved = true;
  }
  EXPECT_TRUE(any_step_moved);
}

TEST(Gap, IdenticalSplitsGiveZeroGap) {
  const Dataset d = make_blobs(32, 8, 0.2, 5);
  ArchSpec a;
  a.kind = ArchKind::kNin;
  a.base_width = 4;
  a.input_shape = {1, 8, 8};
  a.classes = 2;
  const Model m = build(a, 7);
  const GapReport r = measure_gap(m, d, d);
  EXPECT_EQ(r.gap, 0.0);
  EXPECT_EQ(r.train_loss, r.test_loss);
  EXPECT_EQ(r.gap, r.test_loss - r.train_loss);
}

TEST(BinWidthReport, PassThroughAndErrors) {
  ArchSpec a;
  a.kind = ArchKind::kMlp;
  a.depth_multiplier = 1;
  a.base_width = 4;
  a.input_shape = {2};
  a.classes = 2;
  Model m = build(a, 3);
  EXPECT_THROW(bin_width_report(m.state), std::invalid_argument);
  attach_quantization(m, 4);
  const auto rows = bin_width_report(m.state);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].first, "fc1");
  EXPECT_DOUBLE_EQ(rows[0].second, init_step(m.state.param("fc1.weight"), 4));
}

namespace {

Config small_grid_config() {
  Config c;
  c.set("arch.kind", "nin");
  c.set("arch.base_width", "4");
  c.set("arch.input", "1x8x8");
  c.set("arch.classes", "2");
  c.set("epochs", "2");
  c.set("lr_schedule", "none");
  c.set("batch_size", "16");
  c.set("data.kind", "blobs");
  c.set("data.samples", "48");
  c.set("data.image_size", "8");
  c.set("seed", "21");
  return c;
}

}  // namespace

TEST(Grid, DegenerateGridMatchesDirectTraining) {
  Config c = small_grid_config();
  c.set("grid.lr", "0.05");
  const GridResult grid = run_grid(c);
  ASSERT_EQ(grid.cells.size(), 1u);
  ASSERT_TRUE(grid.cells[0].ok) << grid.cells[0].error;

  Config direct = small_grid_config();
  direct.set("lr", "0.05");
  ExperimentSpec spec = spec_from_config(direct);
  spec.seed = derive_seed(21, 0);
  const Split data = datasets_from_config(direct);
  const TrainResult tr = train(spec, data.train);
  const GapReport gap = measure_gap(tr.model, data.train, data.test, tr.trace.best_epoch);
  EXPECT_EQ(grid.cells[0].report.train_loss, gap.train_loss);
  EXPECT_EQ(grid.cells[0].report.test_loss, gap.test_loss);
  EXPECT_EQ(grid.cells[0].report.gap, gap.gap);
}

TEST(Grid, RowMajorEnumeration) {
  Config c = small_grid_config();
  c.set("grid.lr", "0.1,0.05");
  c.set("grid.weight_decay", "0,0.0001,0.0002");
  const auto axes = grid_axes(c);
  ASSERT_EQ(axes.size(), 2u);
  EXPECT_EQ(grid_cell_count(axes), 6u);
  const auto a0 = grid_assignment(axes, 0);
  EXPECT_EQ(a0[0].second, "0.1");
  EXPECT_EQ(a0[1].second, "0");
  const auto a1 = grid_assignment(axes, 1);
  EXPECT_EQ(a1[0].second, "0.1");
  EXPECT_EQ(a1[1].second, "0.0001");
  const auto a5 = grid_assignment(axes, 5);
  EXPECT_EQ(a5[0].second, "0.05");
  EXPECT_EQ(a5[1].second, "0.0002");
}

TEST(Grid, CellFailureRecordedRunContinues) {
  Config c = small_grid_config();
  c.set("grid.lr", "-1,0.05");  // first cell invalid
  const GridResult grid = run_grid(c);
  ASSERT_EQ(grid.cells.size(), 2u);
  EXPECT_FALSE(grid.cells[0].ok);
  EXPECT_FALSE(grid.cells[0].error.empty());
  EXPECT_TRUE(grid.cells[1].ok) << grid.cells[1].error;
}

TEST(Grid, ByteIdenticalReports) {
  Config c = small_grid_config();
  c.set("grid.bits", "fp,2");
  setenv("QLNS_WORKERS", "2", 1);
  const GridResult a = run_grid(c);
  setenv("QLNS_WORKERS", "1", 1);
  const GridResult b = run_grid(c);
  unsetenv("QLNS_WORKERS");
  EXPECT_EQ(grid_cells_csv(a), grid_cells_csv(b));
  EXPECT_EQ(grid_summary_csv(aggregate_by_precision(a)), grid_summary_csv(aggregate_by_precision(b)));
}
