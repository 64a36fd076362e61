#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "qlns/config.hpp"
#include "qlns/parallel.hpp"
#include "qlns/train.hpp"

// Hyperparameter grid runner. Axes are the `grid.<key>` entries of the
// config, expanded as a Cartesian product in declared order with the last
// axis fastest. Cell seeds derive from (base seed, cell index); failures are
// recorded and the sweep continues.

namespace qlns {

struct GridAxis {
  std::string key;  // config key the axis overrides
  std::vector<std::string> values;
};

struct GridCell {
  std::size_t index = 0;
  std::vector<std::pair<std::string, std::string>> assignment;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int bits = 0;
  GapReport report;
  double mean_step = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = 0;
};

struct GridResult {
  std::vector<GridAxis> axes;
  std::vector<GridCell> cells;
};

inline std::vector<GridAxis> grid_axes(const Config& c) {
  std::vector<GridAxis> axes;
  for (const auto& [key, value] : c.entries()) {
    if (key.rfind("grid.", 0) != 0) continue;
    GridAxis axis;
    axis.key = key.substr(5);
    axis.values = Config::split(value, ',');
    if (axis.values.empty() || (axis.values.size() == 1 && axis.values[0].empty())) {
      throw std::invalid_argument("grid: axis '" + key + "' has no values");
    }
    axes.push_back(std::move(axis));
  }
  return axes;
}

inline std::size_t grid_cell_count(const std::vector<GridAxis>& axes) {
  std::size_t n = 1;
  for (const auto& a : axes) n *= a.values.size();
  return n;
}

// Row-major decode: first axis slowest, last axis fastest.
inline std::vector<std::pair<std::string, std::string>> grid_assignment(
    const std::vector<GridAxis>& axes, std::size_t index) {
  std::vector<std::pair<std::string, std::string>> out(axes.size());
  for (std::size_t a = axes.size(); a-- > 0;) {
    const std::size_t k = axes[a].values.size();
    out[a] = {axes[a].key, axes[a].values[index % k]};
    index /= k;
  }
  return out;
}

inline GridResult run_grid(const Config& base) {
  GridResult result;
  result.axes = grid_axes(base);
  const std::size_t cells = grid_cell_count(result.axes);
  const std::uint64_t base_seed = base.get_u64("seed", 1);

  bool data_axis = false;
  for (const auto& a : result.axes) {
    if (a.key.rfind("data.", 0) == 0) data_axis = true;
  }
  Split shared;
  if (!data_axis) shared = datasets_from_config(base);

  result.cells.resize(cells);
  parallel_for(cells, [&](std::size_t index) {
    GridCell& cell = result.cells[index];
    cell.index = index;
    cell.assignment = grid_assignment(result.axes, index);
    cell.seed = derive_seed(base_seed, index);
    try {
      Config cfg = base;
      for (const auto& [k, v] : cell.assignment) cfg.set(k, v);
      ExperimentSpec spec = spec_from_config(cfg);
      spec.seed = cell.seed;
      const Split local = data_axis ? datasets_from_config(cfg) : Split{};
      const Split& data = data_axis ? local : shared;
      TrainResult tr = train(spec, data.train);
      cell.report = measure_gap(tr.model, data.train, data.test, tr.trace.best_epoch);
      cell.best_epoch = tr.trace.best_epoch;
      cell.bits = spec.bits;
      if (tr.model.state.quantized()) cell.mean_step = mean_step(tr.model.state);
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
  });
  return result;
}

struct PrecisionAggregate {
  int bits = 0;
  std::size_t cells = 0;
  double mean_train_loss = 0.0;
  double mean_test_loss = 0.0;
  double mean_gap = 0.0;
  double mean_train_acc = 0.0;
  double mean_test_acc = 0.0;
};

// Mean metrics per precision over the successful cells.
inline std::vector<PrecisionAggregate> aggregate_by_precision(const GridResult& grid) {
  std::map<int, PrecisionAggregate> by_bits;
  for (const auto& cell : grid.cells) {
    if (!cell.ok) continue;
    auto& agg = by_bits[cell.bits];
    agg.bits = cell.bits;
    agg.cells += 1;
    agg.mean_train_loss += cell.report.train_loss;
    agg.mean_test_loss += cell.report.test_loss;
    agg.mean_gap += cell.report.gap;
    agg.mean_train_acc += cell.report.train_acc;
    agg.mean_test_acc += cell.report.test_acc;
  }
  std::vector<PrecisionAggregate> out;
  for (auto& [bits, agg] : by_bits) {
    const double n = static_cast<double>(agg.cells);
    agg.mean_train_loss /= n;
    agg.mean_test_loss /= n;
    agg.mean_gap /= n;
    agg.mean_train_acc /= n;
    agg.mean_test_acc /= n;
    out.push_back(agg);
  }
  return out;
}

}  // namespace qlns
