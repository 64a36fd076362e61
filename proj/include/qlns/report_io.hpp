#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qlns/flatness.hpp"
#include "qlns/grid.hpp"
#include "qlns/landscape.hpp"
#include "qlns/noise.hpp"
#include "qlns/train.hpp"

// JSON / CSV emission. Key order is fixed by construction and floating-point
// formatting is round-trip exact, so identical runs produce byte-identical
// files.

namespace qlns {

using Json = nlohmann::ordered_json;

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("report: cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw std::runtime_error("report: write failed for '" + path + "'");
}

inline Json to_json(const GapReport& r) {
  return Json{{"train_acc", r.train_acc},   {"test_acc", r.test_acc},
              {"train_loss", r.train_loss}, {"test_loss", r.test_loss},
              {"gap", r.gap},               {"best_epoch", r.best_epoch}};
}

inline Json to_json(const TrainTrace& t) {
  Json epochs = Json::array();
  for (const auto& e : t.epochs) {
    epochs.push_back(Json{{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}});
  }
  return Json{{"best_epoch", t.best_epoch}, {"best_loss", t.best_loss}, {"epochs", epochs}};
}

inline Json to_json(const IdentityCheck& c) {
  return Json{{"clean_loss", c.clean_loss},
              {"perturbed_loss", c.perturbed_loss},
              {"perturbed_se", c.perturbed_se},
              {"regularizer", c.regularizer},
              {"regularizer_se", c.regularizer_se},
              {"cross_term", c.cross_term},
              {"cross_se", c.cross_se},
              {"delta", c.delta},
              {"draws", c.draws},
              {"seed", c.seed},
              {"delta_over_weight_linf", c.delta_over_weight_linf},
              {"max_taylor_residual", c.max_taylor_residual}};
}

inline Json to_json(const PerturbationBudget& b) {
  Json trace = Json::array();
  for (const auto& [candidate, deviation] : b.search_trace) {
    trace.push_back(Json{{"candidate", candidate}, {"deviation", deviation}});
  }
  return Json{{"kind", b.kind == BudgetKind::kGaussianSigma ? "gaussian_sigma" : "adversarial_alpha"},
              {"magnitude_aware", b.magnitude_aware},
              {"value", b.value},
              {"upper_bracket", b.upper_bracket},
              {"capped", b.capped},
              {"trace", trace}};
}

inline Json to_json(const FlatnessReport& r) {
  Json raw, normalized;
  for (std::size_t i = 0; i < r.raw.size(); ++i) {
    raw[FlatnessReport::kMeasureNames[i]] = r.raw[i];
    normalized[FlatnessReport::kMeasureNames[i]] = r.normalized[i];
  }
  return Json{{"raw", raw},
              {"normalized", normalized},
              {"sigma", r.sigma},
              {"sigma_mag", r.sigma_mag},
              {"alpha", r.alpha},
              {"alpha_mag", r.alpha_mag},
              {"m", r.m},
              {"delta_conf", r.delta_conf},
              {"normalized_output", r.apply_normalization},
              {"seed", r.seed},
              {"budgets",
               Json{{"sigma", to_json(r.sigma_budget)},
                    {"sigma_mag", to_json(r.sigma_mag_budget)},
                    {"alpha", to_json(r.alpha_budget)},
                    {"alpha_mag", to_json(r.alpha_mag_budget)}}}};
}

// Table layout: one row per model, the four PAC-Bayesian variants then the
// four sharpness variants.
inline std::string flatness_csv_header() {
  return "label,pac_bayes_init,pac_bayes_orig,pac_bayes_mag_init,pac_bayes_mag_orig,"
         "sharpness_init,sharpness_orig,sharpness_mag_init,sharpness_mag_orig\n";
}

inline std::string flatness_csv_row(const std::string& label, const FlatnessReport& r) {
  const auto& vals = r.apply_normalization ? r.normalized : r.raw;
  std::string row = label;
  for (double v : vals) row += "," + format_double(v);
  return row + "\n";
}

inline std::string bin_width_csv(const std::vector<std::pair<std::string, double>>& rows) {
  std::string out = "layer,step\n";
  for (const auto& [layer, step] : rows) out += layer + "," + format_double(step) + "\n";
  return out;
}

inline std::string landscape_csv(const LandscapeGrid& grid) {
  std::string out;
  for (double b : grid.betas) out += "," + format_double(b);
  out += "\n";
  for (std::size_t i = 0; i < grid.alphas.size(); ++i) {
    out += format_double(grid.alphas[i]);
    for (double v : grid.losses[i]) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

inline Json landscape_sidecar(const LandscapeGrid& grid, double half_range, int steps) {
  return Json{{"seed", grid.direction_seed},
              {"range", half_range},
              {"steps", steps},
              {"center_loss", grid.center_loss},
              {"degenerate_directions", grid.degenerate_directions}};
}

inline std::string grid_cells_csv(const GridResult& grid) {
  std::string out = "index,seed,ok,error";
  for (const auto& axis : grid.axes) out += "," + axis.key;
  out += ",bits,train_acc,test_acc,train_loss,test_loss,gap,best_epoch,mean_step\n";
  for (const auto& cell : grid.cells) {
    out += std::to_string(cell.index) + "," + std::to_string(cell.seed) + "," +
           (cell.ok ? "1" : "0") + "," + cell.error;
    for (const auto& [_, v] : cell.assignment) out += "," + v;
    out += "," + std::to_string(cell.bits);
    if (cell.ok) {
      out += "," + format_double(cell.report.train_acc) + "," + format_double(cell.report.test_acc) +
             "," + format_double(cell.report.train_loss) + "," +
             format_double(cell.report.test_loss) + "," + format_double(cell.report.gap) + "," +
             std::to_string(cell.best_epoch) + "," + format_double(cell.mean_step);
    } else {
      out += ",,,,,,,";
    }
    out += "\n";
  }
  return out;
}

inline std::string grid_summary_csv(const std::vector<PrecisionAggregate>& aggs) {
  std::string out = "bits,cells,mean_train_acc,mean_test_acc,mean_train_loss,mean_test_loss,mean_gap\n";
  for (const auto& a : aggs) {
    out += std::to_string(a.bits) + "," + std::to_string(a.cells) + "," +
           format_double(a.mean_train_acc) + "," + format_double(a.mean_test_acc) + "," +
           format_double(a.mean_train_loss) + "," + format_double(a.mean_test_loss) + "," +
           format_double(a.mean_gap) + "\n";
  }
  return out;
}

inline Json spec_echo(const ExperimentSpec& spec) {
  Json sched = Json::array();
  for (const auto& s : spec.lr_schedule) {
    sched.push_back(Json{{"epoch", s.epoch}, {"factor", s.factor}});
  }
  const char* opt = spec.optimizer == OptimizerKind::kSgdMomentum
                        ? "sgd_momentum"
                        : (spec.optimizer == OptimizerKind::kAdam ? "adam" : "rmsprop");
  const char* kind = spec.arch.kind == ArchKind::kMlp
                         ? "mlp"
                         : (spec.arch.kind == ArchKind::kNin ? "nin" : "linear");
  return Json{{"arch",
               Json{{"kind", kind},
                    {"depth", spec.arch.depth_multiplier},
                    {"width", spec.arch.width_multiplier},
                    {"base_width", spec.arch.base_width},
                    {"input", spec.arch.input_shape},
                    {"classes", spec.arch.classes},
                    {"task", spec.arch.task == TaskKind::kRegression ? "regression"
                                                                     : "classification"}}},
              {"bits", spec.bits},
              {"optimizer", opt},
              {"lr", spec.lr},
              {"weight_decay", spec.weight_decay},
              {"epochs", spec.epochs},
              {"lr_schedule", sched},
              {"seed", spec.seed},
              {"batch_size", spec.batch_size}};
}

}  // namespace qlns
