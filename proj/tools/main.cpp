// Experiment runner: config-driven training, generalization-gap and grid
// sweeps, flatness reports, landscape slices, corruption evaluation and the
// quantization bin-width report. Worker count comes from QLNS_WORKERS; all
// other behavior is controlled by the config file and --set overrides.

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qlns/checkpoint.hpp"
#include "qlns/config.hpp"
#include "qlns/corruptions.hpp"
#include "qlns/flatness.hpp"
#include "qlns/grid.hpp"
#include "qlns/landscape.hpp"
#include "qlns/noise.hpp"
#include "qlns/report_io.hpp"
#include "qlns/train.hpp"

namespace {

using namespace qlns;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = ".";
  std::string model_path;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool model_flag = true) {
  cmd->add_option("--config", opts.config_path, "experiment config file (key = value lines)");
  cmd->add_option("--set", opts.overrides, "override a config key, e.g. --set bits=2")
      ->take_all();
  cmd->add_option("--out", opts.out_dir, "output directory (default: current)");
  if (model_flag) {
    cmd->add_option("--model", opts.model_path, "checkpoint to load instead of training");
  }
}

Config load_config(const CommonOpts& opts) {
  Config c = opts.config_path.empty() ? Config{} : Config::from_file(opts.config_path);
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    }
    c.set(Config::trim(kv.substr(0, eq)), Config::trim(kv.substr(eq + 1)));
  }
  return c;
}

std::string out_path(const CommonOpts& opts, const std::string& name) {
  std::filesystem::create_directories(opts.out_dir);
  return (std::filesystem::path(opts.out_dir) / name).string();
}

// Either load a checkpoint (validated against the configured architecture) or
// train from scratch per the config.
struct ResolvedModel {
  Model model;
  TrainTrace trace;  // empty when loaded
  bool trained = false;
};

ResolvedModel resolve_model(const Config& cfg, const CommonOpts& opts, const Dataset& train_data) {
  const ExperimentSpec spec = spec_from_config(cfg);
  if (!opts.model_path.empty()) {
    ModelState state = load_model_state(opts.model_path);
    const Model reference = build(spec.arch, 0);
    if (state.count() != reference.state.count()) {
      throw std::runtime_error("checkpoint does not match arch: parameter count differs");
    }
    for (std::size_t i = 0; i < state.count(); ++i) {
      if (state.entry(i).name != reference.state.entry(i).name ||
          !state.param(i).same_shape(reference.state.param(i))) {
        throw std::runtime_error("checkpoint does not match arch at '" + state.entry(i).name + "'");
      }
    }
    Model m;
    m.arch = spec.arch;
    m.state = std::move(state);
    return {std::move(m), {}, false};
  }
  TrainResult tr = train(spec, train_data);
  return {std::move(tr.model), std::move(tr.trace), true};
}

int cmd_train(const CommonOpts& opts) {
  const Config cfg = load_config(opts);
  const ExperimentSpec spec = spec_from_config(cfg);
  const Split data = datasets_from_config(cfg);
  TrainResult tr = train(spec, data.train);
  save_model_state(out_path(opts, "model.qlns"), tr.model.state);
  Json report{{"spec", spec_echo(spec)}, {"trace", to_json(tr.trace)}};
  write_text_file(out_path(opts, "train_report.json"), report.dump(2) + "\n");
  std::cout << report["trace"].dump(2) << "\n";
  return 0;
}

int cmd_gap(const CommonOpts& opts) {
  const Config cfg = load_config(opts);
  const Split data = datasets_from_config(cfg);
  ResolvedModel rm = resolve_model(cfg, opts, data.train);
  const GapReport gap = measure_gap(rm.model, data.train, data.test, rm.trace.best_epoch);
  Json report{{"spec", spec_echo(spec_from_config(cfg))}, {"gap", to_json(gap)}};
  write_text_file(out_path(opts, "gap_report.json"), report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_grid(const CommonOpts& opts) {
  const Config cfg = load_config(opts);
  const GridResult grid = run_grid(cfg);
  const auto aggs = aggregate_by_precision(grid);
  write_text_file(out_path(opts, "grid_cells.csv"), grid_cells_csv(grid));
  write_text_file(out_path(opts, "grid_summary.csv"), grid_summary_csv(aggs));
  Json cells = Json::array();
  for (const auto& cell : grid.cells) {
    Json assignment;
    for (const auto& [k, v] : cell.assignment) assignment[k] = v;
    Json jc{{"index", cell.index}, {"seed", cell.seed},   {"ok", cell.ok},
            {"assignment", assignment}, {"bits", cell.bits}};
    if (cell.ok) {
      jc["report"] = to_json(cell.report);
      if (!std::isnan(cell.mean_step)) jc["mean_step"] = cell.mean_step;
    } else {
      jc["error"] = cell.error;
    }
    cells.push_back(jc);
  }
  Json report{{"cells", cells}};
  write_text_file(out_path(opts, "grid_report.json"), report.dump(2) + "\n");
  std::cout << grid_summary_csv(aggs);
  return 0;
}

int cmd_flatness(const CommonOpts& opts) {
  const Config cfg = load_config(opts);
  const Split data = datasets_from_config(cfg);
  ResolvedModel rm = resolve_model(cfg, opts, data.train);
  SearchParams params;
  params.target_dev = cfg.get_double("flatness.target_dev", 0.1);
  params.iters = static_cast<int>(cfg.get_long("flatness.iters", 15));
  params.draws = static_cast<int>(cfg.get_long("flatness.draws", 10));
  params.seed = cfg.get_u64("flatness.seed", cfg.get_u64("seed", 1));
  const bool normalize = cfg.get_long("flatness.normalize", 1) != 0;
  const bool dequantized = cfg.get_long("flatness.dequantized_weights", 1) != 0;
  const FlatnessReport rep =
      full_report(rm.model, data.train, params, cfg.get_double("flatness.delta_conf", 0.05),
                  normalize, dequantized);
  write_text_file(out_path(opts, "flatness.json"), to_json(rep).dump(2) + "\n");
  write_text_file(out_path(opts, "flatness.csv"),
                  flatness_csv_header() + flatness_csv_row(cfg.get("label", "model"), rep));
  std::cout << to_json(rep)["normalized"].dump(2) << "\n";
  return 0;
}

int cmd_landscape(const CommonOpts& opts) {
  const Config cfg = load_config(opts);
  const Split data = datasets_from_config(cfg);
  ResolvedModel rm = resolve_model(cfg, opts, data.train);
  const double half_range = cfg.get_double("landscape.range", 1.0);
  const int steps = static_cast<int>(cfg.get_long("landscape.steps", 21));
  const std::uint64_t seed = cfg.get_u64("landscape.seed", cfg.get_u64("seed", 1));
  const LandscapeGrid grid = evaluate_grid(rm.model, data.train, seed, half_range, steps);
  write_text_file(out_path(opts, "landscape.csv"), landscape_csv(grid));
  write_text_file(out_path(opts, "landscape.json"),
                  landscape_sidecar(grid, half_range, steps).dump(2) + "\n");
  std::cout << landscape_sidecar(grid, half_range, steps).dump(2) << "\n";
  return 0;
}

int cmd_corrupt_eval(const CommonOpts& opts, const std::string& emit_dataset,
                     const std::string& emit_kind, int emit_severity) {
  const Config cfg = load_config(opts);
  const Split data = datasets_from_config(cfg);
  if (!emit_dataset.empty()) {
    const CorruptionKind kind = corruption_from_name(emit_kind);
    const Dataset corrupted =
        corrupt_dataset(data.test, kind, emit_severity, cfg.get_u64("corrupt.seed", 77));
    save_dataset(emit_dataset, data.train, corrupted);
    std::cout << "{\"written\": \"" << emit_dataset << "\"}\n";
    return 0;
  }
  ResolvedModel rm = resolve_model(cfg, opts, data.train);
  const std::uint64_t seed = cfg.get_u64("corrupt.seed", 77);
  const double train_loss = evaluate(rm.model, data.train).loss;
  std::string csv = "kind,severity1,severity2,severity3,severity4,severity5\n";
  Json jkinds;
  for (CorruptionKind kind : all_corruptions()) {
    csv += corruption_name(kind);
    Json row = Json::array();
    for (int severity = 1; severity <= 5; ++severity) {
      const Dataset corrupted = corrupt_dataset(data.test, kind, severity, seed);
      const double gap = evaluate(rm.model, corrupted).loss - train_loss;
      csv += "," + format_double(gap);
      row.push_back(gap);
    }
    csv += "\n";
    jkinds[corruption_name(kind)] = row;
  }
  Json report{{"train_loss", train_loss}, {"gaps", jkinds}};
  write_text_file(out_path(opts, "corruption_gaps.csv"), csv);
  write_text_file(out_path(opts, "corruption_report.json"), report.dump(2) + "\n");
  std::cout << csv;
  return 0;
}

int cmd_noise_check(const CommonOpts& opts) {
  const Config cfg = load_config(opts);
  const Split data = datasets_from_config(cfg);
  ResolvedModel rm = resolve_model(cfg, opts, data.train);
  const double delta_frac = cfg.get_double("noise.delta_frac", 0.01);
  const int draws = static_cast<int>(cfg.get_long("noise.draws", 1000));
  const std::uint64_t seed = cfg.get_u64("noise.seed", cfg.get_u64("seed", 1));
  const double delta = delta_frac * linf_norm(effective_weights(rm.model));
  const IdentityCheck check = identity_check(rm.model, data.train, delta, draws, seed);
  const double violation =
      dominance_check(rm.model, data.train, delta,
                      static_cast<int>(cfg.get_long("noise.dominance_draws", 200)), seed);
  Json report = to_json(check);
  report["dominance_violation_rate"] = violation;
  write_text_file(out_path(opts, "noise_check.json"), report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_quantize_report(const CommonOpts& opts) {
  const Config cfg = load_config(opts);
  const Split data = datasets_from_config(cfg);
  ResolvedModel rm = resolve_model(cfg, opts, data.train);
  const std::string csv = bin_width_csv(bin_width_report(rm.model.state));
  write_text_file(out_path(opts, "bin_widths.csv"), csv);
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantization-as-regularization laboratory"};
  app.require_subcommand(1);

  CommonOpts train_opts, gap_opts, grid_opts, flat_opts, land_opts, corrupt_opts, noise_opts,
      quant_opts;
  std::string emit_dataset, emit_kind = "gaussian_noise";
  int emit_severity = 3;

  add_common(app.add_subcommand("train", "train a model per the config"), train_opts, false);
  add_common(app.add_subcommand("gap", "train/test loss gap report"), gap_opts);
  add_common(app.add_subcommand("grid", "hyperparameter grid sweep"), grid_opts, false);
  add_common(app.add_subcommand("flatness", "flatness measure suite"), flat_opts);
  add_common(app.add_subcommand("landscape", "2-D loss surface slice"), land_opts);
  auto* corrupt = app.add_subcommand("corrupt-eval", "distortion gap evaluation");
  add_common(corrupt, corrupt_opts);
  corrupt->add_option("--emit-dataset", emit_dataset, "write a corrupted dataset container");
  corrupt->add_option("--kind", emit_kind, "corruption kind for --emit-dataset");
  corrupt->add_option("--severity", emit_severity, "severity for --emit-dataset");
  add_common(app.add_subcommand("noise-check", "regularizer identity and dominance check"),
             noise_opts);
  add_common(app.add_subcommand("quantize-report", "per-layer bin widths"), quant_opts);

  std::string verb;
  try {
    app.parse(argc, argv);
    const CLI::App* sub = app.get_subcommands().front();
    verb = sub->get_name();
    if (verb == "train") return cmd_train(train_opts);
    if (verb == "gap") return cmd_gap(gap_opts);
    if (verb == "grid") return cmd_grid(grid_opts);
    if (verb == "flatness") return cmd_flatness(flat_opts);
    if (verb == "landscape") return cmd_landscape(land_opts);
    if (verb == "corrupt-eval") {
      return cmd_corrupt_eval(corrupt_opts, emit_dataset, emit_kind, emit_severity);
    }
    if (verb == "noise-check") return cmd_noise_check(noise_opts);
    if (verb == "quantize-report") return cmd_quantize_report(quant_opts);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    qlns::Json err{{"error", e.what()}, {"verb", verb}};
    std::cout << err.dump() << "\n";
    return 1;
  }
}
