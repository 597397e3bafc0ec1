// nestcal command-line driver.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "nestcal/error.hpp"
#include "nestcal/experiment.hpp"
#include "nestcal/inference.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nestcal;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> data_root;
  std::optional<fs::path> out;
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open " + p.string());
  return json::parse(in);
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream(p) << j.dump(2) << '\n';
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

// Uncompressed IDX with the MNIST file names, so the directory works as a data root.
void write_idx_split(const Dataset& ds, const fs::path& dir, const std::string& split) {
  fs::create_directories(dir);
  const std::string stem = split == "train" ? "train" : "t10k";
  std::ofstream img(dir / (stem + "-images-idx3-ubyte"), std::ios::binary);
  put_be32(img, 0x00000803);
  put_be32(img, ds.size());
  put_be32(img, ds.height);
  put_be32(img, ds.width);
  for (float v : ds.images) img.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0f))));
  std::ofstream lab(dir / (stem + "-labels-idx1-ubyte"), std::ios::binary);
  put_be32(lab, 0x00000801);
  put_be32(lab, ds.size());
  for (int y : ds.fine_labels) lab.put(static_cast<char>(y));
}

fs::path out_or(const Globals& g, const fs::path& fallback) { return g.out ? *g.out : fallback; }

int cmd_run(const Globals& g, const fs::path& config, const RunOptions& opts) {
  auto cfg = ExperimentConfig::load(config);
  apply_overrides(cfg, g.seed, g.data_root, g.out);
  const auto outcome = run_experiment(cfg, opts);
  if (opts.dry_run) {
    std::cout << "config ok; stage plan:\n";
    for (const auto& line : outcome.plan) std::cout << "  " << line << '\n';
    return 0;
  }
  std::cout << report_table(outcome.reports) << outcome.dir.string() << '\n';
  return 0;
}

int cmd_distort(const Globals& g, const fs::path& root, const std::string& split, int level, double S, double T) {
  DistortionParams p = level > 0 ? distortion_level(level) : DistortionParams{S, T, 0};
  p.seed = g.seed.value_or(0);
  p.validate();
  const auto ds = load_mnist_split(root, split);
  const auto out = out_or(g, "distorted");
  write_idx_split(distort_dataset(ds, p), out, split);
  write_json(out / "distortion.json", {{"S", p.S}, {"T", p.T}, {"seed", p.seed}, {"split", split},
                                       {"source", root.string()}, {"samples", ds.size()}});
  std::cout << "wrote " << ds.size() << " distorted images to " << out.string() << '\n';
  return 0;
}

int cmd_attack(const Globals& g, const fs::path& run, int limit, const std::string& grid, bool survival) {
  auto ctx = load_run_context(run);
  auto model = load_run_model(run);
  AttackConfig cfg = AttackConfig::default_grid();
  if (!grid.empty()) {
    int count = 0;
    double lo = 0, hi = 0;
    if (std::sscanf(grid.c_str(), "%d:%lf:%lf", &count, &lo, &hi) != 3) {
      throw ValidationError("--grid expects count:lo:hi");
    }
    cfg.epsilon_grid = AttackConfig::log_grid(count, lo, hi);
    cfg.max_eps = hi;
  }
  cfg.validate();
  const int n = std::min(limit, ctx.test.size());
  std::vector<int> idx(n);
  for (int k = 0; k < n; ++k) idx[k] = k;
  const auto subset = ctx.test.subset(idx);
  const auto& labels = subset.level_labels.back();
  const auto flips = min_eps_to_flip(model, gather_inputs(subset), labels, cfg);
  json summary = {{"samples", n}, {"attack", "fgsm"}};
  for (double rate : {0.05, 0.10, 0.15, 0.30}) {
    const auto e = eps_at_error_rate(flips, cfg.epsilon_grid, rate);
    summary["eps_at_error_rate"][std::to_string(static_cast<int>(rate * 100 + 0.5))] = e ? json(*e) : json(nullptr);
  }
  if (survival) {
    const auto rep = coarse_survival_under_fine_attack(model, subset, ctx.taxonomy, cfg);
    summary["survival"] = {{"accuracy", rep.accuracy},
                           {"flipped", rep.flipped},
                           {"never_flipped", rep.never_flipped},
                           {"initially_wrong", rep.initially_wrong}};
  }
  const auto path = out_or(g, run / "attack") / "attack_summary.json";
  write_json(path, summary);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_calibrate(const Globals& g, const fs::path& run, int bins, const std::string& grid, double density,
                  bool rejection) {
  auto ctx = load_run_context(run);
  auto model = load_run_model(run, false);
  auto rc = ctx.config.rejection_cfg;
  if (density > 0) rc.density_constant = density;
  if (g.seed) rc.seed = *g.seed;
  RejectionReport rep;
  if (rejection) rep = fit_rejection_class(model, ctx.train, ctx.partition, rc);
  auto state = fit_calibration(model, ctx.validation, TemperatureGrid::parse(grid), bins);
  state.rejection = rep;
  const auto out = out_or(g, run / "recalibrated");
  fs::create_directories(out);
  model.save(out / "calibrated.ckpt");
  write_json(out / "calibration.json", state.to_json());
  for (std::size_t l = 0; l < state.temperatures.size(); ++l) {
    std::printf("head %zu: T = %.3f  ECE %.4f -> %.4f\n", l, state.temperatures[l], state.ece_before[l],
                state.ece_after[l]);
  }
  return 0;
}

int cmd_combine(const Globals& g, const fs::path& preds_path, const fs::path& tax_path, const std::string& mode) {
  const auto doc = read_json(preds_path);
  const auto preds = PredictionSet::from_json(doc);
  const auto tax = Taxonomy::load(resolve_resource(tax_path));
  const auto m = combine_mode_from_string(mode);
  if (!doc.contains("labels")) throw ValidationError("predictions file has no labels");
  const auto labels = doc.at("labels").get<std::vector<std::vector<int>>>();
  const auto rep = evaluate_predictions(preds, labels, tax, m, preds_path.stem().string());
  EvalReport er;
  er.run = preds_path.string();
  er.variant = "predictions";
  er.combine_mode = to_string(m);
  er.conditions.push_back(rep);
  std::cout << report_table({er});
  std::printf("consistency %.2f%%, flagged %d\n", rep.consistency, rep.flagged);
  if (g.out) write_json(*g.out / ("combine_" + to_string(m) + ".json"), er.to_json());
  return 0;
}

int cmd_mi(const Globals& g, const fs::path& with_run, const fs::path& without_run, int samples, int steps) {
  auto ctx = load_run_context(with_run);
  auto with_skip = load_run_model(with_run);
  auto without_skip = load_run_model(without_run);
  auto cfg = ctx.config.mine;
  if (steps > 0) cfg.steps = steps;
  if (g.seed) cfg.seed = *g.seed;
  const int n = std::min(samples, ctx.test.size());
  std::vector<int> idx(n);
  for (int k = 0; k < n; ++k) idx[k] = k;
  const auto rep = skip_mi_gap(with_skip, without_skip, ctx.test.subset(idx), cfg);
  const auto out = out_or(g, with_run);
  write_json(out / "mi_gap.json", rep.to_json());
  for (const auto& [k, v] : rep.estimates) std::printf("%-28s %.4f\n", k.c_str(), v);
  std::printf("delta1 %.4f  delta2 %.4f\n", rep.delta1, rep.delta2);
  return 0;
}

int cmd_report(const Globals& g, const std::vector<fs::path>& runs) {
  std::vector<EvalReport> reports;
  for (const auto& r : runs) {
    for (const auto& j : read_json(r / "report.json")) reports.push_back(EvalReport::from_json(j));
  }
  std::cout << report_table(reports);
  if (g.out) write_json(*g.out / "report.json", reports_to_json(reports));
  return 0;
}

int cmd_plot(const fs::path& run) {
  for (const auto& p : emit_plots(run)) std::cout << p.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nested classifiers with calibration and hierarchical combination"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  std::string data_root, out;
  app.add_option("--seed", seed, "Base seed (overrides the config)");
  app.add_option("--data-root", data_root, "Dataset directory (else NESTCAL_DATA_ROOT, else the config)");
  app.add_option("--out", out, "Output directory");
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  fs::path config;
  RunOptions run_opts;
  bool no_plots = false;
  auto* run = app.add_subcommand("run", "Run an experiment from a JSON config");
  run->add_option("config", config)->required()->check(CLI::ExistingFile);
  run->add_flag("--dry-run", run_opts.dry_run, "Validate and print the stage plan");
  run->add_flag("--resume", run_opts.resume, "Reuse artifacts of an existing run directory");
  run->add_flag("--force", run_opts.force, "Replace an existing run directory");
  run->add_flag("--no-plots", no_plots);

  std::string split = "test";
  int level = 0;
  double S = 1.0, T = 1.0;
  fs::path source;
  auto* distort = app.add_subcommand("distort", "Write a turbulence-distorted copy of an IDX split");
  distort->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
  distort->add_option("--level", level, "Standard distortion level 1-4")->check(CLI::Range(1, 4));
  distort->add_option("--S", S, "Filter sigma");
  distort->add_option("--T", T, "Displacement std");

  fs::path run_dir, run_dir2;
  int limit = 1000;
  std::string eps_grid;
  bool survival = false;
  auto* attack = app.add_subcommand("attack", "FGSM sweep on a finished run");
  attack->add_option("run", run_dir)->required()->check(CLI::ExistingDirectory);
  attack->add_option("--limit", limit);
  attack->add_option("--grid", eps_grid, "count:lo:hi, log-spaced");
  attack->add_flag("--survival", survival, "Coarse accuracy when the fine prediction flips");

  int bins = 15;
  std::string t_grid = "50:1:3";
  double density = 0;
  bool no_rejection = false;
  auto* calibrate = app.add_subcommand("calibrate", "Refit the rejection class and temperatures of a run");
  calibrate->add_option("run", run_dir)->required()->check(CLI::ExistingDirectory);
  calibrate->add_option("--bins", bins);
  calibrate->add_option("--grid", t_grid, "count:lo:hi");
  calibrate->add_option("--density-constant", density);
  calibrate->add_flag("--no-rejection", no_rejection);

  fs::path preds, tax;
  std::string mode = "nested";
  auto* combine = app.add_subcommand("combine", "Combine stored per-level predictions");
  combine->add_option("predictions", preds)->required()->check(CLI::ExistingFile);
  combine->add_option("--taxonomy", tax)->required();
  combine->add_option("--mode", mode)->check(CLI::IsMember({"none", "nested", "mean", "product", "majority",
                                                            "coarse_fine"}));

  int samples = 2000, steps = 0;
  auto* mi = app.add_subcommand("mi", "Skip-connection information gap between two runs");
  mi->add_option("with_skip", run_dir)->required()->check(CLI::ExistingDirectory);
  mi->add_option("without_skip", run_dir2)->required()->check(CLI::ExistingDirectory);
  mi->add_option("--samples", samples);
  mi->add_option("--steps", steps);

  std::vector<fs::path> runs;
  auto* report = app.add_subcommand("report", "Tabulate the reports of finished runs");
  report->add_option("runs", runs)->required()->check(CLI::ExistingDirectory);

  auto* plot = app.add_subcommand("plot", "Emit SVG plots for a run");
  plot->add_option("run", run_dir)->required()->check(CLI::ExistingDirectory);

  distort->add_option("--source", source, "IDX directory (default: --data-root)");

  CLI11_PARSE(app, argc, argv);
  if (verbose) spdlog::set_level(spdlog::level::debug);
  if (app.count("--seed")) g.seed = seed;
  if (!data_root.empty()) g.data_root = data_root;
  if (!out.empty()) g.out = out;
  run_opts.plots = !no_plots;

  std::string current = "setup";
  try {
    if (*run) {
      current = "run";
      return cmd_run(g, config, run_opts);
    }
    if (*distort) {
      current = "distort";
      fs::path root = !source.empty() ? source : g.data_root.value_or("");
      if (root.empty()) {
        const char* env = std::getenv("NESTCAL_DATA_ROOT");
        root = env ? fs::path(env) : resolve_resource("data/mnist-subset");
      }
      return cmd_distort(g, root, split, level, S, T);
    }
    if (*attack) {
      current = "attack";
      return cmd_attack(g, run_dir, limit, eps_grid, survival);
    }
    if (*calibrate) {
      current = "calibrate";
      return cmd_calibrate(g, run_dir, bins, t_grid, density, !no_rejection);
    }
    if (*combine) {
      current = "combine";
      return cmd_combine(g, preds, tax, mode);
    }
    if (*mi) {
      current = "mi";
      return cmd_mi(g, run_dir, run_dir2, samples, steps);
    }
    if (*report) {
      current = "report";
      return cmd_report(g, runs);
    }
    if (*plot) {
      current = "plot";
      return cmd_plot(run_dir);
    }
  } catch (const StageError& e) {
    std::cerr << "error in stage " << e.stage() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error in " << current << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
