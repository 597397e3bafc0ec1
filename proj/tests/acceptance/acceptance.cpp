// Acceptance checks: one PASS/FAIL line per criterion.
//
// Trained runs are cached under NESTCAL_ACCEPTANCE_DIR (default: the build
// tree) and resumed, so a second invocation only re-reads artifacts. With a
// full MNIST copy at NESTCAL_DATA_ROOT the full-scale configs are used;
// otherwise the bundled subset with the desk configs.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "acceptance_paths.hpp"

#include "nestcal/analysis.hpp"
#include "nestcal/data.hpp"
#include "nestcal/experiment.hpp"
#include "nestcal/metrics.hpp"
#include "nestcal/model.hpp"

using namespace nestcal;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Profile {
  std::string name;
  fs::path data_root;
  fs::path nested, end_to_end, no_skip, traditional;
};

Profile pick_profile() {
  const fs::path src = NESTCAL_SOURCE_DIR;
  if (const char* env = std::getenv("NESTCAL_DATA_ROOT"); env && *env) {
    try {
      if (load_mnist_split(env, "train").size() >= 60000) {
        return {"full (N=6000)", env, src / "configs/mnist_nested_6000.json",
                src / "configs/mnist_end_to_end_9000.json", src / "configs/mnist_nested_no_skip_6000.json",
                src / "configs/mnist_traditional_6000.json"};
      }
    } catch (const std::exception& e) {
      spdlog::warn("NESTCAL_DATA_ROOT unusable ({}), falling back to the bundled subset", e.what());
    }
  }
  return {"desk (N=2000)", src / "data/mnist-subset", src / "configs/desk/mnist_nested_2000.json",
          src / "configs/desk/mnist_end_to_end_3000.json", src / "configs/desk/mnist_nested_no_skip_2000.json",
          src / "configs/desk/mnist_traditional_2000.json"};
}

fs::path cache_dir() {
  if (const char* env = std::getenv("NESTCAL_ACCEPTANCE_DIR"); env && *env) return env;
  return NESTCAL_ACCEPTANCE_CACHE;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return json::parse(in);
}

struct Run {
  fs::path dir;
  std::vector<EvalReport> reports;

  const EvalReport& mode(const std::string& m) const {
    for (const auto& r : reports)
      if (r.combine_mode == m) return r;
    throw std::runtime_error(dir.string() + ": no report for combine mode " + m);
  }
  // Fine-level accuracy / confidence for a condition.
  double acc(const std::string& cond, const std::string& m = "none") const {
    return mode(m).condition(cond).levels.back().accuracy;
  }
  double conf(const std::string& cond, const std::string& m = "none") const {
    return mode(m).condition(cond).levels.back().mean_confidence;
  }
  json attack() const { return read_json(dir / "attack_summary.json"); }
};

Run ensure_run(const Profile& p, const fs::path& config, std::uint64_t seed) {
  auto cfg = ExperimentConfig::load(config);
  apply_overrides(cfg, seed, p.data_root, cache_dir());
  RunOptions opts;
  opts.resume = true;
  opts.plots = false;
  const auto t0 = std::chrono::steady_clock::now();
  std::cerr << "run " << cfg.name << " seed " << seed << " -> " << run_directory(cfg).string() << std::endl;
  auto out = run_experiment(cfg, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << fmt::format("  {} ({:.0f}s)", out.trained ? "trained" : "reused", secs) << std::endl;
  return {out.dir, out.reports};
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// eps@ER from an attack summary; an error rate never reached is reported at the grid top.
double eps_at(const json& summary, const std::string& key, double grid_top) {
  const auto& v = summary.at("eps_at_error_rate").at(key);
  return v.is_null() ? grid_top : v.get<double>();
}

struct Verdict {
  int id;
  std::string title;
  bool pass = false;
  std::string detail;
};

void print(const Verdict& v) {
  std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << v.id << "  " << v.title << ": " << v.detail
            << std::endl;
}

// ---------------------------------------------------------------------------

Verdict criterion7() {
  Verdict v{7, "property suites"};
  const std::vector<std::string> suites = NESTCAL_PROPERTY_SUITES;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> failed;
  for (const auto& exe : suites) {
    const std::string cmd = "\"" + exe + "\" --no-intro=true --minimal=true > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) failed.push_back(fs::path(exe).filename().string());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  v.pass = failed.empty() && secs < 60;
  std::string names;
  for (const auto& f : failed) names += " " + f;
  v.detail = fmt::format("{} suites in {:.1f}s (limit 60s){}", suites.size(), secs,
                         failed.empty() ? "" : ", failed:" + names);
  return v;
}

Verdict criterion8(const Profile& p) {
  Verdict v{8, "parameter count"};
  const auto cfg = ExperimentConfig::load(p.nested);
  auto model = build_model(cfg.spec);
  const double n = static_cast<double>(model.count_parameters());
  v.pass = std::abs(n - 5.2e4) <= 0.1 * 5.2e4;
  v.detail = fmt::format("nested model has {:.0f} parameters (target 52000 +-10%)", n);
  return v;
}

double gaussian_mine(double rho, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  const int n = 20000;
  Eigen::MatrixXd x(1, n), z(1, n);
  for (int k = 0; k < n; ++k) {
    const double a = g(rng), b = g(rng);
    x(0, k) = a;
    z(0, k) = rho * a + std::sqrt(1 - rho * rho) * b;
  }
  MineConfig cfg;
  cfg.seed = seed;
  return mine_estimate(x, z, cfg).estimate;
}

Verdict criterion6(const Run& nested, const Run& no_skip) {
  Verdict v{6, "MINE sanity and skip information gap"};
  const double strong = gaussian_mine(0.9, 11);
  const double truth = -0.5 * std::log(1 - 0.81);
  const double indep = gaussian_mine(0.0, 12);

  const auto gap_path = cache_dir() / ("mi_gap-" + nested.dir.filename().string() + ".json");
  json gap;
  if (fs::exists(gap_path)) {
    gap = read_json(gap_path);
  } else {
    auto ctx = load_run_context(nested.dir);
    auto with_skip = load_run_model(nested.dir);
    auto without = load_run_model(no_skip.dir);
    const int n = std::min(2000, ctx.test.size());
    std::vector<int> idx(n);
    for (int k = 0; k < n; ++k) idx[k] = k;
    MineConfig cfg;
    cfg.seed = ctx.config.seed;
    gap = skip_mi_gap(with_skip, without, ctx.test.subset(idx), cfg).to_json();
    std::ofstream(gap_path) << gap.dump(2) << '\n';
  }
  const double d1 = gap.at("delta1"), d2 = gap.at("delta2");

  const bool g_ok = std::abs(strong - truth) <= 0.10;
  const bool i_ok = std::abs(indep) <= 0.05;
  v.pass = g_ok && i_ok && d1 > d2;
  v.detail = fmt::format("rho=0.9 {:.3f} (want {:.3f}+-0.10), independent {:.3f} (+-0.05), delta1 {:.3f} > delta2 {:.3f}",
                         strong, truth, indep, d1, d2);
  return v;
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const auto profile = pick_profile();
  fs::create_directories(cache_dir());
  std::cout << "acceptance profile: " << profile.name << ", cache " << cache_dir().string() << std::endl;

  std::vector<Verdict> verdicts;
  auto guarded = [&](int id, const std::string& title, auto&& fn) {
    try {
      verdicts.push_back(fn());
    } catch (const std::exception& e) {
      verdicts.push_back({id, title, false, std::string("error: ") + e.what()});
    }
    print(verdicts.back());
  };

  // Cheap criteria first.
  guarded(7, "property suites", [] { return criterion7(); });
  guarded(8, "parameter count", [&] { return criterion8(profile); });

  std::vector<Run> nested, e2e;
  std::optional<Run> no_skip, traditional;
  std::string run_error;
  try {
    for (std::uint64_t s = 0; s < 3; ++s) nested.push_back(ensure_run(profile, profile.nested, s));
    for (std::uint64_t s = 0; s < 3; ++s) e2e.push_back(ensure_run(profile, profile.end_to_end, s));
    no_skip = ensure_run(profile, profile.no_skip, 0);
    traditional = ensure_run(profile, profile.traditional, 0);
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  auto need_runs = [&] {
    if (!run_error.empty()) throw std::runtime_error("training runs unavailable: " + run_error);
  };

  guarded(1, "nested vs end-to-end", [&] {
    need_runs();
    Verdict v{1, "nested vs end-to-end"};
    std::vector<double> nc, nd, ec, ed;
    for (const auto& r : nested) {
      nc.push_back(r.acc("original"));
      nd.push_back(r.acc("distortion2"));
    }
    for (const auto& r : e2e) {
      ec.push_back(r.acc("original"));
      ed.push_back(r.acc("distortion2"));
    }
    const double clean = mean(nc), gap = mean(nd) - mean(ed);
    v.pass = clean >= 97.5 && gap >= 1.0;
    v.detail = fmt::format(
        "3-seed mean: nested clean {:.2f} (>= 97.5), distortion 2 nested {:.2f} vs end-to-end {:.2f}, "
        "gap {:+.2f} (>= 1)",
        clean, mean(nd), mean(ed), gap);
    return v;
  });

  guarded(2, "skip-connection ablation", [&] {
    need_runs();
    Verdict v{2, "skip-connection ablation"};
    const double with = nested[0].acc("distortion2"), without = no_skip->acc("distortion2");
    v.pass = with - without >= 5.0;
    v.detail = fmt::format("distortion 2 fine accuracy {:.2f} with skips vs {:.2f} without, gap {:+.2f} (>= 5)",
                           with, without, with - without);
    return v;
  });

  guarded(3, "cascaded vs traditional", [&] {
    need_runs();
    Verdict v{3, "cascaded vs traditional"};
    const double ca = nested[0].acc("original"), cc = nested[0].conf("original");
    const double ta = traditional->acc("original"), tc = traditional->conf("original");
    const double cgap = std::abs(ca - cc), tgap = std::abs(ta - tc);
    v.pass = ca - ta >= 2.0 && cgap <= 3.0 && cgap < tgap;
    v.detail = fmt::format(
        "clean fine acc/conf cascaded {:.2f}/{:.2f}, traditional {:.2f}/{:.2f}; acc gain {:+.2f} (>= 2), "
        "|acc-conf| {:.2f} (<= 3) vs {:.2f}",
        ca, cc, ta, tc, ca - ta, cgap, tgap);
    return v;
  });

  guarded(4, "nested combination", [&] {
    need_runs();
    Verdict v{4, "nested combination"};
    const auto& r = nested[0];
    const double d4 = r.acc("distortion4", "nested") - r.acc("distortion4", "none");
    const double clean = r.acc("original", "nested") - r.acc("original", "none");
    v.pass = d4 >= 2.0 && clean >= -0.5;
    v.detail = fmt::format(
        "distortion 4 fine accuracy {:.2f} combined vs {:.2f} alone ({:+.2f}, >= 2); clean {:.2f} vs {:.2f} ({:+.2f}, >= -0.5); "
        "baselines at distortion 4: mean {:.2f}, product {:.2f}, majority {:.2f}",
        r.acc("distortion4", "nested"), r.acc("distortion4", "none"), d4, r.acc("original", "nested"),
        r.acc("original", "none"), clean, r.acc("distortion4", "mean"), r.acc("distortion4", "product"),
        r.acc("distortion4", "majority"));
    return v;
  });

  guarded(5, "FGSM robustness", [&] {
    need_runs();
    Verdict v{5, "FGSM robustness"};
    const auto top = [](const Run& r) {
      return read_json(r.dir / "config.json").at("attack").at("epsilon_grid").back().get<double>();
    };
    std::vector<double> ne, ee, ns, es;
    for (const auto& r : nested) {
      const auto a = r.attack();
      ne.push_back(eps_at(a, "10", top(r)));
      ns.push_back(a.at("survival").at("accuracy").at(0).get<double>());
    }
    for (const auto& r : e2e) {
      const auto a = r.attack();
      ee.push_back(eps_at(a, "10", top(r)));
      es.push_back(a.at("survival").at("accuracy").at(0).get<double>());
    }
    const double ratio = median(ne) / median(ee);
    const double surv = mean(ns) - mean(es);
    v.pass = ratio >= 1.5 && surv >= 20.0;
    v.detail = fmt::format(
        "median eps@ER=10% nested {:.4f} vs end-to-end {:.4f}, ratio {:.2f} (>= 1.5); coarse accuracy after "
        "the fine label flips {:.1f} vs {:.1f}, gap {:+.1f} (>= 20)",
        median(ne), median(ee), ratio, mean(ns), mean(es), surv);
    return v;
  });

  guarded(6, "MINE sanity and skip information gap", [&] {
    need_runs();
    return criterion6(nested[0], *no_skip);
  });

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  std::cout << "\nsummary" << std::endl;
  int failures = 0;
  for (const auto& v : verdicts) {
    print(v);
    failures += !v.pass;
  }
  std::cout << (verdicts.size() - failures) << "/" << verdicts.size() << " criteria pass" << std::endl;
  return failures == 0 ? 0 : 1;
}
