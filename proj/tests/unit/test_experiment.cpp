#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "nestcal/error.hpp"
#include "nestcal/experiment.hpp"

using namespace nestcal;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json bundled(const std::string& name) {
  std::ifstream in(resolve_resource("configs/" + name));
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A run small enough for the unit suite: every stage, a few seconds.
ExperimentConfig tiny(const fs::path& out) {
  auto j = bundled("desk/mnist_nested_2000.json");
  j["name"] = "unit";
  j["model"]["spec"] = resolve_resource("configs/models/mnist.json").string();
  j["data"]["validation_size"] = 200;
  j["data"]["test_limit"] = 120;
  j["partition"]["sizes"] = {60, 60, 60};
  j["training"]["max_epochs"] = 1;
  j["calibration"]["rejection_config"]["epochs"] = 1;
  j["attack"]["limit"] = 16;
  j["mi"]["samples"] = 120;
  j["mi"]["mine"] = {{"steps", 20}, {"batch_size", 64}};
  auto cfg = ExperimentConfig::from_json(j, resolve_resource("configs/desk"));
  cfg.output = out;
  return cfg;
}

}  // namespace

TEST_CASE("bundled configs parse") {
  for (const char* name : {"mnist_nested_6000.json", "mnist_end_to_end_9000.json", "mnist_nested_no_skip_6000.json",
                           "mnist_traditional_6000.json", "mnist_mtl_6000.json", "desk/mnist_nested_2000.json",
                           "desk/mnist_end_to_end_3000.json", "desk/mnist_nested_no_skip_2000.json",
                           "desk/mnist_traditional_2000.json"}) {
    CAPTURE(name);
    const auto path = resolve_resource(fs::path("configs") / name);
    const auto cfg = ExperimentConfig::load(path);
    CHECK(cfg.schema_version == kSchemaVersion);
    CHECK(cfg.distortions.size() == 4);
    // The resolved form is a fixed point.
    const auto again = ExperimentConfig::from_json(cfg.to_json());
    CHECK(again.to_json() == cfg.to_json());
    CHECK(again.hash() == cfg.hash());
  }
  const auto nested = ExperimentConfig::load(resolve_resource("configs/mnist_nested_6000.json"));
  const auto e2e = ExperimentConfig::load(resolve_resource("configs/mnist_end_to_end_9000.json"));
  CHECK(nested.partition_sizes == std::vector<int>{6000, 6000, 6000});
  CHECK(e2e.partition_sizes == std::vector<int>{0, 0, 9000});
  CHECK(e2e.spec.arities == std::vector<int>{10});
  CHECK(nested.hash() != e2e.hash());
}

TEST_CASE("config validation") {
  auto j = bundled("desk/mnist_nested_2000.json");
  const auto base = resolve_resource("configs/desk");
  auto missing_seed = j;
  missing_seed.erase("seed");
  CHECK_THROWS_AS(ExperimentConfig::from_json(missing_seed, base), ValidationError);
  auto version = j;
  version["schema_version"] = 99;
  CHECK_THROWS_AS(ExperimentConfig::from_json(version, base), ValidationError);
  auto sizes = j;
  sizes["partition"]["sizes"] = {10, 10};
  CHECK_THROWS_AS(ExperimentConfig::from_json(sizes, base), ValidationError);
  auto mode = j;
  mode["training"]["mode"] = "greedy";
  CHECK_THROWS_AS(ExperimentConfig::from_json(mode, base), ValidationError);
  auto tax = j;
  tax["taxonomy"] = "no/such/taxonomy.json";
  CHECK_THROWS(ExperimentConfig::from_json(tax, base));
}

TEST_CASE("seeds and overrides") {
  auto cfg = ExperimentConfig::load(resolve_resource("configs/desk/mnist_nested_2000.json"));
  const auto h0 = cfg.hash();
  const auto p0 = cfg.partition_seed;
  apply_overrides(cfg, 5, std::nullopt, fs::path("elsewhere"));
  CHECK(cfg.seed == 5);
  CHECK(cfg.partition_seed != p0);
  CHECK(cfg.hash() != h0);
  CHECK(run_directory(cfg).parent_path() == fs::path("elsewhere"));
  // The data root and output directory do not enter the hash.
  const auto h1 = cfg.hash();
  apply_overrides(cfg, std::nullopt, fs::path("/somewhere/else"), fs::path("other"));
  CHECK(cfg.hash() == h1);
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("dry run prints the plan only") {
  const auto out = fs::temp_directory_path() / "nestcal-dry";
  fs::remove_all(out);
  auto cfg = tiny(out);
  RunOptions opts;
  opts.dry_run = true;
  const auto r = run_experiment(cfg, opts);
  CHECK(r.plan.size() >= 8);
  CHECK_FALSE(fs::exists(r.dir));
}

TEST_CASE("full run, resume and failure reporting") {
  const auto out = fs::temp_directory_path() / "nestcal-run";
  fs::remove_all(out);
  const auto cfg = tiny(out);
  const auto first = run_experiment(cfg);
  CHECK(first.trained);
  for (const char* f : {"config.json", "partition.json", "history.jsonl", "model.ckpt", "step0.ckpt", "step2.ckpt",
                        "calibrated.ckpt", "calibration.json", "report.json", "report.txt", "run.log",
                        "attack.jsonl", "attack_summary.json", "mi.json", "predictions/original.json",
                        "predictions/distortion4.json", "plots/accuracy.svg", "plots/mi.svg"}) {
    CAPTURE(f);
    CHECK(fs::exists(first.dir / f));
  }
  const auto report = slurp(first.dir / "report.json");

  CHECK_THROWS_AS(run_experiment(cfg), StageError);  // no silent overwrite

  RunOptions resume;
  resume.resume = true;
  const auto second = run_experiment(cfg, resume);
  CHECK_FALSE(second.trained);
  CHECK(slurp(second.dir / "report.json") == report);

  auto broken = cfg;
  broken.name = "unit-broken";
  broken.data_root = out / "empty";
  fs::create_directories(broken.data_root);
  try {
    run_experiment(broken);
    FAIL("missing data accepted");
  } catch (const StageError& e) {
    CHECK(e.stage() == "load");
  }
  const auto log = slurp(run_directory(broken) / "run.log");
  CHECK(log.find("stage load failed") != std::string::npos);

  CHECK_THROWS(emit_plots(out / "nothing-here"));
}
