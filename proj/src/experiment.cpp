#include "nestcal/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "nestcal/error.hpp"
#include "nestcal/inference.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace nestcal {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t sub_seed(std::uint64_t base, std::uint64_t tag) { return splitmix(base ^ splitmix(tag)) >> 1; }

enum SeedTag : std::uint64_t { kPartition = 1, kValidation, kInit, kTrain, kRejection, kDistortion, kMine };

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what(), e.byte);
  }
}

void write_json(const fs::path& path, const json& j) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<NamedDistortion> standard_distortions() {
  std::vector<NamedDistortion> out;
  for (int k = 1; k <= 4; ++k) out.push_back({"distortion" + std::to_string(k), distortion_level(k)});
  return out;
}

// Default logger for the duration of a run: console plus <run>/run.log.
class RunLogger {
 public:
  explicit RunLogger(const fs::path& log_path) : previous_(spdlog::default_logger()) {
    auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>(log_path.string(), false);
    auto console = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
    auto logger = std::make_shared<spdlog::logger>("run", spdlog::sinks_init_list{console, file});
    // The file always gets the info trail; the console keeps the caller's verbosity.
    console->set_level(previous_->level());
    logger->set_level(std::min(previous_->level(), spdlog::level::info));
    logger->flush_on(spdlog::level::info);
    spdlog::set_default_logger(logger);
  }
  ~RunLogger() {
    spdlog::default_logger()->flush();
    spdlog::set_default_logger(previous_);
  }
  RunLogger(const RunLogger&) = delete;
  RunLogger& operator=(const RunLogger&) = delete;

 private:
  std::shared_ptr<spdlog::logger> previous_;
};

struct LoadedData {
  Taxonomy taxonomy;
  Dataset pool, validation, test;
};

LoadedData load_data(const ExperimentConfig& cfg) {
  if (cfg.dataset != "mnist" && cfg.dataset != "fmnist") {
    throw ValidationError("dataset '" + cfg.dataset + "' has no loader (IDX datasets: mnist, fmnist)");
  }
  auto tax = cfg.load_taxonomy();
  auto train = relabel(load_mnist_split(cfg.data_root, "train"), tax);
  auto test = relabel(load_mnist_split(cfg.data_root, "test"), tax);
  if (cfg.validation_size >= train.size()) throw ValidationError("validation_size exceeds the training split");
  auto [pool, val] = split_holdout(train, cfg.validation_size, cfg.validation_seed);
  if (cfg.test_limit > 0 && cfg.test_limit < test.size()) {
    std::vector<int> idx(cfg.test_limit);
    for (int k = 0; k < cfg.test_limit; ++k) idx[k] = k;
    test = test.subset(idx);
  }
  return {std::move(tax), std::move(pool), std::move(val), std::move(test)};
}

NestedModelSpec model_spec_for(const ExperimentConfig& cfg, const Dataset& ds) {
  auto spec = cfg.spec;
  if (spec.channels != ds.channels || spec.height != ds.height || spec.width != ds.width) {
    throw ShapeError("model input " + std::to_string(spec.height) + "x" + std::to_string(spec.width) + "x" +
                     std::to_string(spec.channels) + " does not match the data");
  }
  return spec;
}

std::vector<std::vector<int>> labels_of(const Dataset& ds) { return ds.level_labels; }

json predictions_document(const PredictionSet& p, const Dataset& ds) {
  auto j = p.to_json();
  j["labels"] = ds.level_labels;
  return j;
}

struct Status {
  fs::path path;
  json doc = json::object();
  bool done(const std::string& stage) const { return doc.contains(stage) && doc.at(stage) == "done"; }
  void set(const std::string& stage, const std::string& state) {
    doc[stage] = state;
    write_json(path, doc);
  }
};

template <class F>
auto stage(Status& status, const std::string& name, F&& body) {
  spdlog::info("stage {}", name);
  try {
    if constexpr (std::is_void_v<decltype(body())>) {
      body();
      status.set(name, "done");
    } else {
      auto r = body();
      status.set(name, "done");
      return r;
    }
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    spdlog::error("stage {} failed: {}", name, e.what());
    try {
      status.set(name, std::string("failed: ") + e.what());
    } catch (...) {
    }
    throw StageError(name, e.what());
  }
}

std::string percent_key(double rate) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%g", rate * 100);
  return buf;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

fs::path resolve_resource(const fs::path& p, const fs::path& base_dir) {
  if (p.empty() || p.is_absolute()) return p;
  if (!base_dir.empty() && fs::exists(base_dir / p)) return fs::weakly_canonical(base_dir / p);
  if (fs::exists(p)) return fs::weakly_canonical(p);
  const fs::path src(NESTCAL_SOURCE_DIR);
  if (fs::exists(src / p)) return src / p;
  return p;
}

void ExperimentConfig::derive_seeds() {
  partition_seed = sub_seed(seed, kPartition);
  validation_seed = sub_seed(seed, kValidation);
  spec.init_seed = sub_seed(seed, kInit);
  train.seed = sub_seed(seed, kTrain);
  rejection_cfg.seed = sub_seed(seed, kRejection);
  distortion_seed = sub_seed(seed, kDistortion);
  mine.seed = sub_seed(seed, kMine);
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
  ExperimentConfig c;
  try {
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != kSchemaVersion) {
      throw ValidationError("unsupported schema_version " + std::to_string(c.schema_version));
    }
    c.name = j.value("name", c.name);
    if (!j.contains("seed")) throw ValidationError("config: 'seed' is required");
    c.seed = j.at("seed").get<std::uint64_t>();

    const auto& data = j.at("data");
    c.dataset = data.value("dataset", c.dataset);
    c.data_root = resolve_resource(data.at("root").get<std::string>(), base_dir);
    c.validation_size = data.value("validation_size", c.validation_size);
    c.test_limit = data.value("test_limit", c.test_limit);

    const auto& tax = j.at("taxonomy");
    if (tax.is_string()) {
      c.taxonomy = read_json(resolve_resource(tax.get<std::string>(), base_dir));
    } else {
      c.taxonomy = tax;
    }
    const auto taxonomy = Taxonomy::from_json(c.taxonomy);

    const auto& part = j.at("partition");
    c.partition_sizes = part.at("sizes").get<std::vector<int>>();
    c.stratified = part.value("stratified", false);

    const auto& model = j.at("model");
    json spec_doc = json::object();
    if (model.contains("spec")) {
      const auto& s = model.at("spec");
      spec_doc = s.is_string() ? read_json(resolve_resource(s.get<std::string>(), base_dir)) : s;
    }
    if (model.contains("overrides")) spec_doc.merge_patch(model.at("overrides"));
    if (model.contains("variant")) spec_doc["variant"] = model.at("variant");
    const auto variant = variant_from_string(spec_doc.value("variant", std::string("nested")));
    if (variant == Variant::end_to_end) {
      spec_doc["arities"] = std::vector<int>{taxonomy.alphabet_size(taxonomy.fine_level())};
    } else {
      spec_doc["arities"] = taxonomy.alphabet_sizes();
    }
    c.spec = NestedModelSpec::from_json(spec_doc);

    const auto train = j.value("training", json::object());
    c.training_mode = train.value("mode", c.training_mode);
    c.train = TrainConfig::from_json(train);

    const auto cal = j.value("calibration", json::object());
    c.calibrate = cal.value("enabled", true);
    c.rejection = cal.value("rejection", true);
    if (cal.contains("rejection_config")) c.rejection_cfg = RejectionConfig::from_json(cal.at("rejection_config"));
    if (cal.contains("temperature_grid")) {
      const auto& g = cal.at("temperature_grid");
      c.grid = g.is_string() ? TemperatureGrid::parse(g.get<std::string>())
                             : TemperatureGrid{g.at("count").get<int>(), g.at("lo").get<double>(),
                                               g.at("hi").get<double>()};
    }
    c.bins = cal.value("bins", c.bins);

    const auto ev = j.value("evaluation", json::object());
    if (!ev.contains("distortions") || ev.at("distortions") == "standard") {
      c.distortions = standard_distortions();
    } else {
      for (const auto& d : ev.at("distortions")) {
        NamedDistortion nd;
        nd.name = d.at("name").get<std::string>();
        if (d.contains("level")) {
          nd.params = distortion_level(d.at("level").get<int>());
        } else {
          nd.params.S = d.at("S").get<double>();
          nd.params.T = d.at("T").get<double>();
        }
        c.distortions.push_back(nd);
      }
    }
    c.combine = combine_mode_from_string(ev.value("combine", std::string("none")));
    for (const auto& m : ev.value("extra_combine", std::vector<std::string>{})) {
      c.extra_combine.push_back(combine_mode_from_string(m));
    }

    const auto at = j.value("attack", json::object());
    c.attack = at.value("enabled", false);
    c.attack_limit = at.value("limit", c.attack_limit);
    c.attack_cfg = AttackConfig::from_json(at);
    const auto surv = at.value("survival", json::object());
    c.survival = surv.value("enabled", false);
    c.survival_cfg = AttackConfig::from_json(surv);

    const auto mi = j.value("mi", json::object());
    c.mi = mi.value("enabled", false);
    c.mi_samples = mi.value("samples", c.mi_samples);
    if (mi.contains("mine")) c.mine = MineConfig::from_json(mi.at("mine"));

    c.output = j.value("output", std::string("runs"));

    // Sub-seeds: derived unless the config names them.
    c.derive_seeds();
    const auto seeds = j.value("seeds", json::object());
    c.partition_seed = seeds.value("partition", c.partition_seed);
    c.validation_seed = seeds.value("validation", c.validation_seed);
    c.spec.init_seed = seeds.value("init", c.spec.init_seed);
    c.train.seed = seeds.value("train", c.train.seed);
    c.rejection_cfg.seed = seeds.value("rejection", c.rejection_cfg.seed);
    c.distortion_seed = seeds.value("distortion", c.distortion_seed);
    c.mine.seed = seeds.value("mine", c.mine.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return from_json(read_json(path), path.parent_path());
}

json ExperimentConfig::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["name"] = name;
  j["seed"] = seed;
  j["seeds"] = {{"partition", partition_seed}, {"validation", validation_seed}, {"init", spec.init_seed},
                {"train", train.seed},         {"rejection", rejection_cfg.seed}, {"distortion", distortion_seed},
                {"mine", mine.seed}};
  j["data"] = {{"dataset", dataset},
               {"root", data_root.string()},
               {"validation_size", validation_size},
               {"test_limit", test_limit}};
  j["taxonomy"] = taxonomy;
  j["partition"] = {{"sizes", partition_sizes}, {"stratified", stratified}};
  j["model"] = {{"spec", spec.to_json()}};
  auto tj = train.to_json();
  tj["mode"] = training_mode;
  j["training"] = tj;
  j["calibration"] = {{"enabled", calibrate},
                      {"rejection", rejection},
                      {"rejection_config", rejection_cfg.to_json()},
                      {"temperature_grid", {{"count", grid.count}, {"lo", grid.lo}, {"hi", grid.hi}}},
                      {"bins", bins}};
  json ds = json::array();
  for (const auto& d : distortions) ds.push_back({{"name", d.name}, {"S", d.params.S}, {"T", d.params.T}});
  std::vector<std::string> extras;
  for (auto m : extra_combine) extras.push_back(to_string(m));
  j["evaluation"] = {{"distortions", ds}, {"combine", to_string(combine)}, {"extra_combine", extras}};
  auto at = attack_cfg.to_json();
  at["enabled"] = attack;
  at["limit"] = attack_limit;
  auto sv = survival_cfg.to_json();
  sv["enabled"] = survival;
  at["survival"] = sv;
  j["attack"] = at;
  j["mi"] = {{"enabled", mi}, {"samples", mi_samples}, {"mine", mine.to_json()}};
  j["output"] = output.string();
  return j;
}

void ExperimentConfig::validate() const {
  if (name.empty() || name.find_first_of("/\\") != std::string::npos) {
    throw ValidationError("config: name must be a plain identifier");
  }
  const auto tax = load_taxonomy();
  if (static_cast<int>(partition_sizes.size()) != tax.levels()) {
    throw ValidationError("config: partition needs one size per taxonomy level");
  }
  for (int n : partition_sizes) {
    if (n < 0) throw ValidationError("config: negative partition size");
  }
  if (training_mode != "cascaded" && training_mode != "traditional") {
    throw ValidationError("config: training.mode must be cascaded or traditional");
  }
  if (training_mode == "traditional" && spec.variant == Variant::end_to_end) {
    throw ValidationError("config: traditional training needs one head per level");
  }
  train.validate(spec.levels());
  rejection_cfg.validate();
  if (grid.count < 1 || grid.lo <= 0 || grid.hi < grid.lo) throw ValidationError("config: bad temperature grid");
  if (bins < 1) throw ValidationError("config: bins must be positive");
  if (validation_size < 1) throw ValidationError("config: validation_size must be positive");
  for (const auto& d : distortions) d.params.validate();
  if (attack_limit < 1) throw ValidationError("config: attack.limit must be positive");
  mine.validate();
}

std::string ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("output");
  j["data"].erase("root");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return std::string(buf).substr(0, 12);
}

void apply_overrides(ExperimentConfig& cfg, std::optional<std::uint64_t> seed,
                     const std::optional<fs::path>& data_root, const std::optional<fs::path>& out) {
  if (seed) {
    cfg.seed = *seed;
    cfg.derive_seeds();
  }
  if (data_root) {
    cfg.data_root = *data_root;
  } else if (const char* env = std::getenv("NESTCAL_DATA_ROOT"); env && *env) {
    cfg.data_root = env;
  }
  if (out) cfg.output = *out;
}

fs::path run_directory(const ExperimentConfig& cfg) { return cfg.output / (cfg.name + "-" + cfg.hash()); }

RunOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  if (!fs::exists(cfg.data_root)) {
    throw StageError("load", "data root " + cfg.data_root.string() + " does not exist (see --data-root)");
  }
  RunOutcome outcome;
  outcome.dir = run_directory(cfg);
  const auto& dir = outcome.dir;

  auto& plan = outcome.plan;
  plan.push_back("load: " + cfg.dataset + " from " + cfg.data_root.string() + ", validation " +
                 std::to_string(cfg.validation_size));
  {
    std::string sizes;
    for (int n : cfg.partition_sizes) sizes += (sizes.empty() ? "" : ",") + std::to_string(n);
    plan.push_back("partition: sizes [" + sizes + "]" + (cfg.stratified ? " stratified" : ""));
  }
  plan.push_back("build: " + to_string(cfg.spec.variant) + " with " + std::to_string(cfg.spec.levels()) + " head(s)");
  plan.push_back("train: " + cfg.training_mode);
  plan.push_back(std::string("calibrate: ") +
                 (cfg.calibrate ? (cfg.rejection ? "rejection class + temperature" : "temperature") : "off"));
  plan.push_back("evaluate: original + " + std::to_string(cfg.distortions.size()) + " distortion(s), combine " +
                 to_string(cfg.combine));
  plan.push_back(std::string("attack: ") + (cfg.attack ? "fgsm on " + std::to_string(cfg.attack_limit) + " samples"
                                                       : "off"));
  plan.push_back(std::string("mi: ") + (cfg.mi ? "on" : "off"));
  plan.push_back("output: " + dir.string());
  if (opts.dry_run) return outcome;

  if (fs::exists(dir / "config.json")) {
    if (!opts.resume && !opts.force) {
      throw StageError("setup", "run directory " + dir.string() + " exists; use --resume or --force");
    }
    if (opts.force && !opts.resume) fs::remove_all(dir);
  }
  fs::create_directories(dir);
  if (fs::exists(dir / "config.json")) {
    if (read_json(dir / "config.json") != cfg.to_json()) {
      throw StageError("setup", "config.json in " + dir.string() + " differs from the requested config");
    }
  } else {
    write_json(dir / "config.json", cfg.to_json());
  }

  RunLogger logger(dir / "run.log");
  Status status{dir / "status.json"};
  if (fs::exists(status.path)) status.doc = read_json(status.path);
  spdlog::info("run {} ({})", dir.string(), opts.resume ? "resume" : "fresh");

  auto data = stage(status, "load", [&] { return load_data(cfg); });
  const auto& tax = data.taxonomy;

  auto pds = stage(status, "partition", [&] {
    auto p = partition_dataset(data.pool, cfg.partition_sizes, cfg.partition_seed, cfg.stratified);
    const auto path = dir / "partition.json";
    if (fs::exists(path) && PartitionedDataset::load(path).to_json() != p.to_json()) {
      throw ValidationError("persisted partition differs from the recomputed one");
    }
    p.save(path);
    return p;
  });

  auto model = stage(status, "build", [&] {
    auto m = build_model(model_spec_for(cfg, data.pool));
    spdlog::info("{} model, {} parameters", to_string(m.spec().variant), m.count_parameters());
    return m;
  });

  stage(status, "train", [&] {
    const auto ckpt = dir / "model.ckpt";
    if (opts.resume && fs::exists(ckpt) && fs::exists(dir / "history.jsonl")) {
      model = Model::load(ckpt, &model.spec());
      spdlog::info("reusing {}", ckpt.string());
      return;
    }
    TrainHooks hooks;
    hooks.on_step_end = [&](int step, Model& m) { m.save(dir / ("step" + std::to_string(step) + ".ckpt")); };
    const auto hist = cfg.training_mode == "cascaded"
                          ? train_cascaded(model, data.pool, pds, data.validation, cfg.train, hooks)
                          : train_traditional(model, data.pool, pds, data.validation, cfg.train, hooks);
    hist.write_jsonl(dir / "history.jsonl");
    model.save(ckpt);
    outcome.trained = true;
  });

  auto cal = stage(status, "calibrate", [&] {
    const auto ckpt = dir / "calibrated.ckpt";
    const auto cal_path = dir / "calibration.json";
    if (opts.resume && fs::exists(ckpt) && fs::exists(cal_path)) {
      model = Model::load(ckpt, &model.spec());
      return CalibrationState::from_json(read_json(cal_path));
    }
    CalibrationState state = CalibrationState::identity(model.levels());
    if (cfg.calibrate) {
      RejectionReport rep;
      if (cfg.rejection) rep = fit_rejection_class(model, data.pool, pds, cfg.rejection_cfg);
      state = fit_calibration(model, data.validation, cfg.grid, cfg.bins);
      state.rejection = rep;
    }
    model.save(ckpt);
    write_json(cal_path, state.to_json());
    return state;
  });

  outcome.reports = stage(status, "evaluate", [&] {
    std::vector<CombineMode> modes{cfg.combine};
    if (model.levels() == tax.levels()) {
      for (auto m : cfg.extra_combine) {
        if (std::find(modes.begin(), modes.end(), m) == modes.end()) modes.push_back(m);
      }
    } else if (!cfg.extra_combine.empty() || cfg.combine != CombineMode::none) {
      spdlog::info("single-head model: combination modes skipped");
      modes = {CombineMode::none};
    }
    std::vector<EvalReport> reports(modes.size());
    for (std::size_t i = 0; i < modes.size(); ++i) {
      reports[i].run = dir.filename().string();
      reports[i].variant = to_string(cfg.spec.variant) + (cfg.training_mode == "traditional" ? "/traditional" : "");
      reports[i].combine_mode = to_string(modes[i]);
      reports[i].seed = cfg.seed;
      reports[i].partition_sizes = cfg.partition_sizes;
    }
    std::vector<std::pair<std::string, const Dataset*>> conditions{{"original", &data.test}};
    std::vector<Dataset> distorted;
    distorted.reserve(cfg.distortions.size());
    for (std::size_t d = 0; d < cfg.distortions.size(); ++d) {
      auto p = cfg.distortions[d].params;
      p.seed = sub_seed(cfg.distortion_seed, d);
      distorted.push_back(distort_dataset(data.test, p));
      conditions.emplace_back(cfg.distortions[d].name, &distorted.back());
    }
    fs::create_directories(dir / "predictions");
    for (const auto& [name, ds] : conditions) {
      const auto preds = predict(model, *ds, tax, cal);
      write_json(dir / "predictions" / (name + ".json"), predictions_document(preds, *ds));
      for (std::size_t i = 0; i < modes.size(); ++i) {
        reports[i].conditions.push_back(evaluate_predictions(preds, labels_of(*ds), tax, modes[i], name));
      }
      const auto& fine = reports[0].conditions.back().levels.back();
      spdlog::info("{}: fine acc {:.2f}% conf {:.2f}%", name, fine.accuracy, fine.mean_confidence);
    }
    write_json(dir / "report.json", reports_to_json(reports));
    write_text(dir / "report.txt", report_table(reports));
    return reports;
  });

  if (cfg.attack) {
    stage(status, "attack", [&] {
      const auto summary_path = dir / "attack_summary.json";
      if (opts.resume && fs::exists(summary_path)) return;
      const int n = std::min(cfg.attack_limit, data.test.size());
      std::vector<int> idx(n);
      for (int k = 0; k < n; ++k) idx[k] = k;
      const auto subset = data.test.subset(idx);
      const auto labels = subset.level_labels.back();
      std::vector<std::optional<double>> flips;
      for (int start = 0; start < n; start += 200) {
        const int stop = std::min(n, start + 200);
        std::vector<int> chunk(idx.begin() + start, idx.begin() + stop);
        auto part = min_eps_to_flip(model, gather_inputs(subset, chunk),
                                    std::span<const int>(labels).subspan(start, stop - start), cfg.attack_cfg);
        flips.insert(flips.end(), part.begin(), part.end());
      }
      {
        std::ofstream out(dir / "attack.jsonl");
        for (int k = 0; k < n; ++k) {
          json row = {{"index", k}, {"label", labels[k]}};
          row["min_eps"] = flips[k] ? json(*flips[k]) : json(nullptr);
          out << row.dump() << '\n';
        }
      }
      json summary;
      summary["samples"] = n;
      summary["attack"] = "fgsm";
      for (double rate : {0.05, 0.10, 0.15, 0.30}) {
        const auto e = eps_at_error_rate(flips, cfg.attack_cfg.epsilon_grid, rate);
        summary["eps_at_error_rate"][percent_key(rate)] = e ? json(*e) : json(nullptr);
      }
      if (cfg.survival) {
        const auto rep = coarse_survival_under_fine_attack(model, subset, tax, cfg.survival_cfg);
        summary["survival"] = {{"accuracy", rep.accuracy},
                               {"flipped", rep.flipped},
                               {"never_flipped", rep.never_flipped},
                               {"initially_wrong", rep.initially_wrong}};
      }
      write_json(summary_path, summary);
    });
  }

  if (cfg.mi) {
    stage(status, "mi", [&] {
      const auto path = dir / "mi.json";
      if (opts.resume && fs::exists(path)) return;
      const int n = std::min(cfg.mi_samples, data.test.size());
      std::vector<int> idx(n);
      for (int k = 0; k < n; ++k) idx[k] = k;
      const auto taps = collect_taps(model, data.test.subset(idx));
      json doc;
      const auto fg = mine_estimate(taps.at("F"), taps.at("G"), cfg.mine);
      const auto fh = mine_estimate(taps.at("F"), taps.at("H"), cfg.mine);
      doc["estimates"] = {{"I(F,G)", fg.estimate}, {"I(F,H)", fh.estimate}};
      doc["delta"] = fg.estimate - fh.estimate;
      doc["traces"] = {{"I(F,G)", fg.trace}, {"I(F,H)", fh.trace}};
      doc["samples"] = n;
      write_json(path, doc);
    });
  }

  if (opts.plots) {
    stage(status, "plots", [&] { emit_plots(dir); });
  }
  spdlog::info("run complete: {}", dir.string());
  return outcome;
}

RunContext load_run_context(const fs::path& run_dir) {
  auto doc = read_json(run_dir / "config.json");
  if (const char* env = std::getenv("NESTCAL_DATA_ROOT"); env && *env) doc["data"]["root"] = env;
  const auto cfg = ExperimentConfig::from_json(doc, run_dir);
  auto data = load_data(cfg);
  RunContext ctx{cfg, data.taxonomy, std::move(data.pool), std::move(data.validation), std::move(data.test),
                 PartitionedDataset::load(run_dir / "partition.json")};
  return ctx;
}

Model load_run_model(const fs::path& run_dir, bool calibrated) {
  const auto cal = run_dir / "calibrated.ckpt";
  if (calibrated && fs::exists(cal)) return Model::load(cal);
  const auto plain = run_dir / "model.ckpt";
  if (!fs::exists(plain)) throw ValidationError("no checkpoint in " + run_dir.string());
  return Model::load(plain);
}

CalibrationState load_run_calibration(const fs::path& run_dir, int levels) {
  const auto path = run_dir / "calibration.json";
  if (!fs::exists(path)) return CalibrationState::identity(levels);
  return CalibrationState::from_json(read_json(path));
}

}  // namespace nestcal
