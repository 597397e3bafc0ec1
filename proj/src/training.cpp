#include "nestcal/training.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "nestcal/error.hpp"
#include "nestcal/inference.hpp"
#include "nestcal/nn/adam.hpp"

namespace nestcal {

void TrainConfig::validate(int levels) const {
  if (static_cast<int>(alphas.size()) < levels) throw ValidationError("train config: one alpha per level required");
  if (static_cast<int>(learning_rates.size()) < levels) {
    throw ValidationError("train config: one learning rate per cascade step required");
  }
  for (double a : alphas)
    if (!(a >= 0)) throw ValidationError("train config: alphas must be >= 0");
  for (double r : learning_rates)
    if (!(r > 0)) throw ValidationError("train config: learning rates must be > 0");
  if (!(traditional_rate > 0)) throw ValidationError("train config: traditional_rate must be > 0");
  if (patience < 1) throw ValidationError("train config: patience must be >= 1");
  if (batch_size < 2) throw ValidationError("train config: batch_size must be >= 2");
  if (max_epochs < 1) throw ValidationError("train config: max_epochs must be >= 1");
  if (!(min_delta >= 0)) throw ValidationError("train config: min_delta must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"alphas", alphas},         {"learning_rates", learning_rates}, {"traditional_rate", traditional_rate},
          {"batch_size", batch_size}, {"patience", patience},             {"min_delta", min_delta},
          {"max_epochs", max_epochs}, {"seed", seed},                     {"freeze_coarse", freeze_coarse}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("alphas")) c.alphas = j.at("alphas").get<std::vector<double>>();
  if (j.contains("learning_rates")) c.learning_rates = j.at("learning_rates").get<std::vector<double>>();
  c.traditional_rate = j.value("traditional_rate", c.traditional_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  c.freeze_coarse = j.value("freeze_coarse", c.freeze_coarse);
  return c;
}

std::vector<EpochRecord> TrainHistory::step_records(int step) const {
  std::vector<EpochRecord> out;
  for (const auto& r : records)
    if (r.step == step) out.push_back(r);
  return out;
}

void TrainHistory::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json{{"type", "meta"}, {"mode", mode}, {"best_epoch", best_epoch},
                        {"first_batch_loss", first_batch_loss}, {"alphas", alphas}}.dump()
      << '\n';
  for (const auto& r : records) {
    nlohmann::json acc = nlohmann::json::array();
    for (const auto& a : r.val_accuracy) acc.push_back(a ? nlohmann::json(*a) : nlohmann::json());
    out << nlohmann::json{{"type", "epoch"},
                          {"step", r.step},
                          {"epoch", r.epoch},
                          {"train_loss", r.train_loss ? nlohmann::json(*r.train_loss) : nlohmann::json()},
                          {"val_loss", r.val_loss},
                          {"val_accuracy", acc},
                          {"seconds", r.seconds}}
               .dump()
        << '\n';
  }
}

TrainHistory TrainHistory::read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  TrainHistory h;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") == "meta") {
      h.mode = j.at("mode");
      h.best_epoch = j.at("best_epoch").get<std::vector<int>>();
      h.first_batch_loss = j.at("first_batch_loss").get<std::vector<double>>();
      h.alphas = j.at("alphas").get<std::vector<double>>();
      continue;
    }
    EpochRecord r;
    r.step = j.at("step");
    r.epoch = j.at("epoch");
    if (!j.at("train_loss").is_null()) r.train_loss = j.at("train_loss").get<double>();
    r.val_loss = j.at("val_loss");
    for (const auto& a : j.at("val_accuracy")) {
      r.val_accuracy.push_back(a.is_null() ? std::optional<double>() : std::optional<double>(a.get<double>()));
    }
    r.seconds = j.value("seconds", 0.0);
    h.records.push_back(std::move(r));
  }
  return h;
}

std::vector<double> inverse_count_alphas(std::span<const int> counts) {
  std::vector<double> a;
  for (int c : counts) a.push_back(c > 0 ? 1.0 / c : 0.0);
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  if (mean > 0)
    for (double& v : a) v /= mean;
  return a;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Batch {
  int max_level = 0;
  std::vector<int> indices;
};

class Trainer {
 public:
  Trainer(Model& model, const Dataset& train, const PartitionedDataset& pds, const Dataset& val,
          const TrainConfig& cfg, const TrainHooks& hooks)
      : model_(model), train_(train), val_(val), cfg_(cfg), hooks_(hooks) {
    if (train.levels() == 0 || val.levels() == 0) throw ValidationError("training data must be relabeled first");
    if (pds.source_size != train.size()) throw ValidationError("partition does not belong to the training set");
    cfg.validate(model.levels());
    map_ = model_level_map(model, train.levels());
    const auto data_ann = pds.annotation_levels();
    ann_.assign(train.size(), -1);
    for (int k = 0; k < train.size(); ++k) {
      for (int l = 0; l < model.levels(); ++l)
        if (data_ann[k] >= map_[l]) ann_[k] = l;
    }
  }

  int annotated(int level) const {
    return static_cast<int>(std::count_if(ann_.begin(), ann_.end(), [&](int a) { return a >= level; }));
  }

  std::vector<int> eligible() const {
    std::vector<int> out;
    for (int k = 0; k < static_cast<int>(ann_.size()); ++k)
      if (ann_[k] >= 0) out.push_back(k);
    return out;
  }

  // Validation loss sum_j alpha_j * mean CE_j and per-level accuracy.
  std::pair<double, std::vector<std::optional<double>>> validate(int max_level, std::span<const double> alphas) {
    auto inf = run_inference(model_, val_, max_level);
    double loss = 0;
    std::vector<std::optional<double>> acc(model_.levels());
    for (int l = 0; l <= max_level; ++l) {
      const auto& y = val_.level_labels[map_[l]];
      const auto ce = cross_entropy(inf.scores[l], y, false, nullptr);
      loss += alphas[l] * std::accumulate(ce.begin(), ce.end(), 0.0) / static_cast<double>(ce.size());
      const auto pred = argmax_real(inf.scores[l]);
      int correct = 0;
      for (std::size_t k = 0; k < y.size(); ++k) correct += pred[k] == y[k];
      acc[l] = 100.0 * correct / static_cast<double>(y.size());
    }
    return {loss, acc};
  }

  std::vector<Batch> chunk(std::vector<int> idx, int max_level, std::mt19937_64& rng) const {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<Batch> out;
    const int b = cfg_.batch_size;
    for (std::size_t first = 0; first < idx.size(); first += b) {
      const std::size_t last = std::min(idx.size(), first + b);
      // A tiny trailing batch gives poor batch-norm statistics; fold it in.
      if (!out.empty() && static_cast<int>(last - first) < std::max(2, b / 4)) {
        out.back().indices.insert(out.back().indices.end(), idx.begin() + first, idx.begin() + last);
        break;
      }
      out.push_back({max_level, {idx.begin() + first, idx.begin() + last}});
    }
    return out;
  }

  double run_epoch(const std::vector<Batch>& batches, std::span<const double> alphas, nn::Adam& adam,
                   const std::vector<nn::Parameter*>& trainable, int step, int epoch, TrainHistory& h) {
    double sum = 0;
    long long samples = 0;
    auto all = model_.parameters();
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      std::vector<std::vector<int>> labels(batch.max_level + 1, std::vector<int>(batch.indices.size(), -1));
      for (std::size_t n = 0; n < batch.indices.size(); ++n) {
        const int k = batch.indices[n];
        for (int l = 0; l <= std::min(ann_[k], batch.max_level); ++l) labels[l][n] = train_.level_labels[map_[l]][k];
      }
      if (hooks_.on_batch) {
        BatchInfo info{step, epoch, static_cast<int>(b), batch.max_level, &batch.indices, &labels, alphas};
        hooks_.on_batch(info, model_);
      }
      nn::zero_grad(all);
      auto out = model_.forward(gather_inputs(train_, batch.indices), nn::Mode::train, batch.max_level);
      auto loss = batch_loss(out.scores, labels, alphas, true);
      if (epoch == 1 && b == 0) h.first_batch_loss.push_back(loss.total);
      const Scalar scale = Scalar(1) / static_cast<Scalar>(batch.indices.size());
      for (auto& g : loss.grads) g *= scale;
      model_.backward(loss.grads, false);
      adam.step(trainable);
      sum += loss.total;
      samples += static_cast<long long>(batch.indices.size());
    }
    return sum / static_cast<double>(std::max<long long>(1, samples));
  }

  // One optimization phase with early stopping; restores the best weights.
  void phase(int step, int val_level, std::span<const double> alphas, double lr,
             const std::vector<nn::Parameter*>& trainable, const std::function<std::vector<Batch>(std::mt19937_64&)>& make,
             TrainHistory& h) {
    nn::Adam adam(lr);
    auto t0 = Clock::now();
    auto [best, acc0] = validate(val_level, alphas);
    h.records.push_back({step, 0, std::nullopt, best, acc0, 0.0});
    auto best_state = model_.state();
    int best_epoch = 0, wait = 0;
    for (int epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
      std::mt19937_64 rng(cfg_.seed * 1000003ULL + static_cast<std::uint64_t>(step) * 1009ULL + epoch);
      const auto batches = make(rng);
      const double train_loss = run_epoch(batches, alphas, adam, trainable, step, epoch, h);
      auto [val, acc] = validate(val_level, alphas);
      const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
      h.records.push_back({step, epoch, train_loss, val, acc, secs});
      spdlog::info("step {} epoch {}: train {:.4f} val {:.4f} acc[{}] {:.2f}% ({:.0f}s)", step, epoch, train_loss, val,
                   val_level, acc[val_level].value_or(0.0), secs);
      if (val < best - cfg_.min_delta) {
        best = val;
        best_state = model_.state();
        best_epoch = epoch;
        wait = 0;
      } else if (++wait >= cfg_.patience) {
        break;
      }
    }
    model_.restore(best_state);
    h.best_epoch.push_back(best_epoch);
  }

  Model& model_;
  const Dataset& train_;
  const Dataset& val_;
  const TrainConfig& cfg_;
  const TrainHooks& hooks_;
  std::vector<int> map_;
  std::vector<int> ann_;
};

}  // namespace

TrainHistory train_cascaded(Model& model, const Dataset& train, const PartitionedDataset& pds,
                            const Dataset& validation, const TrainConfig& cfg, const TrainHooks& hooks) {
  Trainer t(model, train, pds, validation, cfg, hooks);
  TrainHistory h;
  h.mode = "cascaded";
  h.alphas.assign(cfg.alphas.begin(), cfg.alphas.begin() + model.levels());
  for (int i = 0; i < model.levels(); ++i) {
    if (t.annotated(i) == 0) throw ValidationError("no training samples annotated at level " + std::to_string(i));
  }
  for (int i = 0; i < model.levels(); ++i) {
    const auto trainable = cfg.freeze_coarse ? model.parameters_at(i) : model.parameters_up_to(i);
    // Bucket samples by the deepest head they need in this step.
    std::vector<std::vector<int>> buckets(i + 1);
    for (int k : t.eligible()) buckets[std::min(t.ann_[k], i)].push_back(k);
    auto make = [&](std::mt19937_64& rng) {
      std::vector<Batch> all;
      for (int b = 0; b <= i; ++b) {
        if (buckets[b].empty()) continue;
        auto part = t.chunk(buckets[b], b, rng);
        all.insert(all.end(), part.begin(), part.end());
      }
      std::shuffle(all.begin(), all.end(), rng);
      return all;
    };
    t.phase(i, i, h.alphas, cfg.learning_rates[i], trainable, make, h);
    if (hooks.on_step_end) hooks.on_step_end(i, model);
  }
  model.set_trained(true);
  return h;
}

TrainHistory train_traditional(Model& model, const Dataset& train, const PartitionedDataset& pds,
                               const Dataset& validation, const TrainConfig& cfg, const TrainHooks& hooks) {
  Trainer t(model, train, pds, validation, cfg, hooks);
  TrainHistory h;
  h.mode = "traditional";
  std::vector<int> counts;
  for (int l = 0; l < model.levels(); ++l) {
    counts.push_back(t.annotated(l));
    if (counts.back() == 0) throw ValidationError("no training samples annotated at level " + std::to_string(l));
  }
  h.alphas = inverse_count_alphas(counts);
  const int top = model.levels() - 1;
  const auto pool = t.eligible();
  auto make = [&](std::mt19937_64& rng) { return t.chunk(pool, top, rng); };
  t.phase(0, top, h.alphas, cfg.traditional_rate, model.parameters(), make, h);
  if (hooks.on_step_end) hooks.on_step_end(0, model);
  model.set_trained(true);
  return h;
}

}  // namespace nestcal
