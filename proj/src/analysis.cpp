#include "nestcal/analysis.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "nestcal/error.hpp"
#include "nestcal/inference.hpp"
#include "nestcal/nn/adam.hpp"

namespace nestcal {

void MineConfig::validate() const {
  if (steps < 1) throw ValidationError("mine: steps must be >= 1");
  if (hidden.empty()) throw ValidationError("mine: critic needs a hidden layer");
  for (int w : hidden)
    if (w < 1) throw ValidationError("mine: widths must be >= 1");
  if (batch_size < 2) throw ValidationError("mine: batch size must be >= 2");
  if (!(learning_rate > 0)) throw ValidationError("mine: learning rate must be > 0");
  if (!(ema_decay >= 0 && ema_decay < 1)) throw ValidationError("mine: ema_decay must lie in [0, 1)");
}

nlohmann::json MineConfig::to_json() const {
  return {{"hidden", hidden}, {"steps", steps}, {"learning_rate", learning_rate},
          {"batch_size", batch_size}, {"ema_decay", ema_decay}, {"seed", seed}};
}

MineConfig MineConfig::from_json(const nlohmann::json& j) {
  MineConfig c;
  if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<int>>();
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

namespace {

// Per-row z-scoring; constant rows become zero. Returns false if every row is constant.
bool standardize(Eigen::MatrixXd& m) {
  bool any = false;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mean = m.row(r).mean();
    m.row(r).array() -= mean;
    const double sd = std::sqrt(m.row(r).squaredNorm() / static_cast<double>(m.cols()));
    if (sd > 1e-12) {
      m.row(r) /= sd;
      any = true;
    } else {
      m.row(r).setZero();
    }
  }
  return any;
}

class Critic {
 public:
  Critic(int in, const std::vector<int>& hidden, std::mt19937_64& rng) {
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers_.emplace_back("critic." + std::to_string(i), prev, hidden[i], 0, false, rng);
      prev = hidden[i];
    }
    layers_.emplace_back("critic.out", prev, 1, 0, false, rng);
    acts_.resize(layers_.size());
  }
  Matrix forward(const Matrix& x) {
    Matrix h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) acts_[i] = h = nn::relu(h);
    }
    return h;
  }
  void backward(Matrix g) {
    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
      if (i + 1 < static_cast<int>(layers_.size())) g = nn::relu_backward(g, acts_[i]);
      g = layers_[i].backward(g);
    }
  }
  std::vector<nn::Parameter*> parameters() {
    std::vector<nn::Parameter*> p;
    for (auto& l : layers_) {
      p.push_back(&l.weight());
      p.push_back(&l.bias());
    }
    return p;
  }

 private:
  std::vector<nn::Linear> layers_;
  std::vector<Matrix> acts_;
};

}  // namespace

MineResult mine_estimate(const Eigen::MatrixXd& x_in, const Eigen::MatrixXd& z_in, const MineConfig& cfg) {
  cfg.validate();
  if (x_in.cols() != z_in.cols()) throw ValidationError("mine: x and z need the same sample count");
  if (x_in.cols() < 2) throw ValidationError("mine: need at least two samples");
  MineResult res;
  Eigen::MatrixXd x = x_in, z = z_in;
  if (!standardize(x) || !standardize(z)) {
    spdlog::warn("mine: constant input, estimate set to 0");
    res.degenerate = true;
    res.trace.assign(cfg.steps, 0.0);
    return res;
  }
  const Eigen::Index n = x.cols(), dx = x.rows(), dz = z.rows();
  const int b = static_cast<int>(std::min<Eigen::Index>(cfg.batch_size, n));
  std::mt19937_64 rng(cfg.seed);
  Critic critic(static_cast<int>(dx + dz), cfg.hidden, rng);
  auto params = critic.parameters();
  nn::Adam adam(cfg.learning_rate);
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  std::vector<int> perm(b);
  Matrix input(dx + dz, 2 * b);
  double ema = -1, smooth = 0;
  res.trace.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Eigen::Index> idx(b);
    for (auto& i : idx) i = pick(rng);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < b; ++i) {
      input.col(i).head(dx) = x.col(idx[i]).cast<Scalar>();
      input.col(i).tail(dz) = z.col(idx[i]).cast<Scalar>();
      input.col(b + i).head(dx) = x.col(idx[i]).cast<Scalar>();
      input.col(b + i).tail(dz) = z.col(idx[perm[i]]).cast<Scalar>();
    }
    const Matrix t = critic.forward(input);
    double joint = 0, mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < b; ++i) {
      joint += t(0, i);
      mx = std::max(mx, static_cast<double>(t(0, b + i)));
    }
    joint /= b;
    double sum_exp = 0;
    std::vector<double> e(b);
    for (int i = 0; i < b; ++i) sum_exp += e[i] = std::exp(t(0, b + i) - mx);
    const double mean_exp_shifted = sum_exp / b;
    const double dv = joint - (std::log(mean_exp_shifted) + mx);
    res.trace.push_back(dv);
    smooth = step == 0 ? dv : cfg.ema_decay * smooth + (1 - cfg.ema_decay) * dv;

    // Bias-corrected gradient: the denominator of the log-term gradient is a
    // moving average of E_Q[e^T] instead of the batch mean.
    const double mean_exp = mean_exp_shifted * std::exp(mx);
    ema = ema < 0 ? mean_exp : cfg.ema_decay * ema + (1 - cfg.ema_decay) * mean_exp;
    Matrix g(1, 2 * b);
    for (int i = 0; i < b; ++i) {
      g(0, i) = static_cast<Scalar>(-1.0 / b);
      g(0, b + i) = static_cast<Scalar>(e[i] * std::exp(mx) / (b * ema));
    }
    nn::zero_grad(params);
    critic.backward(g);
    adam.step(params);
  }
  res.estimate = smooth;
  if (res.estimate < 0) {
    spdlog::warn("mine: negative objective {:.4f} clamped to 0", res.estimate);
    res.estimate = 0;
    res.clamped = true;
  }
  return res;
}

std::map<std::string, Eigen::MatrixXd> collect_taps(Model& model, const Dataset& ds, int pool, int chunk) {
  std::map<std::string, Eigen::MatrixXd> out;
  for (int first = 0; first < ds.size(); first += chunk) {
    const int count = std::min(chunk, ds.size() - first);
    std::vector<int> idx(count);
    std::iota(idx.begin(), idx.end(), first);
    const auto r = model.forward(gather_inputs(ds, idx), nn::Mode::eval, -1, true);
    for (const auto& [name, t] : r.taps) {
      const Matrix f = nn::adaptive_avg_pool(t, pool);
      auto& m = out[name];
      if (first == 0) m.resize(f.rows(), ds.size());
      m.middleCols(first, count) = f.cast<double>();
    }
  }
  return out;
}

nlohmann::json MiReport::to_json() const {
  return {{"estimates", estimates}, {"delta1", delta1}, {"delta2", delta2}, {"ratio", ratio()}, {"traces", traces}};
}

MiReport skip_mi_gap(Model& with_skip, Model& without_skip, const Dataset& ds, const MineConfig& cfg, int pool) {
  if (!with_skip.spec().use_skip()) throw ValidationError("skip_mi_gap: first model must use skip connections");
  if (without_skip.spec().use_skip()) throw ValidationError("skip_mi_gap: second model must not use skip connections");
  MiReport rep;
  auto measure = [&](Model& m, const std::string& tag) {
    const auto taps = collect_taps(m, ds, pool);
    for (const char* need : {"F", "G", "H"}) {
      if (!taps.count(need)) throw ValidationError("skip_mi_gap: model '" + tag + "' has no tap " + need);
    }
    double vals[2];
    int i = 0;
    for (const char* other : {"G", "H"}) {
      const auto r = mine_estimate(taps.at("F"), taps.at(other), cfg);
      const std::string key = tag + ":I(F," + other + ")";
      rep.estimates[key] = vals[i++] = r.estimate;
      rep.traces[key] = r.trace;
      spdlog::info("{} = {:.4f} nats", key, r.estimate);
    }
    return vals[0] - vals[1];
  };
  rep.delta1 = measure(with_skip, "skip");
  rep.delta2 = measure(without_skip, "no_skip");
  return rep;
}

void export_embeddings(Model& model, const Dataset& ds, int level, const std::filesystem::path& path) {
  if (!model.trained()) throw ValidationError("export_embeddings: model is not trained");
  if (level < 0 || level >= model.levels()) throw ValidationError("export_embeddings: level out of range");
  const auto inf = run_inference(model, ds, level, true);
  const Matrix& f = inf.bottlenecks[level];
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (Eigen::Index r = 0; r < f.rows(); ++r) out << (r ? "\t" : "") << "f" << r;
  for (int l = 0; l < ds.levels(); ++l) out << "\ty" << l;
  if (ds.levels() == 0) out << "\ty";
  out << '\n';
  char buf[32];
  for (Eigen::Index k = 0; k < f.cols(); ++k) {
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
      std::snprintf(buf, sizeof buf, "%.7g", static_cast<double>(f(r, k)));
      out << (r ? "\t" : "") << buf;
    }
    for (int l = 0; l < ds.levels(); ++l) out << '\t' << ds.level_labels[l][k];
    if (ds.levels() == 0) out << '\t' << ds.fine_labels[k];
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace nestcal
