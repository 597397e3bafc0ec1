#include "nestcal/calibration.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "nestcal/error.hpp"
#include "nestcal/inference.hpp"
#include "nestcal/loss.hpp"
#include "nestcal/nn/adam.hpp"

namespace nestcal {

double hypersphere_area(int s) {
  if (s < 1) throw ValidationError("hypersphere_area: dimension must be >= 1");
  const double h = 0.5 * s;
  return 2.0 * std::exp(h * std::log(std::numbers::pi) - std::lgamma(h));
}

Eigen::MatrixXd sample_rejection(int s, int n, std::uint64_t seed) {
  if (s < 1 || n < 0) throw ValidationError("sample_rejection: need s >= 1 and n >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::MatrixXd out(s, n);
  for (int k = 0; k < n; ++k) {
    double norm = 0;
    do {
      for (int i = 0; i < s; ++i) out(i, k) = g(rng);
      norm = out.col(k).norm();
    } while (norm < 1e-12);
    out.col(k) /= norm;
  }
  return out;
}

void RejectionConfig::validate() const {
  if (!(density_constant > 0)) throw ValidationError("rejection: density constant must be > 0");
  if (!(cap_factor >= 0)) throw ValidationError("rejection: cap factor must be >= 0");
  if (!(finetune_rate > 0)) throw ValidationError("rejection: finetune rate must be > 0");
  if (epochs < 0 || batch_size < 1) throw ValidationError("rejection: bad epochs or batch size");
}

nlohmann::json RejectionConfig::to_json() const {
  return {{"density_constant", density_constant}, {"cap_factor", cap_factor}, {"finetune_rate", finetune_rate},
          {"epochs", epochs}, {"batch_size", batch_size}, {"seed", seed}};
}

RejectionConfig RejectionConfig::from_json(const nlohmann::json& j) {
  RejectionConfig c;
  c.density_constant = j.value("density_constant", c.density_constant);
  c.cap_factor = j.value("cap_factor", c.cap_factor);
  c.finetune_rate = j.value("finetune_rate", c.finetune_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

int rejection_count(const RejectionConfig& rc, int count, int s) {
  const double n = std::round(rc.density_constant * count * hypersphere_area(s) / hypersphere_area(2));
  return static_cast<int>(std::min(n, std::floor(rc.cap_factor * count)));
}

RejectionReport fit_rejection_class(Model& model, const Dataset& train, const PartitionedDataset& pds,
                                    const RejectionConfig& rc) {
  rc.validate();
  if (!model.trained()) throw ValidationError("fit_rejection_class: model is not trained");
  const auto map = model_level_map(model, train.levels());
  const auto widths = model.spec().bottleneck_widths();
  RejectionReport rep;
  for (int l = 0; l < model.levels(); ++l) {
    const auto idx = pds.annotated_at_least(map[l]);
    if (idx.empty()) throw ValidationError("fit_rejection_class: no features for level " + std::to_string(l));
    const Dataset part = train.subset(idx);
    const Matrix feats = run_inference(model, part, l, true).bottlenecks[l];
    const std::vector<int>& real_labels = part.level_labels[map[l]];
    const int real = static_cast<int>(idx.size());
    const int synth = rejection_count(rc, real, widths[l]);
    const int reject_slot = model.spec().arities[l];

    Matrix all(feats.rows(), real + synth);
    all.leftCols(real) = feats;
    if (synth > 0) all.rightCols(synth) = sample_rejection(widths[l], synth, rc.seed + 7919ULL * l).cast<Scalar>();
    std::vector<int> labels(real_labels);
    labels.resize(real + synth, reject_slot);

    const auto before = argmax_real(model.head_forward(l, feats));
    auto params = model.head_parameters(l);
    nn::Adam adam(rc.finetune_rate);
    std::mt19937_64 rng(rc.seed * 31 + l);
    std::vector<int> order(all.cols());
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < rc.epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t first = 0; first < order.size(); first += rc.batch_size) {
        const std::size_t last = std::min(order.size(), first + rc.batch_size);
        Matrix xb(all.rows(), static_cast<Eigen::Index>(last - first));
        std::vector<int> yb;
        for (std::size_t n = first; n < last; ++n) {
          xb.col(static_cast<Eigen::Index>(n - first)) = all.col(order[n]);
          yb.push_back(labels[order[n]]);
        }
        nn::zero_grad(params);
        Matrix grad;
        cross_entropy(model.head_forward(l, xb), yb, true, &grad);
        grad /= static_cast<Scalar>(yb.size());
        model.head_backward(l, grad);
        adam.step(params);
      }
    }
    const auto after = argmax_real(model.head_forward(l, feats));
    int kept = 0;
    for (int k = 0; k < real; ++k) kept += before[k] == after[k];
    rep.real_counts.push_back(real);
    rep.synthetic_counts.push_back(synth);
    rep.argmax_kept.push_back(static_cast<double>(kept) / real);
    spdlog::info("rejection head {}: {} real + {} synthetic, argmax kept {:.4f}", l, real, synth,
                 rep.argmax_kept.back());
  }
  return rep;
}

double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, int n_bins) {
  if (confidences.empty()) throw ValidationError("ece: empty input");
  if (confidences.size() != correct.size()) throw ValidationError("ece: length mismatch");
  if (n_bins < 1) throw ValidationError("ece: need at least one bin");
  std::vector<double> conf(n_bins, 0.0), acc(n_bins, 0.0);
  std::vector<long long> count(n_bins, 0);
  for (std::size_t k = 0; k < confidences.size(); ++k) {
    const double c = confidences[k];
    if (!(c >= 0.0 && c <= 1.0)) throw ValidationError("ece: confidences must lie in [0, 1]");
    const int b = std::min(n_bins - 1, static_cast<int>(c * n_bins));
    conf[b] += c;
    acc[b] += correct[k] ? 1.0 : 0.0;
    ++count[b];
  }
  double total = 0;
  for (int b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    total += std::abs(acc[b] - conf[b]);  // = |B| * |acc(B) - conf(B)|
  }
  return total / static_cast<double>(confidences.size());
}

std::vector<double> apply_temperature(std::span<const double> scores, double temperature) {
  if (!(temperature > 0)) throw ValidationError("apply_temperature: T must be > 0");
  if (scores.empty()) throw ValidationError("apply_temperature: empty scores");
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double z = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) z += p[i] = std::exp((scores[i] - mx) / temperature);
  for (double& v : p) v /= z;
  return p;
}

std::vector<double> TemperatureGrid::values() const {
  if (count < 1 || !(lo > 0) || hi < lo) throw ValidationError("temperature grid: need count >= 1 and 0 < lo <= hi");
  std::vector<double> v(count);
  for (int i = 0; i < count; ++i) v[i] = count == 1 ? lo : lo + (hi - lo) * i / (count - 1);
  return v;
}

TemperatureGrid TemperatureGrid::parse(const std::string& text) {
  TemperatureGrid g;
  char c1 = 0, c2 = 0;
  std::istringstream in(text);
  if (!(in >> g.count >> c1 >> g.lo >> c2 >> g.hi) || c1 != ':' || c2 != ':') {
    throw ValidationError("temperature grid must look like 50:1:3");
  }
  g.values();
  return g;
}

namespace {

// Top-class confidence and correctness of softmax(real scores / T).
void confidence_at(const Eigen::MatrixXd& scores, std::span<const int> labels, double t, std::vector<double>& conf,
                   std::vector<std::uint8_t>& ok) {
  const Eigen::Index rows = scores.rows() - 1;
  conf.resize(scores.cols());
  ok.resize(scores.cols());
  for (Eigen::Index n = 0; n < scores.cols(); ++n) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < rows; ++r)
      if (scores(r, n) > scores(best, n)) best = r;
    double z = 0;
    for (Eigen::Index r = 0; r < rows; ++r) z += std::exp((scores(r, n) - scores(best, n)) / t);
    conf[n] = 1.0 / z;
    ok[n] = best == labels[n];
  }
}

}  // namespace

TemperatureFit fit_temperature(const Eigen::MatrixXd& scores, std::span<const int> labels, const TemperatureGrid& grid,
                               int n_bins) {
  if (scores.cols() == 0) throw ValidationError("fit_temperature: empty validation set");
  if (scores.rows() < 2) throw ValidationError("fit_temperature: scores need at least one class and a rejection row");
  if (static_cast<Eigen::Index>(labels.size()) != scores.cols()) throw ValidationError("fit_temperature: label count");
  TemperatureFit fit;
  std::vector<double> conf;
  std::vector<std::uint8_t> ok;
  confidence_at(scores, labels, 1.0, conf, ok);
  fit.ece_before = ece(conf, ok, n_bins);
  double best = std::numeric_limits<double>::infinity();
  for (double t : grid.values()) {
    confidence_at(scores, labels, t, conf, ok);
    const double e = ece(conf, ok, n_bins);
    fit.ece_by_grid.push_back(e);
    if (e < best) {
      best = e;
      fit.temperature = t;
    }
  }
  fit.ece_after = best;
  return fit;
}

std::vector<double> CalibrationState::bin_edges() const {
  std::vector<double> e(bins + 1);
  for (int i = 0; i <= bins; ++i) e[i] = static_cast<double>(i) / bins;
  return e;
}

void CalibrationState::validate() const {
  for (double t : temperatures)
    if (!(t > 0)) throw ValidationError("calibration: temperatures must be > 0");
  for (const auto* v : {&ece_before, &ece_after})
    for (double e : *v)
      if (!(e >= 0 && e <= 1)) throw ValidationError("calibration: ECE outside [0, 1]");
  if (bins < 1) throw ValidationError("calibration: bins must be >= 1");
}

nlohmann::json CalibrationState::to_json() const {
  return {{"temperatures", temperatures},
          {"ece_before", ece_before},
          {"ece_after", ece_after},
          {"bins", bins},
          {"bin_edges", bin_edges()},
          {"rejection",
           {{"real_counts", rejection.real_counts},
            {"synthetic_counts", rejection.synthetic_counts},
            {"argmax_kept", rejection.argmax_kept}}}};
}

CalibrationState CalibrationState::from_json(const nlohmann::json& j) {
  CalibrationState s;
  s.temperatures = j.at("temperatures").get<std::vector<double>>();
  s.ece_before = j.value("ece_before", std::vector<double>{});
  s.ece_after = j.value("ece_after", std::vector<double>{});
  s.bins = j.value("bins", 15);
  if (j.contains("rejection")) {
    const auto& r = j.at("rejection");
    s.rejection.real_counts = r.value("real_counts", std::vector<int>{});
    s.rejection.synthetic_counts = r.value("synthetic_counts", std::vector<int>{});
    s.rejection.argmax_kept = r.value("argmax_kept", std::vector<double>{});
  }
  s.validate();
  return s;
}

CalibrationState CalibrationState::identity(int levels) {
  CalibrationState s;
  s.temperatures.assign(levels, 1.0);
  return s;
}

CalibrationState fit_calibration(Model& model, const Dataset& validation, const TemperatureGrid& grid, int n_bins) {
  const auto map = model_level_map(model, validation.levels());
  const auto inf = run_inference(model, validation);
  CalibrationState s;
  s.bins = n_bins;
  for (int l = 0; l < model.levels(); ++l) {
    const auto fit = fit_temperature(inf.scores[l].cast<double>(), validation.level_labels[map[l]], grid, n_bins);
    s.temperatures.push_back(fit.temperature);
    s.ece_before.push_back(fit.ece_before);
    s.ece_after.push_back(fit.ece_after);
    spdlog::info("temperature head {}: T = {:.3f}, ECE {:.4f} -> {:.4f}", l, fit.temperature, fit.ece_before,
                 fit.ece_after);
  }
  return s;
}

Eigen::MatrixXd calibrated_probabilities(const Matrix& scores, double temperature, Eigen::VectorXd* rejection) {
  if (!(temperature > 0)) throw ValidationError("calibrated_probabilities: T must be > 0");
  const Eigen::Index rows = scores.rows() - 1;
  Eigen::MatrixXd p(rows, scores.cols());
  if (rejection) rejection->resize(scores.cols());
  for (Eigen::Index n = 0; n < scores.cols(); ++n) {
    double mx = scores(0, n);
    for (Eigen::Index r = 1; r <= rows; ++r) mx = std::max(mx, static_cast<double>(scores(r, n)));
    double z_real = 0;
    for (Eigen::Index r = 0; r < rows; ++r) z_real += p(r, n) = std::exp((scores(r, n) - mx) / temperature);
    const double rej = std::exp((scores(rows, n) - mx) / temperature);
    p.col(n) /= z_real;
    if (rejection) (*rejection)(n) = rej / (z_real + rej);
  }
  return p;
}

}  // namespace nestcal
