#include "nestcal/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nestcal/error.hpp"
#include "nestcal/inference.hpp"
#include "nestcal/loss.hpp"

namespace nestcal {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Half-sample symmetric reflection: ... b a | a b c | c b ...
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

double population_std(const std::vector<double>& v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

Tensor gather_samples(const Tensor& x, std::span<const int> idx) {
  Tensor out(x.channels, static_cast<int>(idx.size()), x.height, x.width);
  const std::size_t plane = x.plane_size();
  for (int c = 0; c < x.channels; ++c)
    for (std::size_t n = 0; n < idx.size(); ++n)
      std::copy_n(x.plane(c, idx[n]), plane, out.plane(c, static_cast<int>(n)));
  return out;
}

// x + eps_n * sign(grad) per sample n, clipped to [0, 1].
Tensor sign_step(const Tensor& x, const Tensor& grad, std::span<const double> eps) {
  Tensor out = x;
  const std::size_t plane = x.plane_size();
  for (int c = 0; c < x.channels; ++c) {
    for (int n = 0; n < x.batch; ++n) {
      const Scalar e = static_cast<Scalar>(eps[n]);
      Scalar* o = out.plane(c, n);
      const Scalar* g = grad.plane(c, n);
      for (std::size_t p = 0; p < plane; ++p) {
        const Scalar s = g[p] > 0 ? Scalar(1) : (g[p] < 0 ? Scalar(-1) : Scalar(0));
        o[p] = std::clamp(o[p] + e * s, Scalar(0), Scalar(1));
      }
    }
  }
  return out;
}

int resolve_level(const Model& model, int level) {
  if (level < 0) return model.levels() - 1;
  if (level >= model.levels()) throw ValidationError("attack: target level out of range");
  return level;
}

struct FlipSearch {
  std::vector<std::optional<double>> eps;
  Tensor grad;
};

FlipSearch search_flips(Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  cfg.validate();
  const int level = resolve_level(model, cfg.target_level);
  FlipSearch r;
  r.eps.assign(labels.size(), std::nullopt);
  const auto clean = argmax_real(model.forward(x, nn::Mode::eval, level).scores[level]);
  r.grad = input_gradient(model, x, labels, level);
  std::vector<int> alive;
  for (int n = 0; n < x.batch; ++n) {
    if (clean[n] != labels[n]) {
      r.eps[n] = 0.0;
    } else {
      alive.push_back(n);
    }
  }
  for (double e : cfg.epsilon_grid) {
    if (alive.empty() || e > cfg.max_eps * (1 + 1e-12)) break;
    const Tensor xs = gather_samples(x, alive);
    const Tensor gs = gather_samples(r.grad, alive);
    const std::vector<double> eps(alive.size(), e);
    const auto pred = argmax_real(model.forward(sign_step(xs, gs, eps), nn::Mode::eval, level).scores[level]);
    std::vector<int> still;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      if (pred[i] != labels[alive[i]]) {
        r.eps[alive[i]] = e;
      } else {
        still.push_back(alive[i]);
      }
    }
    alive = std::move(still);
  }
  return r;
}

}  // namespace

void DistortionParams::validate() const {
  if (!(S > 0)) throw ValidationError("distortion: S must be > 0");
  if (!(T >= 0)) throw ValidationError("distortion: T must be >= 0");
}

DistortionParams distortion_level(int level, std::uint64_t seed) {
  static constexpr double kT[4] = {0.8, 1.0, 1.3, 1.5};
  if (level < 1 || level > 4) throw ValidationError("distortion level must be 1..4");
  return {1.0, kT[level - 1], seed};
}

std::vector<double> gaussian_filter(std::span<const double> field, int height, int width, double sigma) {
  if (!(sigma > 0)) throw ValidationError("gaussian_filter: sigma must be > 0");
  const int radius = static_cast<int>(4.0 * sigma + 0.5);
  std::vector<double> k(2 * radius + 1);
  double s = 0;
  for (int i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& w : k) w /= s;
  std::vector<double> tmp(field.size()), out(field.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double a = 0;
      for (int i = -radius; i <= radius; ++i) a += k[i + radius] * field[y * width + reflect(x + i, width)];
      tmp[y * width + x] = a;
    }
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double a = 0;
      for (int i = -radius; i <= radius; ++i) a += k[i + radius] * tmp[reflect(y + i, height) * width + x];
      out[y * width + x] = a;
    }
  return out;
}

DisplacementField make_displacement(int height, int width, double S, double T, std::uint64_t seed) {
  DistortionParams{S, T, seed}.validate();
  DisplacementField f;
  f.height = height;
  f.width = width;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  const std::size_t n = static_cast<std::size_t>(height) * width;
  auto draw = [&] {
    std::vector<double> raw(n);
    for (double& x : raw) x = g(rng);
    auto sm = gaussian_filter(raw, height, width, S);
    const double sd = population_std(sm);
    if (!(sd > 1e-12) || T == 0) {
      std::fill(sm.begin(), sm.end(), 0.0);
    } else {
      for (double& x : sm) x *= T / sd;
    }
    return sm;
  };
  f.u = draw();
  f.v = draw();
  return f;
}

std::vector<float> warp_image(std::span<const float> image, int channels, const DisplacementField& f) {
  const int h = f.height, w = f.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  if (image.size() != plane * channels) throw ShapeError("warp_image: image and field sizes differ");
  std::vector<float> out(image.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double sx = std::clamp(x + f.u[i], 0.0, static_cast<double>(w - 1));
      const double sy = std::clamp(y + f.v[i], 0.0, static_cast<double>(h - 1));
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < channels; ++c) {
        const float* p = image.data() + c * plane;
        const double val = (1 - fy) * ((1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1]) +
                           fy * ((1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
        out[c * plane + i] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return out;
}

std::vector<float> turbulence_distort(std::span<const float> image, int channels, int height, int width,
                                      const DistortionParams& p) {
  p.validate();
  if (p.T == 0) return {image.begin(), image.end()};
  return warp_image(image, channels, make_displacement(height, width, p.S, p.T, p.seed));
}

Dataset distort_dataset(const Dataset& ds, const DistortionParams& p) {
  Dataset out = ds;
  for (int k = 0; k < ds.size(); ++k) {
    DistortionParams q = p;
    q.seed = splitmix64(p.seed ^ splitmix64(static_cast<std::uint64_t>(k)));
    const auto img = turbulence_distort(ds.image(k), ds.channels, ds.height, ds.width, q);
    std::copy(img.begin(), img.end(), out.images.begin() + static_cast<std::ptrdiff_t>(k * ds.image_size()));
  }
  return out;
}

std::vector<double> AttackConfig::log_grid(int count, double lo, double hi) {
  if (count < 1 || !(lo > 0) || hi < lo) throw ValidationError("epsilon grid: need count >= 1 and 0 < lo <= hi");
  std::vector<double> g(count);
  for (int i = 0; i < count; ++i) g[i] = count == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / (count - 1));
  return g;
}

AttackConfig AttackConfig::default_grid() {
  AttackConfig c;
  c.epsilon_grid = log_grid(50, 1e-3, 1e-1);
  c.max_eps = 1e-1;
  return c;
}

void AttackConfig::validate() const {
  if (epsilon_grid.empty()) throw ValidationError("attack: empty epsilon grid");
  for (std::size_t i = 0; i < epsilon_grid.size(); ++i) {
    if (!(epsilon_grid[i] > 0)) throw ValidationError("attack: epsilon grid must be positive");
    if (i > 0 && !(epsilon_grid[i] > epsilon_grid[i - 1])) throw ValidationError("attack: epsilon grid must ascend");
  }
}

nlohmann::json AttackConfig::to_json() const {
  return {{"epsilon_grid", epsilon_grid}, {"target_level", target_level}, {"max_eps", max_eps}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c = default_grid();
  if (j.contains("epsilon_grid")) {
    c.epsilon_grid = j.at("epsilon_grid").get<std::vector<double>>();
  } else if (j.contains("grid")) {
    const auto& g = j.at("grid");
    c.epsilon_grid = log_grid(g.at("count"), g.at("lo"), g.at("hi"));
  }
  c.target_level = j.value("target_level", c.target_level);
  c.max_eps = j.value("max_eps", c.epsilon_grid.back());
  c.validate();
  return c;
}

Tensor input_gradient(Model& model, const Tensor& x, std::span<const int> labels, int level) {
  if (!model.trained()) throw ValidationError("attack: model is not trained");
  level = resolve_level(model, level);
  auto out = model.forward(x, nn::Mode::eval, level);
  std::vector<Matrix> grads(level + 1);
  cross_entropy(out.scores[level], labels, false, &grads[level]);
  return model.backward(grads, true);
}

Tensor apply_sign_step(const Tensor& x, const Tensor& grad, double eps) {
  if (!(eps >= 0)) throw ValidationError("fgsm: epsilon must be >= 0");
  if (!x.same_shape(grad)) throw ShapeError("fgsm: gradient shape mismatch");
  const std::vector<double> e(x.batch, eps);
  return sign_step(x, grad, e);
}

Tensor fgsm(Model& model, const Tensor& x, std::span<const int> labels, double eps, int level) {
  if (!(eps >= 0)) throw ValidationError("fgsm: epsilon must be >= 0");
  if (eps == 0) return x;
  return apply_sign_step(x, input_gradient(model, x, labels, level), eps);
}

Tensor FgsmAttack::perturb(Model& model, const Tensor& x, std::span<const int> labels, double eps, int level) {
  return fgsm(model, x, labels, eps, level);
}

std::vector<std::optional<double>> min_eps_to_flip(Model& model, const Tensor& x, std::span<const int> labels,
                                                   const AttackConfig& cfg) {
  return search_flips(model, x, labels, cfg).eps;
}

std::optional<double> eps_at_error_rate(std::span<const std::optional<double>> flips, std::span<const double> grid,
                                        double rate) {
  if (flips.empty()) return std::nullopt;
  for (double e : grid) {
    const auto wrong = std::count_if(flips.begin(), flips.end(), [&](const auto& f) { return f && *f <= e; });
    if (static_cast<double>(wrong) >= rate * static_cast<double>(flips.size())) return e;
  }
  return std::nullopt;
}

SurvivalReport coarse_survival_under_fine_attack(Model& model, const Dataset& ds, const Taxonomy& tax,
                                                 const AttackConfig& cfg, int chunk) {
  if (ds.levels() != tax.levels()) throw ValidationError("survival: dataset must be relabeled with the taxonomy");
  const auto map = model_level_map(model, tax.levels());
  const int fine_head = model.levels() - 1;
  AttackConfig fine_cfg = cfg;
  fine_cfg.target_level = fine_head;
  SurvivalReport rep;
  std::vector<long long> correct(tax.levels(), 0);
  for (int first = 0; first < ds.size(); first += chunk) {
    const int count = std::min(chunk, ds.size() - first);
    std::vector<int> idx(count);
    std::iota(idx.begin(), idx.end(), first);
    const Tensor x = gather_inputs(ds, idx);
    std::vector<int> y(ds.level_labels[tax.fine_level()].begin() + first,
                       ds.level_labels[tax.fine_level()].begin() + first + count);
    const auto search = search_flips(model, x, y, fine_cfg);
    std::vector<int> hit;
    std::vector<double> eps;
    for (int n = 0; n < count; ++n) {
      const auto& e = search.eps[n];
      if (!e) {
        ++rep.never_flipped;
      } else if (*e == 0.0) {
        ++rep.initially_wrong;
      } else {
        hit.push_back(n);
        eps.push_back(*e);
      }
    }
    if (hit.empty()) continue;
    const Tensor adv = sign_step(gather_samples(x, hit), gather_samples(search.grad, hit), eps);
    const auto out = model.forward(adv, nn::Mode::eval);
    std::vector<std::vector<int>> pred(model.levels());
    for (int l = 0; l < model.levels(); ++l) pred[l] = argmax_real(out.scores[l]);
    for (std::size_t i = 0; i < hit.size(); ++i) {
      const int k = first + hit[i];
      const int fine_pred = pred[fine_head][i];
      for (int l = 0; l < tax.levels(); ++l) {
        int label = -1;
        for (int h = 0; h < model.levels(); ++h)
          if (map[h] == l) label = pred[h][i];
        if (label < 0) label = tax.coarsen(fine_pred, map[fine_head], l);
        correct[l] += label == ds.level_labels[l][k];
      }
    }
    rep.flipped += static_cast<int>(hit.size());
  }
  for (int l = 0; l < tax.levels(); ++l) {
    rep.accuracy.push_back(rep.flipped ? 100.0 * correct[l] / rep.flipped : 0.0);
  }
  return rep;
}

}  // namespace nestcal
