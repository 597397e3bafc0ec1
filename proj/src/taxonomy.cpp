#include "nestcal/taxonomy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "nestcal/error.hpp"

namespace nestcal {

namespace {

double plogp_sum(std::span<const double> p) {
  double h = 0;
  for (double v : p) {
    if (v > 0) h -= v * std::log2(v);
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Taxonomy

Taxonomy::Taxonomy(std::vector<int> alphabet_sizes, std::vector<std::vector<int>> parents,
                   std::vector<std::vector<std::string>> names)
    : sizes_(std::move(alphabet_sizes)), parents_(std::move(parents)), names_(std::move(names)) {
  if (parents_.empty()) parents_.resize(sizes_.size());
  if (names_.empty()) {
    names_.resize(sizes_.size());
    for (std::size_t l = 0; l < sizes_.size(); ++l) {
      for (int k = 0; k < sizes_[l]; ++k) {
        names_[l].push_back(l + 1 == sizes_.size() ? std::to_string(k) : "L" + std::to_string(l) + "." + std::to_string(k));
      }
    }
  }
  validate();
}

Taxonomy Taxonomy::flat(int classes) { return Taxonomy({classes}, {{}}); }

void Taxonomy::validate() const {
  if (sizes_.empty()) throw ValidationError("taxonomy: needs at least one level");
  if (parents_.size() != sizes_.size() || names_.size() != sizes_.size()) {
    throw ValidationError("taxonomy: levels, parents and names must have the same length");
  }
  for (std::size_t l = 0; l < sizes_.size(); ++l) {
    if (sizes_[l] <= 0) throw ValidationError("taxonomy: alphabet sizes must be positive");
    if (l > 0 && sizes_[l] < sizes_[l - 1]) throw ValidationError("taxonomy: alphabet sizes must be non-decreasing");
    if (static_cast<int>(names_[l].size()) != sizes_[l]) throw ValidationError("taxonomy: wrong number of names at level " + std::to_string(l));
    if (l == 0) {
      if (!parents_[0].empty()) throw ValidationError("taxonomy: the coarsest level has no parents");
      continue;
    }
    if (static_cast<int>(parents_[l].size()) != sizes_[l]) {
      throw ValidationError("taxonomy: parent map at level " + std::to_string(l) + " is not total");
    }
    std::vector<int> child_count(sizes_[l - 1], 0);
    for (int p : parents_[l]) {
      if (p < 0 || p >= sizes_[l - 1]) throw ValidationError("taxonomy: parent index out of range at level " + std::to_string(l));
      ++child_count[p];
    }
    for (int k = 0; k < sizes_[l - 1]; ++k) {
      if (child_count[k] == 0) {
        throw ValidationError("taxonomy: node " + std::to_string(k) + " at level " + std::to_string(l - 1) + " has no child");
      }
    }
  }
}

int Taxonomy::alphabet_size(int level) const {
  if (level < 0 || level >= levels()) throw ValidationError("taxonomy: level out of range");
  return sizes_[level];
}

int Taxonomy::parent(int level, int label) const {
  if (level <= 0 || level >= levels()) throw ValidationError("taxonomy: level has no parent map");
  if (label < 0 || label >= sizes_[level]) throw ValidationError("taxonomy: unknown label " + std::to_string(label));
  return parents_[level][label];
}

std::vector<int> Taxonomy::children(int level, int label) const {
  if (level < 0 || level + 1 >= levels()) throw ValidationError("taxonomy: level has no children");
  std::vector<int> out;
  const auto& p = parents_[level + 1];
  for (int k = 0; k < static_cast<int>(p.size()); ++k) {
    if (p[k] == label) out.push_back(k);
  }
  return out;
}

const std::string& Taxonomy::name(int level, int label) const {
  if (label < 0 || label >= alphabet_size(level)) throw ValidationError("taxonomy: unknown label");
  return names_[level][label];
}

int Taxonomy::coarsen(int label, int from_level, int to_level) const {
  if (from_level < 0 || from_level >= levels() || to_level < 0 || to_level > from_level) {
    throw ValidationError("coarsen: target level must not be finer than the label's level");
  }
  if (label < 0 || label >= sizes_[from_level]) throw ValidationError("coarsen: unknown label " + std::to_string(label));
  for (int l = from_level; l > to_level; --l) label = parents_[l][label];
  return label;
}

std::vector<int> Taxonomy::fine_to_level(int level) const {
  std::vector<int> out(sizes_.back());
  for (int k = 0; k < sizes_.back(); ++k) out[k] = coarsen_fine(k, level);
  return out;
}

nlohmann::json Taxonomy::to_json() const {
  return {{"levels", sizes_}, {"names", names_}, {"parents", parents_}};
}

Taxonomy Taxonomy::from_json(const nlohmann::json& j) {
  try {
    auto sizes = j.at("levels").get<std::vector<int>>();
    auto parents = j.at("parents").get<std::vector<std::vector<int>>>();
    std::vector<std::vector<std::string>> names;
    if (j.contains("names")) names = j.at("names").get<std::vector<std::vector<std::string>>>();
    return Taxonomy(std::move(sizes), std::move(parents), std::move(names));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("taxonomy json: ") + e.what());
  }
}

Taxonomy Taxonomy::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open taxonomy file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("taxonomy file " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void Taxonomy::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write taxonomy file " + path.string());
  out << to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Entropies

void LabelDistribution::validate() const {
  if (probabilities.empty()) throw ValidationError("distribution: empty");
  double total = 0;
  for (double p : probabilities) {
    if (!(p >= 0)) throw ValidationError("distribution: negative or NaN entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("distribution: probabilities sum to " + std::to_string(total));
}

double entropy(const LabelDistribution& dist) {
  dist.validate();
  return plogp_sum(dist.probabilities);
}

double conditional_entropy(const Eigen::MatrixXd& joint) {
  if (joint.size() == 0) throw ValidationError("conditional_entropy: empty joint");
  if ((joint.array() < 0).any() || !joint.allFinite()) throw ValidationError("conditional_entropy: negative entry");
  if (std::abs(joint.sum() - 1.0) > 1e-9) throw ValidationError("conditional_entropy: joint is not normalized");
  // H(R | C) = H(R, C) - H(C)
  std::vector<double> cells(joint.data(), joint.data() + joint.size());
  Eigen::VectorXd col = joint.colwise().sum().transpose();
  std::vector<double> marginal(col.data(), col.data() + col.size());
  return std::max(0.0, plogp_sum(cells) - plogp_sum(marginal));
}

std::vector<LevelNestedness> check_strict_nestedness(const Taxonomy& tax, std::span<const double> fine_counts) {
  if (fine_counts.empty()) throw ValidationError("check_strict_nestedness: empty counts");
  if (static_cast<int>(fine_counts.size()) != tax.alphabet_size(tax.fine_level())) {
    throw ValidationError("check_strict_nestedness: counts must cover the fine alphabet");
  }
  const double total = std::accumulate(fine_counts.begin(), fine_counts.end(), 0.0);
  if (!(total > 0)) throw ValidationError("check_strict_nestedness: counts sum to zero");

  auto level_dist = [&](int level) {
    std::vector<double> p(tax.alphabet_size(level), 0.0);
    for (std::size_t k = 0; k < fine_counts.size(); ++k) {
      p[tax.coarsen_fine(static_cast<int>(k), level)] += fine_counts[k] / total;
    }
    return p;
  };

  std::vector<LevelNestedness> report;
  for (int i = 1; i < tax.levels(); ++i) {
    const auto fine = level_dist(i);
    const auto coarse = level_dist(i - 1);
    LevelNestedness r;
    r.level = i;
    r.entropy = plogp_sum(fine);
    // Y_i determines Y_{i-1}, so H(Y_i | Y_{i-1}) = H(Y_i) - H(Y_{i-1}).
    r.conditional_entropy = std::max(0.0, r.entropy - plogp_sum(coarse));
    // The coarse level must carry information and the finer level must refine it.
    r.strict = r.conditional_entropy < r.entropy - 1e-12 && r.conditional_entropy > 1e-12;
    report.push_back(r);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Confusion-matrix partitioning

ConfusionMatrix::ConfusionMatrix(Eigen::MatrixXd m) : counts(std::move(m)) {
  if (counts.rows() != counts.cols()) throw ValidationError("confusion matrix must be square");
  if (counts.rows() == 0) throw ValidationError("confusion matrix is empty");
  if ((counts.array() < 0).any() || !counts.allFinite()) throw ValidationError("confusion matrix entries must be >= 0");
}

double offdiag_block_mass(const ConfusionMatrix& m, std::span<const int> group_of) {
  const int n = m.classes();
  if (static_cast<int>(group_of.size()) != n) throw ValidationError("offdiag_block_mass: partition does not cover all labels");
  for (int g : group_of) {
    if (g < 0) throw ValidationError("offdiag_block_mass: unassigned label");
  }
  const Eigen::MatrixXd sym = (m.counts + m.counts.transpose()).cwiseAbs();
  double mass = 0;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (group_of[r] != group_of[c]) mass += sym(r, c);
    }
  }
  return mass;
}

namespace {

// Renumbers groups by the order of their smallest member.
std::vector<int> canonical(const std::vector<int>& assign) {
  std::vector<int> remap(assign.size(), -1);
  std::vector<int> out(assign.size());
  int next = 0;
  for (std::size_t i = 0; i < assign.size(); ++i) {
    if (remap[assign[i]] < 0) remap[assign[i]] = next++;
    out[i] = remap[assign[i]];
  }
  return out;
}

class ExhaustiveSearch {
 public:
  ExhaustiveSearch(const Eigen::MatrixXd& sym, std::vector<int> sizes)
      : sym_(sym), n_(static_cast<int>(sym.rows())), target_(std::move(sizes)) {
    std::sort(target_.begin(), target_.end(), std::greater<>());
    max_size_ = target_.front();
    assign_.assign(n_, -1);
  }

  std::vector<int> run() {
    recurse(0, 0.0);
    return best_;
  }

 private:
  bool feasible(const std::vector<int>& block_sizes, int remaining) const {
    // Greedy check: blocks (sorted desc) must fit into target slots (sorted desc).
    std::vector<int> s = block_sizes;
    std::sort(s.begin(), s.end(), std::greater<>());
    int deficit = 0;
    for (std::size_t b = 0; b < target_.size(); ++b) {
      const int have = b < s.size() ? s[b] : 0;
      if (have > target_[b]) return false;
      deficit += target_[b] - have;
    }
    return deficit == remaining;
  }

  void recurse(int i, double cost) {
    if (cost >= best_cost_) return;
    if (i == n_) {
      std::vector<int> s = sizes_;
      std::sort(s.begin(), s.end(), std::greater<>());
      if (s == target_) {
        best_cost_ = cost;
        best_ = assign_;
      }
      return;
    }
    const int blocks = static_cast<int>(sizes_.size());
    for (int b = 0; b <= blocks; ++b) {
      if (b == blocks && blocks == static_cast<int>(target_.size())) break;
      if (b < blocks && sizes_[b] >= max_size_) continue;
      double add = 0;
      for (int j = 0; j < i; ++j) {
        if (assign_[j] != b) add += 2.0 * sym_(i, j);
      }
      if (b == blocks) sizes_.push_back(0);
      ++sizes_[b];
      assign_[i] = b;
      if (feasible(sizes_, n_ - i - 1)) recurse(i + 1, cost + add);
      assign_[i] = -1;
      --sizes_[b];
      if (b == blocks) sizes_.pop_back();
    }
  }

  const Eigen::MatrixXd& sym_;
  int n_;
  std::vector<int> target_;
  int max_size_ = 0;
  std::vector<int> assign_, sizes_, best_;
  double best_cost_ = std::numeric_limits<double>::infinity();
};

double cost_of(const Eigen::MatrixXd& sym, const std::vector<int>& assign) {
  double c = 0;
  for (int r = 0; r < sym.rows(); ++r)
    for (int k = 0; k < sym.cols(); ++k)
      if (assign[r] != assign[k]) c += sym(r, k);
  return c;
}

std::vector<int> local_search(const Eigen::MatrixXd& sym, const std::vector<int>& sizes,
                              const PartitionSearchOptions& opt) {
  const int n = static_cast<int>(sym.rows());
  std::mt19937_64 rng(opt.seed);
  std::vector<int> best;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<int> base;
  for (std::size_t g = 0; g < sizes.size(); ++g) base.insert(base.end(), sizes[g], static_cast<int>(g));
  for (int r = 0; r < std::max(1, opt.restarts); ++r) {
    std::vector<int> assign = base;
    std::shuffle(assign.begin(), assign.end(), rng);
    double cost = cost_of(sym, assign);
    bool improved = true;
    while (improved) {
      improved = false;
      for (int a = 0; a < n; ++a) {
        for (int b = a + 1; b < n; ++b) {
          if (assign[a] == assign[b]) continue;
          // Swapping a and b changes only edges incident to them.
          double delta = 0;
          for (int k = 0; k < n; ++k) {
            if (k == a || k == b) continue;
            const double before_a = assign[k] != assign[a] ? sym(a, k) : 0;
            const double after_a = assign[k] != assign[b] ? sym(a, k) : 0;
            const double before_b = assign[k] != assign[b] ? sym(b, k) : 0;
            const double after_b = assign[k] != assign[a] ? sym(b, k) : 0;
            delta += 2.0 * (after_a - before_a + after_b - before_b);
          }
          if (delta < -1e-12) {
            std::swap(assign[a], assign[b]);
            cost += delta;
            improved = true;
          }
        }
      }
    }
    auto canon = canonical(assign);
    cost = cost_of(sym, canon);
    if (cost < best_cost - 1e-12 || (std::abs(cost - best_cost) <= 1e-12 && canon < best)) {
      best_cost = cost;
      best = canon;
    }
  }
  return best;
}

std::vector<int> split_sizes(int total, int groups, RemainderPolicy policy) {
  if (groups <= 0 || groups > total) {
    throw ValidationError("group count " + std::to_string(groups) + " exceeds class count " + std::to_string(total));
  }
  if (total % groups != 0 && policy == RemainderPolicy::reject) {
    throw ValidationError(std::to_string(total) + " labels do not split evenly into " + std::to_string(groups) +
                          " groups; configure a remainder policy");
  }
  std::vector<int> sizes(groups, total / groups);
  for (int g = 0; g < total % groups; ++g) ++sizes[g];
  return sizes;
}

}  // namespace

std::vector<int> best_partition(const ConfusionMatrix& m, const std::vector<int>& group_sizes,
                                const PartitionSearchOptions& options) {
  const int n = m.classes();
  if (group_sizes.empty()) throw ValidationError("best_partition: no groups requested");
  if (static_cast<int>(group_sizes.size()) > n) throw ValidationError("best_partition: group count exceeds class count");
  int total = 0;
  for (int s : group_sizes) {
    if (s <= 0) throw ValidationError("best_partition: group sizes must be positive");
    total += s;
  }
  if (total != n) throw ValidationError("best_partition: group sizes must sum to the class count");
  const Eigen::MatrixXd sym = (m.counts + m.counts.transpose()).cwiseAbs();
  if (n <= options.exhaustive_limit) return ExhaustiveSearch(sym, group_sizes).run();
  return local_search(sym, group_sizes, options);
}

Taxonomy build_taxonomy_from_confusion(const ConfusionMatrix& m, const std::vector<int>& group_shape,
                                       const PartitionSearchOptions& options) {
  const int n = m.classes();
  if (group_shape.empty()) throw ValidationError("group shape is empty");
  for (std::size_t l = 0; l < group_shape.size(); ++l) {
    if (group_shape[l] > n) {
      throw ValidationError("group count " + std::to_string(group_shape[l]) + " exceeds class count " + std::to_string(n));
    }
    if (group_shape[l] <= 0 || (l > 0 && group_shape[l] < group_shape[l - 1])) {
      throw ValidationError("group counts must be positive and non-decreasing");
    }
  }
  if (group_shape.back() != n) throw ValidationError("the last group count must equal the class count");

  // members[l][g] = fine labels inside group g of level l.
  std::vector<std::vector<std::vector<int>>> members(group_shape.size());
  std::vector<std::vector<int>> parents(group_shape.size());

  auto partition_subset = [&](const std::vector<int>& labels, int groups) {
    const auto sizes = split_sizes(static_cast<int>(labels.size()), groups, options.remainder);
    Eigen::MatrixXd sub(labels.size(), labels.size());
    for (std::size_t r = 0; r < labels.size(); ++r)
      for (std::size_t c = 0; c < labels.size(); ++c) sub(r, c) = m.counts(labels[r], labels[c]);
    const auto assign = best_partition(ConfusionMatrix(sub), sizes, options);
    std::vector<std::vector<int>> out(groups);
    for (std::size_t i = 0; i < labels.size(); ++i) out[assign[i]].push_back(labels[i]);
    return out;
  };

  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  members[0] = partition_subset(all, group_shape[0]);

  for (std::size_t l = 1; l < group_shape.size(); ++l) {
    const auto& up = members[l - 1];
    const int parents_count = static_cast<int>(up.size());
    const auto per_parent = split_sizes(group_shape[l], parents_count, options.remainder);
    for (int p = 0; p < parents_count; ++p) {
      if (per_parent[p] > static_cast<int>(up[p].size())) {
        throw ValidationError("group " + std::to_string(p) + " at level " + std::to_string(l - 1) +
                              " has fewer labels than requested children");
      }
      for (auto& child : partition_subset(up[p], per_parent[p])) {
        members[l].push_back(std::move(child));
        parents[l].push_back(p);
      }
    }
  }

  // The last level is singletons; renumber it so fine labels keep their class ids.
  const std::size_t fine = group_shape.size() - 1;
  std::vector<int> fine_parent(n, -1);
  for (std::size_t g = 0; g < members[fine].size(); ++g) {
    const int label = members[fine][g].front();
    fine_parent[label] = parents[fine].empty() ? 0 : parents[fine][g];
  }
  if (fine == 0) return Taxonomy::flat(n);
  parents[fine] = fine_parent;
  return Taxonomy(group_shape, parents);
}

}  // namespace nestcal
