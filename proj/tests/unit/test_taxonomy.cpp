#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "nestcal/error.hpp"
#include "nestcal/experiment.hpp"
#include "nestcal/taxonomy.hpp"

using namespace nestcal;

namespace {

Taxonomy mnist() { return Taxonomy::load(resolve_resource("data/taxonomies/mnist.json")); }

// Oracle: enumerate every assignment with the requested group sizes, keep the
// minimum mass, break ties on the canonical (first-occurrence) labeling.
std::vector<int> brute_force(const ConfusionMatrix& m, const std::vector<int>& sizes) {
  const int n = m.classes();
  const int g = static_cast<int>(sizes.size());
  std::vector<int> assign(n, 0), best;
  double best_mass = std::numeric_limits<double>::infinity();
  auto canonical = [&](std::vector<int> a) {
    std::vector<int> map(g, -1);
    int next = 0;
    for (int& x : a) {
      if (map[x] < 0) map[x] = next++;
      x = map[x];
    }
    return a;
  };
  long long total = 1;
  for (int i = 0; i < n; ++i) total *= g;
  for (long long code = 0; code < total; ++code) {
    long long c = code;
    std::vector<int> count(g, 0);
    for (int i = 0; i < n; ++i) {
      assign[i] = static_cast<int>(c % g);
      c /= g;
      ++count[assign[i]];
    }
    auto sorted_count = count;
    auto want = sizes;
    std::sort(sorted_count.begin(), sorted_count.end());
    std::sort(want.begin(), want.end());
    if (sorted_count != want) continue;
    const auto canon = canonical(assign);
    const double mass = offdiag_block_mass(m, canon);
    if (mass < best_mass - 1e-12 || (std::abs(mass - best_mass) <= 1e-12 && canon < best)) {
      best_mass = mass;
      best = canon;
    }
  }
  return best;
}

Eigen::MatrixXd random_confusion(int n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, 20);
  Eigen::MatrixXd m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = i == j ? 200 : d(rng);
  return m;
}

}  // namespace

TEST_CASE("entropy of simple distributions") {
  CHECK(entropy({0, {0.25, 0.25, 0.25, 0.25}}) == doctest::Approx(2.0));
  CHECK(entropy({0, {1.0, 0.0, 0.0}}) == doctest::Approx(0.0));
  CHECK(entropy({0, {0.5, 0.25, 0.25}}) == doctest::Approx(1.5));
  CHECK_THROWS_AS(entropy({0, {0.5, 0.6}}), ValidationError);
  CHECK_THROWS_AS(entropy({0, {1.2, -0.2}}), ValidationError);
}

TEST_CASE("conditional entropy") {
  Eigen::MatrixXd indep(2, 2);
  indep << 0.25, 0.25, 0.25, 0.25;
  CHECK(conditional_entropy(indep) == doctest::Approx(1.0));

  Eigen::MatrixXd corr(2, 2);
  corr << 0.4, 0.1, 0.1, 0.4;
  CHECK(conditional_entropy(corr) == doctest::Approx(0.7219280948873623).epsilon(1e-12));

  // Fine given its own coarsening: rows fine, columns coarse.
  const auto tax = mnist();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(10);
    for (auto& x : p) x = u(rng);
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (auto& x : p) x /= s;
    for (int level = 0; level < 2; ++level) {
      Eigen::MatrixXd joint = Eigen::MatrixXd::Zero(10, tax.alphabet_size(level));
      std::vector<double> coarse(tax.alphabet_size(level), 0.0);
      for (int q = 0; q < 10; ++q) {
        joint(q, tax.coarsen_fine(q, level)) = p[q];
        coarse[tax.coarsen_fine(q, level)] += p[q];
      }
      const double hf = entropy({2, p}), hc = entropy({level, coarse});
      CHECK(conditional_entropy(joint) == doctest::Approx(hf - hc).epsilon(1e-12));
      CHECK(hc <= hf + 1e-12);
      // Coarse given fine is zero: the coarsening is deterministic.
      CHECK(conditional_entropy(joint.transpose()) == doctest::Approx(0.0));
    }
  }
}

TEST_CASE("strict nestedness") {
  const auto tax = mnist();
  const std::vector<double> uniform(10, 1.0);
  for (const auto& r : check_strict_nestedness(tax, uniform)) CHECK(r.strict);

  // Every coarse node has a single child: no information gained at level 1.
  Taxonomy chain({2, 2}, {{}, {0, 1}});
  const auto rep = check_strict_nestedness(chain, std::vector<double>{1, 1});
  REQUIRE(rep.size() == 1);
  CHECK_FALSE(rep[0].strict);

  // Two coarse nodes with two equiprobable children each.
  Taxonomy two({2, 4}, {{}, {0, 0, 1, 1}});
  const auto r2 = check_strict_nestedness(two, std::vector<double>{1, 1, 1, 1});
  CHECK(r2[0].entropy == doctest::Approx(2.0));
  CHECK(r2[0].conditional_entropy == doctest::Approx(1.0));
  CHECK(r2[0].strict);
}

TEST_CASE("coarsen through the bundled MNIST taxonomy") {
  const auto tax = mnist();
  CHECK(tax.alphabet_sizes() == std::vector<int>{2, 4, 10});
  CHECK(tax.coarsen_fine(8, 1) == tax.coarsen_fine(3, 1));
  CHECK(tax.children(1, tax.coarsen_fine(8, 1)) == std::vector<int>{3, 8});
  for (int q = 0; q < 10; ++q) {
    CHECK(tax.coarsen(q, 2, 2) == q);
    CHECK(tax.coarsen_fine(q, 0) == tax.parent(1, tax.parent(2, q)));
    CHECK(tax.coarsen_fine(q, 0) == tax.coarsen(tax.coarsen_fine(q, 1), 1, 0));
  }
  for (const char* name : {"fmnist", "cifar10"}) {
    const auto t = Taxonomy::load(resolve_resource(std::string("data/taxonomies/") + name + ".json"));
    CHECK(t.alphabet_sizes() == std::vector<int>{2, 4, 10});
  }
}

TEST_CASE("taxonomy validation and JSON round trip") {
  CHECK_THROWS_AS(Taxonomy({2, 4}, {{}, {0, 0, 0, 0}}), ValidationError);  // coarse node 1 has no child
  CHECK_THROWS_AS(Taxonomy({4, 2}, {{}, {0, 1}}), ValidationError);        // sizes decrease
  CHECK_THROWS_AS(Taxonomy({2, 3}, {{}, {0, 1, 2}}), ValidationError);     // parent out of range
  const auto tax = mnist();
  CHECK(Taxonomy::from_json(tax.to_json()) == tax);
  CHECK(Taxonomy::flat(5).levels() == 1);
}

TEST_CASE("off-diagonal block mass") {
  ConfusionMatrix id(Eigen::MatrixXd::Identity(4, 4));
  CHECK(offdiag_block_mass(id, std::vector<int>{0, 0, 1, 1}) == 0.0);
  ConfusionMatrix ones(Eigen::MatrixXd::Ones(4, 4));
  CHECK(offdiag_block_mass(ones, std::vector<int>{0, 0, 1, 1}) == doctest::Approx(16.0));

  // Invariant under relabeling the groups.
  std::mt19937_64 rng(9);
  ConfusionMatrix m(random_confusion(8, rng));
  const std::vector<int> a{0, 0, 1, 1, 2, 2, 3, 3}, b{3, 3, 2, 2, 0, 0, 1, 1};
  CHECK(offdiag_block_mass(m, a) == doctest::Approx(offdiag_block_mass(m, b)));
}

TEST_CASE("partition search matches exhaustive enumeration") {
  // Two 5-class blocks hidden under a permutation.
  Eigen::MatrixXd blocks = Eigen::MatrixXd::Zero(10, 10);
  const std::vector<int> g{0, 1, 0, 1, 1, 0, 0, 1, 1, 0};
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) blocks(i, j) = g[i] == g[j] ? 5.0 + i + j : 0.0;
  const auto found = best_partition(ConfusionMatrix(blocks), {5, 5});
  CHECK(found == g);

  // Identity: every balanced split ties; the lexicographically smallest wins.
  const auto tie = best_partition(ConfusionMatrix(Eigen::MatrixXd::Identity(6, 6)), {3, 3});
  CHECK(tie == std::vector<int>{0, 0, 0, 1, 1, 1});

  std::mt19937_64 rng(42);
  for (int n : {6, 8, 9}) {
    for (int trial = 0; trial < 3; ++trial) {
      ConfusionMatrix m(random_confusion(n, rng));
      std::vector<int> sizes = n == 9 ? std::vector<int>{3, 3, 3} : std::vector<int>{n / 2, n / 2};
      CAPTURE(n);
      CHECK(best_partition(m, sizes) == brute_force(m, sizes));
    }
  }
}

TEST_CASE("local search beyond the exhaustive limit") {
  // Sixteen classes in four clear blocks; the heuristic must find them.
  Eigen::MatrixXd m = Eigen::MatrixXd::Constant(16, 16, 1.0);
  std::vector<int> truth(16);
  for (int i = 0; i < 16; ++i) truth[i] = (i * 7) % 4;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j)
      if (truth[i] == truth[j]) m(i, j) = 50;
  const auto found = best_partition(ConfusionMatrix(m), {4, 4, 4, 4});
  const double best = offdiag_block_mass(ConfusionMatrix(m), truth);
  CHECK(offdiag_block_mass(ConfusionMatrix(m), found) == doctest::Approx(best));
}

TEST_CASE("group count checks") {
  ConfusionMatrix m(Eigen::MatrixXd::Identity(4, 4));
  CHECK_THROWS_AS(build_taxonomy_from_confusion(m, {5, 4}), ValidationError);
  CHECK_THROWS_AS(best_partition(m, {3, 3}), ValidationError);
  PartitionSearchOptions spread;
  spread.remainder = RemainderPolicy::spread;
  CHECK_THROWS_AS(build_taxonomy_from_confusion(ConfusionMatrix(Eigen::MatrixXd::Identity(5, 5)), {2, 5}),
                  ValidationError);
  const auto t = build_taxonomy_from_confusion(ConfusionMatrix(Eigen::MatrixXd::Identity(5, 5)), {2, 5}, spread);
  CHECK(t.children(0, 0).size() == 3);
  CHECK(t.children(0, 1).size() == 2);
}

TEST_CASE("taxonomy from a confusion matrix is nested and keeps class ids") {
  Eigen::MatrixXd m = Eigen::MatrixXd::Constant(8, 8, 1.0);
  // pairs {0,5} {1,2} {3,7} {4,6}; pair groups {0,5,1,2} and {3,7,4,6}
  auto link = [&](int a, int b, double w) { m(a, b) = m(b, a) = w; };
  link(0, 5, 40); link(1, 2, 40); link(3, 7, 40); link(4, 6, 40);
  for (int a : {0, 5})
    for (int b : {1, 2}) link(a, b, 10);
  for (int a : {3, 7})
    for (int b : {4, 6}) link(a, b, 10);
  const auto tax = build_taxonomy_from_confusion(ConfusionMatrix(m), {2, 4, 8});
  CHECK(tax.alphabet_sizes() == std::vector<int>{2, 4, 8});
  CHECK(tax.parent(2, 0) == tax.parent(2, 5));
  CHECK(tax.parent(2, 1) == tax.parent(2, 2));
  CHECK(tax.parent(2, 3) == tax.parent(2, 7));
  CHECK(tax.coarsen_fine(0, 0) == tax.coarsen_fine(2, 0));
  CHECK(tax.coarsen_fine(3, 0) == tax.coarsen_fine(6, 0));
  CHECK(tax.coarsen_fine(0, 0) != tax.coarsen_fine(3, 0));
}
