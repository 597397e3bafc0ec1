#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "nestcal/data.hpp"
#include "nestcal/error.hpp"
#include "nestcal/experiment.hpp"

using namespace nestcal;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "nestcal-test-data";
  fs::create_directories(dir);
  return dir / name;
}

void be32(std::ofstream& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.put(static_cast<char>((v >> s) & 0xff));
}

Dataset toy(int n, int classes) {
  Dataset ds;
  ds.height = ds.width = 2;
  for (int k = 0; k < n; ++k) {
    for (int p = 0; p < 4; ++p) ds.images.push_back(static_cast<float>(k % 7) / 7.0f);
    ds.fine_labels.push_back(k % classes);
  }
  return ds;
}

fs::path subset_root() { return resolve_resource("data/mnist-subset"); }

}  // namespace

TEST_CASE("IDX decoding") {
  const auto path = scratch("small-idx3-ubyte");
  {
    std::ofstream out(path, std::ios::binary);
    be32(out, 0x00000803);
    be32(out, 3);
    be32(out, 2);
    be32(out, 2);
    for (int i = 0; i < 12; ++i) out.put(static_cast<char>(i * 20));
  }
  const auto arr = load_idx(path);
  CHECK(arr.dims == std::vector<int>{3, 2, 2});
  CHECK(arr.values.size() == 12);
  CHECK(arr.values[11] == 220);

  const auto bad = scratch("bad-idx");
  {
    std::ofstream out(bad, std::ios::binary);
    be32(out, 0);
    be32(out, 1);
  }
  CHECK_THROWS_AS(load_idx(bad), FormatError);

  const auto cut = scratch("cut-idx1");
  {
    std::ofstream out(cut, std::ios::binary);
    be32(out, 0x00000801);
    be32(out, 10);
    out.put(1);
  }
  try {
    load_idx(cut);
    FAIL("truncated file accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 9);
  }
}

TEST_CASE("bundled MNIST subset loads from gzip") {
  const auto train = load_mnist_split(subset_root(), "train");
  const auto test = load_mnist_split(subset_root(), "test");
  CHECK(train.size() == 8000);
  CHECK(test.size() == 2000);
  CHECK(train.height == 28);
  CHECK(train.width == 28);
  CHECK(train.channels == 1);
  for (float v : test.images) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
  std::set<int> classes(train.fine_labels.begin(), train.fine_labels.end());
  CHECK(classes.size() == 10);
}

TEST_CASE("relabel") {
  const auto tax = Taxonomy::load(resolve_resource("data/taxonomies/mnist.json"));
  auto ds = toy(20, 10);
  const auto r = relabel(ds, tax);
  REQUIRE(r.levels() == 3);
  for (int k = 0; k < r.size(); ++k) {
    CHECK(r.level_labels[2][k] == r.fine_labels[k]);
    CHECK(r.level_labels[1][k] == tax.coarsen_fine(r.fine_labels[k], 1));
    CHECK(r.level_labels[0][k] == tax.coarsen_fine(r.fine_labels[k], 0));
  }
  const int eight = 8;
  const auto r8 = r.subset(std::vector<int>{eight});
  CHECK(tax.children(1, r8.level_labels[1][0]) == std::vector<int>{3, 8});

  const auto flat = relabel(ds, Taxonomy::flat(10));
  CHECK(flat.level_labels[0] == ds.fine_labels);
  CHECK(relabel(toy(0, 10), tax).size() == 0);
}

TEST_CASE("partition_dataset") {
  const auto ds = toy(1000, 10);
  const std::vector<int> sizes{100, 200, 300};
  const auto p = partition_dataset(ds, sizes, 5);
  std::set<int> seen;
  for (int i = 0; i < 3; ++i) {
    CHECK(p.subsets[i].level == i);
    CHECK(static_cast<int>(p.subsets[i].indices.size()) == sizes[i]);
    for (int k : p.subsets[i].indices) CHECK(seen.insert(k).second);
  }
  CHECK(partition_dataset(ds, sizes, 5).to_json() == p.to_json());
  CHECK(partition_dataset(ds, sizes, 6).to_json() != p.to_json());
  CHECK(p.count_at_least(0) == 600);
  CHECK(p.count_at_least(2) == 300);
  CHECK(PartitionedDataset::from_json(p.to_json()).to_json() == p.to_json());
  CHECK_THROWS_AS(partition_dataset(ds, std::vector<int>{600, 600}, 1), ValidationError);

  const auto fine_only = partition_dataset(ds, std::vector<int>{0, 0, 400}, 1);
  CHECK(fine_only.count_at_least(0) == 400);
  CHECK(fine_only.count_at_least(2) == 400);
}

TEST_CASE("visible labels expose levels 0..i for subset i") {
  const auto tax = Taxonomy::load(resolve_resource("data/taxonomies/mnist.json"));
  const auto ds = relabel(toy(300, 10), tax);
  const auto p = partition_dataset(ds, std::vector<int>{50, 50, 50}, 2);
  const auto vis = visible_labels(ds, p);
  const auto ann = p.annotation_levels();
  for (int k = 0; k < ds.size(); ++k) {
    for (int l = 0; l < 3; ++l) {
      if (l <= ann[k]) {
        CHECK(vis[l][k] == ds.level_labels[l][k]);
      } else {
        CHECK(vis[l][k] == -1);
      }
    }
  }
}

TEST_CASE("class proportions of a partition follow the source") {
  const auto ds = load_mnist_split(subset_root(), "train");
  std::vector<double> source(10, 0.0);
  for (int y : ds.fine_labels) source[y] += 1.0 / ds.size();
  for (bool stratified : {false, true}) {
    const auto p = partition_dataset(ds, std::vector<int>{2000, 2000, 2000}, 17, stratified);
    for (const auto& s : p.subsets) {
      std::vector<double> counts(10, 0.0);
      for (int k : s.indices) counts[ds.fine_labels[k]] += 1;
      const double n = static_cast<double>(s.indices.size());
      for (int c = 0; c < 10; ++c) {
        // Drawing without replacement from 8000: finite-population binomial bound, 4 sigma.
        const double sd = std::sqrt(source[c] * (1 - source[c]) / n * (8000 - n) / 7999);
        CAPTURE(c);
        CHECK(std::abs(counts[c] / n - source[c]) <= (stratified ? 1.0 / n + 1e-12 : 4 * sd));
      }
    }
  }
}

TEST_CASE("split_holdout") {
  const auto ds = toy(100, 10);
  const auto [rest, held] = split_holdout(ds, 30, 4);
  CHECK(rest.size() == 70);
  CHECK(held.size() == 30);
  const auto [rest2, held2] = split_holdout(ds, 30, 4);
  CHECK(held2.fine_labels == held.fine_labels);
  CHECK(held2.images == held.images);
}
