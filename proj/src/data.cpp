#include "nestcal/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "nestcal/error.hpp"

namespace nestcal {

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("file not found: " + path.string());
  std::vector<std::uint8_t> out;
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::uint8_t buf[1 << 16];
    int got = 0;
    while ((got = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + got);
    const bool failed = got < 0;
    gzclose(f);
    if (failed) throw FormatError("corrupt gzip stream in " + path.string(), out.size());
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  out.assign(std::istreambuf_iterator<char>(in), {});
  return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace

IdxArray load_idx(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 4) throw FormatError("truncated IDX header", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("bad IDX magic", 0);
  if (bytes[2] != 0x08) throw FormatError("unsupported IDX element type", 2);
  const int rank = bytes[3];
  if (rank < 1 || rank > 4) throw FormatError("bad IDX magic (rank " + std::to_string(rank) + ")", 3);
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(rank);
  if (bytes.size() < header) throw FormatError("truncated IDX header", bytes.size());

  IdxArray arr;
  std::size_t count = 1;
  for (int d = 0; d < rank; ++d) {
    const std::uint32_t dim = be32(bytes, 4 + 4 * d);
    arr.dims.push_back(static_cast<int>(dim));
    count *= dim;
  }
  if (bytes.size() < header + count) throw FormatError("truncated IDX payload", bytes.size());
  arr.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                    bytes.begin() + static_cast<std::ptrdiff_t>(header + count));
  return arr;
}

void Dataset::validate() const {
  if (images.size() != image_size() * fine_labels.size()) {
    throw ValidationError("dataset: image count does not match label count");
  }
  for (float v : images) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("dataset: intensities must lie in [0, 1]");
  }
  for (const auto& l : level_labels) {
    if (l.size() != fine_labels.size()) throw ValidationError("dataset: per-level labels have the wrong length");
  }
}

Dataset Dataset::subset(std::span<const int> indices) const {
  Dataset out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.split = split;
  out.level_labels.resize(level_labels.size());
  out.images.reserve(indices.size() * image_size());
  for (int k : indices) {
    if (k < 0 || k >= size()) throw ValidationError("dataset: subset index out of range");
    const auto img = image(k);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.fine_labels.push_back(fine_labels[k]);
    for (std::size_t l = 0; l < level_labels.size(); ++l) out.level_labels[l].push_back(level_labels[l][k]);
  }
  return out;
}

Dataset dataset_from_idx(const IdxArray& images, const IdxArray& labels, std::string split) {
  if (images.dims.size() != 3 && images.dims.size() != 4) throw FormatError("image IDX must have rank 3 or 4", 3);
  if (labels.dims.size() != 1) throw FormatError("label IDX must have rank 1", 3);
  if (images.dims[0] != labels.dims[0]) throw ValidationError("image and label files disagree on sample count");
  Dataset ds;
  ds.split = std::move(split);
  ds.height = images.dims[1];
  ds.width = images.dims[2];
  ds.channels = images.dims.size() == 4 ? images.dims[3] : 1;
  const int n = images.dims[0];
  const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
  ds.images.resize(images.values.size());
  // IDX stores channels last; the dataset keeps them first.
  for (int k = 0; k < n; ++k) {
    for (int c = 0; c < ds.channels; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t src = (k * plane + p) * ds.channels + c;
        ds.images[(static_cast<std::size_t>(k) * ds.channels + c) * plane + p] = images.values[src] / 255.0f;
      }
    }
  }
  ds.fine_labels.assign(labels.values.begin(), labels.values.end());
  return ds;
}

Dataset load_mnist_split(const std::filesystem::path& root, const std::string& split) {
  std::string prefix;
  if (split == "train") {
    prefix = "train";
  } else if (split == "test") {
    prefix = "t10k";
  } else {
    throw ValidationError("unknown split '" + split + "'");
  }
  auto find = [&](const std::string& stem) {
    for (const auto& name : {stem, stem + ".gz"}) {
      if (std::filesystem::exists(root / name)) return root / name;
    }
    throw std::runtime_error("missing " + (root / stem).string() + "[.gz]");
  };
  return dataset_from_idx(load_idx(find(prefix + "-images-idx3-ubyte")), load_idx(find(prefix + "-labels-idx1-ubyte")),
                          split);
}

Dataset relabel(const Dataset& ds, const Taxonomy& tax) {
  Dataset out = ds;
  out.level_labels.assign(tax.levels(), std::vector<int>(ds.fine_labels.size()));
  const int fine_size = tax.alphabet_size(tax.fine_level());
  for (std::size_t k = 0; k < ds.fine_labels.size(); ++k) {
    const int y = ds.fine_labels[k];
    if (y < 0 || y >= fine_size) throw ValidationError("relabel: label " + std::to_string(y) + " is not in the taxonomy");
    for (int l = 0; l < tax.levels(); ++l) out.level_labels[l][k] = tax.coarsen_fine(y, l);
  }
  return out;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, int count, std::uint64_t seed) {
  if (count < 0 || count > ds.size()) throw ValidationError("holdout larger than the dataset");
  std::vector<int> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<int> held(idx.begin(), idx.begin() + count);
  std::vector<int> rest(idx.begin() + count, idx.end());
  std::sort(held.begin(), held.end());
  std::sort(rest.begin(), rest.end());
  auto a = ds.subset(rest);
  auto b = ds.subset(held);
  b.split = "validation";
  return {std::move(a), std::move(b)};
}

std::vector<int> PartitionedDataset::annotation_levels() const {
  std::vector<int> out(source_size, -1);
  for (const auto& s : subsets)
    for (int k : s.indices) out[k] = s.level;
  return out;
}

std::vector<int> PartitionedDataset::annotated_at_least(int level) const {
  std::vector<int> out;
  for (const auto& s : subsets)
    if (s.level >= level) out.insert(out.end(), s.indices.begin(), s.indices.end());
  std::sort(out.begin(), out.end());
  return out;
}

int PartitionedDataset::count_at_least(int level) const {
  int n = 0;
  for (const auto& s : subsets)
    if (s.level >= level) n += static_cast<int>(s.indices.size());
  return n;
}

nlohmann::json PartitionedDataset::to_json() const {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : subsets) subs.push_back({{"level", s.level}, {"size", s.indices.size()}, {"indices", s.indices}});
  return {{"seed", seed}, {"stratified", stratified}, {"source_size", source_size}, {"subsets", subs}};
}

PartitionedDataset PartitionedDataset::from_json(const nlohmann::json& j) {
  PartitionedDataset p;
  p.seed = j.at("seed").get<std::uint64_t>();
  p.stratified = j.value("stratified", false);
  p.source_size = j.at("source_size").get<int>();
  for (const auto& s : j.at("subsets")) p.subsets.push_back({s.at("level").get<int>(), s.at("indices").get<std::vector<int>>()});
  return p;
}

void PartitionedDataset::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump() << '\n';
}

PartitionedDataset PartitionedDataset::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return from_json(nlohmann::json::parse(in));
}

PartitionedDataset partition_dataset(const Dataset& ds, std::span<const int> sizes, std::uint64_t seed,
                                     bool stratified) {
  long long total = 0;
  for (int s : sizes) {
    if (s < 0) throw ValidationError("partition: negative subset size");
    total += s;
  }
  if (total > ds.size()) {
    throw ValidationError("partition: requested " + std::to_string(total) + " samples from a dataset of " +
                          std::to_string(ds.size()));
  }
  PartitionedDataset p;
  p.seed = seed;
  p.stratified = stratified;
  p.source_size = ds.size();
  std::mt19937_64 rng(seed);

  if (!stratified) {
    std::vector<int> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      Subset s{static_cast<int>(i), {idx.begin() + pos, idx.begin() + pos + sizes[i]}};
      std::sort(s.indices.begin(), s.indices.end());
      pos += sizes[i];
      p.subsets.push_back(std::move(s));
    }
    return p;
  }

  // Stratified: per-class pools, quotas by largest remainder.
  const int classes = *std::max_element(ds.fine_labels.begin(), ds.fine_labels.end()) + 1;
  std::vector<std::vector<int>> pools(classes);
  for (int k = 0; k < ds.size(); ++k) pools[ds.fine_labels[k]].push_back(k);
  for (auto& pool : pools) std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<std::size_t> taken(classes, 0);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    std::vector<int> quota(classes);
    std::vector<std::pair<double, int>> rem;
    int assigned = 0;
    for (int c = 0; c < classes; ++c) {
      const double exact = static_cast<double>(sizes[i]) * pools[c].size() / ds.size();
      quota[c] = std::min(static_cast<int>(exact), static_cast<int>(pools[c].size() - taken[c]));
      assigned += quota[c];
      rem.emplace_back(exact - quota[c], c);
    }
    std::sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    for (std::size_t r = 0; assigned < sizes[i]; r = (r + 1) % rem.size()) {
      const int c = rem[r].second;
      if (taken[c] + quota[c] < pools[c].size()) {
        ++quota[c];
        ++assigned;
      }
    }
    Subset s{static_cast<int>(i), {}};
    for (int c = 0; c < classes; ++c) {
      s.indices.insert(s.indices.end(), pools[c].begin() + taken[c], pools[c].begin() + taken[c] + quota[c]);
      taken[c] += quota[c];
    }
    std::sort(s.indices.begin(), s.indices.end());
    p.subsets.push_back(std::move(s));
  }
  return p;
}

std::vector<std::vector<int>> visible_labels(const Dataset& relabeled, const PartitionedDataset& pds) {
  if (relabeled.levels() == 0) throw ValidationError("visible_labels: dataset has no per-level labels");
  if (pds.source_size != relabeled.size()) throw ValidationError("visible_labels: partition belongs to another dataset");
  const auto ann = pds.annotation_levels();
  std::vector<std::vector<int>> out(relabeled.levels(), std::vector<int>(relabeled.size(), -1));
  for (int k = 0; k < relabeled.size(); ++k) {
    for (int l = 0; l <= std::min(ann[k], relabeled.levels() - 1); ++l) out[l][k] = relabeled.level_labels[l][k];
  }
  return out;
}

}  // namespace nestcal
