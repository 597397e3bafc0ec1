#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nestcal/taxonomy.hpp"

namespace nestcal {

/// Decoded IDX payload. Only unsigned-byte payloads (type 0x08) are supported,
/// which covers the MNIST and Fashion-MNIST distributions.
struct IdxArray {
  std::vector<int> dims;
  std::vector<std::uint8_t> values;
};

/// Reads an IDX file; names ending in ".gz" are inflated on the fly.
/// Throws FormatError with the failing byte offset on bad magic or truncation.
IdxArray load_idx(const std::filesystem::path& path);

/// Images are stored sample-major as (n, c, h, w) floats in [0, 1].
struct Dataset {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<float> images;
  std::vector<int> fine_labels;
  /// level_labels[l][k]: label of sample k at level l. Filled by relabel().
  std::vector<std::vector<int>> level_labels;
  std::string split = "train";

  int size() const { return static_cast<int>(fine_labels.size()); }
  std::size_t image_size() const { return static_cast<std::size_t>(channels) * height * width; }
  std::span<const float> image(int k) const { return {images.data() + k * image_size(), image_size()}; }
  int levels() const { return static_cast<int>(level_labels.size()); }

  void validate() const;
  Dataset subset(std::span<const int> indices) const;
};

/// Builds a dataset from an image IDX array (n, h, w) or (n, h, w, c) and a label array.
Dataset dataset_from_idx(const IdxArray& images, const IdxArray& labels, std::string split);

/// Loads `<root>/train-*` or `<root>/t10k-*` files, with or without ".gz".
Dataset load_mnist_split(const std::filesystem::path& root, const std::string& split);

/// Adds per-level labels through `tax`. Fine labels are preserved.
Dataset relabel(const Dataset& ds, const Taxonomy& tax);

/// Randomly holds out `count` samples. Returns {remaining, held_out}.
std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, int count, std::uint64_t seed);

struct Subset {
  int level = 0;  // samples carry labels for levels 0..level
  std::vector<int> indices;
};

struct PartitionedDataset {
  std::vector<Subset> subsets;
  std::uint64_t seed = 0;
  bool stratified = false;
  int source_size = 0;

  int levels() const { return static_cast<int>(subsets.size()); }
  /// Per-sample deepest annotated level, -1 for samples in no subset.
  std::vector<int> annotation_levels() const;
  /// Samples whose labels reach at least `level`.
  std::vector<int> annotated_at_least(int level) const;
  int count_at_least(int level) const;

  nlohmann::json to_json() const;
  static PartitionedDataset from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static PartitionedDataset load(const std::filesystem::path& path);
};

/// Draws disjoint subsets of the given sizes (subset i annotated up to level i)
/// without replacement. With `stratified`, per-class proportions follow the source.
PartitionedDataset partition_dataset(const Dataset& ds, std::span<const int> sizes, std::uint64_t seed,
                                     bool stratified = false);

/// Labels visible to the trainer: visible[l][k] = level_labels[l][k] when
/// sample k is annotated to level >= l, else -1.
std::vector<std::vector<int>> visible_labels(const Dataset& relabeled, const PartitionedDataset& pds);

}  // namespace nestcal
