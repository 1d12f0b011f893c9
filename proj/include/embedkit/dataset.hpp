#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "embedkit/tensor.hpp"

namespace embedkit {

enum class ImbalanceProfile { Uniform, LongTail };

/// Procedural class-template images plus noise. Each class owns a fixed
/// pattern of Gaussian blobs and a grating; every sample adds a per-sample
/// low-frequency field and per-pixel Gaussian noise, both scaled by
/// noise_sigma, so noise_sigma = 0 renders every class member identically.
struct SyntheticDatasetSpec {
  std::string name = "synthetic";
  int num_classes = 8;
  int samples_per_class = 64;       // base count (head class under long-tail)
  std::vector<int> class_counts;    // explicit per-class counts; overrides the profile
  ImbalanceProfile profile = ImbalanceProfile::Uniform;
  double tail_exponent = 1.0;
  int image_size = 32;
  int channels = 1;
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;
};

/// Per-class sample counts. Long-tail: round(base * r^c) with
/// r = (4 / base)^(exponent / (C - 1)), so exponent 1 ends the tail at 4.
std::vector<int> class_sample_counts(const SyntheticDatasetSpec& spec);

enum class SplitKind { Train, Query, Index };

const char* split_name(SplitKind kind);
SplitKind parse_split(const std::string& name);

struct DatasetSplit {
  std::vector<std::uint64_t> ids;
  std::vector<int> labels;
  std::vector<int> sample_indices;  // index of the sample within its class

  Index size() const { return static_cast<Index>(ids.size()); }
};

/// Deterministic dataset with disjoint train/query/index splits. Per class
/// with n samples: max(1, n/8) queries, max(1, n/4) index items, rest train.
class SyntheticDataset {
 public:
  explicit SyntheticDataset(SyntheticDatasetSpec spec);

  const SyntheticDatasetSpec& spec() const { return spec_; }
  const DatasetSplit& split(SplitKind kind) const;
  // Per-class counts in the train split.
  std::vector<Index> train_class_counts() const;

  /// [N,C,R,R] images of a split at any resolution. Rendered on first use.
  Tensor images(SplitKind kind, int resolution) const;
  /// Rows `positions` of a split's images, copied into one batch tensor.
  Tensor batch(SplitKind kind, int resolution, const std::vector<Index>& positions) const;

  /// Seeds the render cache, e.g. with images read from disk.
  void set_images(SplitKind kind, int resolution, Tensor images);

 private:
  SyntheticDatasetSpec spec_;
  std::map<SplitKind, DatasetSplit> splits_;
  mutable std::map<std::pair<SplitKind, int>, Tensor> cache_;
};

/// Renders one sample image ([C,R,R], row-major) of `label`.
std::vector<double> render_sample(const SyntheticDatasetSpec& spec, int label, int sample_index, int resolution);

SyntheticDataset generate_dataset(const SyntheticDatasetSpec& spec);

}  // namespace embedkit
