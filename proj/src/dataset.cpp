#include "embedkit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace embedkit {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243f6a8885a308d3ull;
  for (auto p : parts) h = splitmix(h ^ p);
  return h;
}

struct Blob {
  double cx, cy, sigma, amplitude;
};

struct ClassTemplate {
  std::vector<Blob> blobs;
  double freq, angle, phase;
  std::vector<double> blob_gain, grating_gain;  // per channel
};

ClassTemplate make_template(const SyntheticDatasetSpec& spec, int label) {
  std::mt19937_64 rng(mix({spec.seed, 0x7e3a1, static_cast<std::uint64_t>(label)}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ClassTemplate t;
  for (int k = 0; k < 3; ++k) {
    const double sign = u(rng) < 0.5 ? -1.0 : 1.0;
    t.blobs.push_back(Blob{0.15 + 0.7 * u(rng), 0.15 + 0.7 * u(rng), 0.08 + 0.14 * u(rng), sign * (0.6 + 0.6 * u(rng))});
  }
  t.freq = 1.5 + 2.5 * u(rng);
  t.angle = std::numbers::pi * u(rng);
  t.phase = 2.0 * std::numbers::pi * u(rng);
  for (int ch = 0; ch < spec.channels; ++ch) {
    t.blob_gain.push_back(0.5 + 0.5 * u(rng));
    t.grating_gain.push_back(0.5 * (0.5 + 0.5 * u(rng)));
  }
  return t;
}

}  // namespace

std::vector<int> class_sample_counts(const SyntheticDatasetSpec& spec) {
  if (!spec.class_counts.empty()) {
    if (static_cast<int>(spec.class_counts.size()) != spec.num_classes) {
      throw Error(Errc::InvalidConfig, "class_counts needs one entry per class");
    }
    return spec.class_counts;
  }
  std::vector<int> counts(static_cast<std::size_t>(std::max(spec.num_classes, 0)), spec.samples_per_class);
  if (spec.profile == ImbalanceProfile::LongTail && spec.num_classes > 1) {
    const double r = std::pow(4.0 / spec.samples_per_class, spec.tail_exponent / (spec.num_classes - 1));
    for (int c = 0; c < spec.num_classes; ++c) {
      counts[static_cast<std::size_t>(c)] = static_cast<int>(std::lround(spec.samples_per_class * std::pow(r, c)));
    }
  }
  return counts;
}

const char* split_name(SplitKind kind) {
  switch (kind) {
    case SplitKind::Train: return "train";
    case SplitKind::Query: return "query";
    case SplitKind::Index: return "index";
  }
  return "?";
}

SplitKind parse_split(const std::string& name) {
  if (name == "train") return SplitKind::Train;
  if (name == "query" || name == "queries") return SplitKind::Query;
  if (name == "index") return SplitKind::Index;
  throw Error(Errc::InvalidConfig, "unknown split '" + name + "' (expected train, query or index)");
}

std::vector<double> render_sample(const SyntheticDatasetSpec& spec, int label, int sample_index, int resolution) {
  const ClassTemplate t = make_template(spec, label);
  const double sigma = spec.noise_sigma;

  std::mt19937_64 nuisance_rng(mix({spec.seed, 0x5a3, static_cast<std::uint64_t>(label),
                                    static_cast<std::uint64_t>(sample_index)}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double field_amp = 0.5 * sigma * normal(nuisance_rng);
  const double field_fx = 0.3 + 0.9 * u(nuisance_rng);
  const double field_fy = 0.3 + 0.9 * u(nuisance_rng);
  const double field_phase = 2.0 * std::numbers::pi * u(nuisance_rng);

  std::mt19937_64 pixel_rng(mix({spec.seed, 0x9e1, static_cast<std::uint64_t>(label),
                                 static_cast<std::uint64_t>(sample_index), static_cast<std::uint64_t>(resolution)}));

  const double ca = std::cos(t.angle), sa = std::sin(t.angle);
  std::vector<double> out(static_cast<std::size_t>(spec.channels) * resolution * resolution);
  std::size_t k = 0;
  for (int ch = 0; ch < spec.channels; ++ch) {
    for (int row = 0; row < resolution; ++row) {
      const double y = (row + 0.5) / resolution;
      for (int col = 0; col < resolution; ++col) {
        const double x = (col + 0.5) / resolution;
        double blobs = 0.0;
        for (const Blob& b : t.blobs) {
          const double dx = x - b.cx, dy = y - b.cy;
          blobs += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
        }
        const double grating = std::sin(2.0 * std::numbers::pi * t.freq * (ca * x + sa * y) + t.phase);
        double v = t.blob_gain[static_cast<std::size_t>(ch)] * blobs + t.grating_gain[static_cast<std::size_t>(ch)] * grating;
        if (sigma > 0.0) {
          v += field_amp * std::sin(2.0 * std::numbers::pi * (field_fx * x + field_fy * y) + field_phase);
          v += sigma * normal(pixel_rng);
        }
        out[k++] = v;
      }
    }
  }
  return out;
}

SyntheticDataset::SyntheticDataset(SyntheticDatasetSpec spec) : spec_(std::move(spec)) {
  if (spec_.num_classes < 2) throw Error(Errc::SpecTooSmall, "need at least 2 classes");
  if (spec_.image_size < 1 || spec_.channels < 1 || spec_.noise_sigma < 0.0) {
    throw Error(Errc::InvalidConfig, "image_size and channels must be positive, noise_sigma non-negative");
  }
  const auto counts = class_sample_counts(spec_);
  for (int c = 0; c < spec_.num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] < 3) {
      throw Error(Errc::SpecTooSmall, "class " + std::to_string(c) + " has " +
                                          std::to_string(counts[static_cast<std::size_t>(c)]) +
                                          " samples; each class needs >= 3 (train, query, index)");
    }
  }
  auto& train = splits_[SplitKind::Train];
  auto& query = splits_[SplitKind::Query];
  auto& index = splits_[SplitKind::Index];
  for (int c = 0; c < spec_.num_classes; ++c) {
    const int n = counts[static_cast<std::size_t>(c)];
    const int n_query = std::max(1, n / 8);
    const int n_index = std::max(1, n / 4);
    for (int s = 0; s < n; ++s) {
      DatasetSplit& dst = s < n_query ? query : (s < n_query + n_index ? index : train);
      dst.ids.push_back((static_cast<std::uint64_t>(c) << 20) | static_cast<std::uint64_t>(s));
      dst.labels.push_back(c);
      dst.sample_indices.push_back(s);
    }
  }
}

const DatasetSplit& SyntheticDataset::split(SplitKind kind) const { return splits_.at(kind); }

std::vector<Index> SyntheticDataset::train_class_counts() const {
  std::vector<Index> counts(static_cast<std::size_t>(spec_.num_classes), 0);
  for (int label : split(SplitKind::Train).labels) ++counts[static_cast<std::size_t>(label)];
  return counts;
}

Tensor SyntheticDataset::images(SplitKind kind, int resolution) const {
  if (resolution < 1) throw Error(Errc::InvalidConfig, "resolution must be positive");
  const auto key = std::make_pair(kind, resolution);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;

  const DatasetSplit& s = split(kind);
  const Index per_image = static_cast<Index>(spec_.channels) * resolution * resolution;
  Tensor out({s.size(), spec_.channels, resolution, resolution});
  auto dst = out.mutable_values();
  for (Index i = 0; i < s.size(); ++i) {
    const auto img = render_sample(spec_, s.labels[static_cast<std::size_t>(i)],
                                   s.sample_indices[static_cast<std::size_t>(i)], resolution);
    std::copy(img.begin(), img.end(), dst.begin() + i * per_image);
  }
  cache_.emplace(key, out);
  return out;
}

Tensor SyntheticDataset::batch(SplitKind kind, int resolution, const std::vector<Index>& positions) const {
  const Tensor all = images(kind, resolution);
  const Index per_image = all.numel() / all.dim(0);
  Tensor out({static_cast<Index>(positions.size()), all.dim(1), all.dim(2), all.dim(3)});
  auto src = all.values();
  auto dst = out.mutable_values();
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::copy_n(src.begin() + positions[i] * per_image, per_image, dst.begin() + static_cast<Index>(i) * per_image);
  }
  return out;
}

void SyntheticDataset::set_images(SplitKind kind, int resolution, Tensor images) {
  const DatasetSplit& s = split(kind);
  if (images.rank() != 4 || images.dim(0) != s.size() || images.dim(1) != spec_.channels ||
      images.dim(2) != resolution || images.dim(3) != resolution) {
    throw Error(Errc::ShapeMismatch, "cached images " + shape_str(images.shape()) + " do not match split '" +
                                         split_name(kind) + "'");
  }
  cache_[std::make_pair(kind, resolution)] = std::move(images);
}

SyntheticDataset generate_dataset(const SyntheticDatasetSpec& spec) {
  return SyntheticDataset(spec);
}

}  // namespace embedkit
