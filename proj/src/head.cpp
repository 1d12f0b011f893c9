#include "embedkit/head.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "embedkit/ops.hpp"

namespace embedkit {

std::vector<double> dynamic_margins(const MarginSchedule& schedule, Index num_classes) {
  if (schedule.mode == MarginMode::Fixed) {
    if (!(schedule.margin >= 0.0 && schedule.margin < std::numbers::pi)) {
      throw Error(Errc::InvalidMargin, "fixed margin outside [0, pi)");
    }
    return std::vector<double>(static_cast<std::size_t>(num_classes), schedule.margin);
  }
  if (static_cast<Index>(schedule.class_counts.size()) != num_classes) {
    throw Error(Errc::InvalidCounts, "dynamic margin needs one count per class (" + std::to_string(num_classes) +
                                         "), got " + std::to_string(schedule.class_counts.size()));
  }
  if (!(schedule.m_min >= 0.0 && schedule.m_max < std::numbers::pi && schedule.m_min <= schedule.m_max)) {
    throw Error(Errc::InvalidMargin, "dynamic margin bounds must satisfy 0 <= m_min <= m_max < pi");
  }
  std::vector<double> margins;
  margins.reserve(schedule.class_counts.size());
  for (Index n : schedule.class_counts) {
    if (n < 1) throw Error(Errc::InvalidCounts, "class sample counts must be >= 1");
    const double raw = schedule.a * std::pow(static_cast<double>(n), -schedule.lambda) + schedule.b;
    margins.push_back(std::clamp(raw, schedule.m_min, schedule.m_max));
  }
  return margins;
}

Tensor arcface_logits(const Tensor& embeddings, const Tensor& centers, std::span<const int> targets,
                      std::span<const double> class_margins, double scale_factor) {
  if (embeddings.rank() != 2 || centers.rank() != 2 || embeddings.dim(1) != centers.dim(0)) {
    throw Error(Errc::ShapeMismatch, "arcface_logits: embeddings " + shape_str(embeddings.shape()) +
                                         " incompatible with centers " + shape_str(centers.shape()));
  }
  Tensor cosines = matmul(l2_normalize(embeddings, 1), l2_normalize(centers, 0));
  return angular_margin(cosines, targets, class_margins, scale_factor);
}

EmbedHead::EmbedHead(Index input_dim, const HeadConfig& config, std::uint64_t seed) : config_(config) {
  if (input_dim < 1 || config.num_classes < 2) {
    throw Error(Errc::InvalidConfig, "head needs input_dim >= 1 and at least 2 classes");
  }
  if (config.dropout < 0.0 || config.dropout >= 1.0) throw Error(Errc::InvalidConfig, "dropout must be in [0, 1)");
  if (!(config.scale > 0.0)) throw Error(Errc::InvalidConfig, "ArcFace scale must be positive");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(input_dim));

  Tensor w({input_dim, kEmbeddingDim}, true);
  for (double& v : w.mutable_values()) v = proj_std * unit(rng);
  projection_weight_ = {"head.projection.weight", w, true};
  projection_bias_ = {"head.projection.bias", Tensor::zeros({kEmbeddingDim}, true), true};

  Tensor c({kEmbeddingDim, config.num_classes}, true);
  for (double& v : c.mutable_values()) v = unit(rng);
  centers_ = {"head.arcface.W", c, true};
}

Tensor EmbedHead::embed(const Tensor& features, bool train_mode, std::mt19937_64& rng) const {
  if (features.rank() != 2 || features.dim(1) != input_dim()) {
    throw Error(Errc::ShapeMismatch, "head expects [B," + std::to_string(input_dim()) + "] features, got " +
                                         shape_str(features.shape()));
  }
  Tensor projected = linear(features, projection_weight_.tensor, projection_bias_.tensor);
  return dropout(projected, config_.dropout, rng, train_mode);
}

Tensor EmbedHead::logits(const Tensor& embeddings, std::span<const int> targets,
                         std::span<const double> class_margins) const {
  return arcface_logits(embeddings, centers_.tensor, targets, class_margins, config_.scale);
}

Tensor EmbedHead::loss(const Tensor& embeddings, std::span<const int> targets,
                       std::span<const double> class_margins) const {
  return cross_entropy(logits(embeddings, targets, class_margins), targets);
}

std::vector<Parameter*> EmbedHead::parameters() {
  return {&projection_weight_, &projection_bias_, &centers_};
}

std::vector<const Parameter*> EmbedHead::parameters() const {
  return {&projection_weight_, &projection_bias_, &centers_};
}

Eigen::MatrixXd class_center_directions(const EmbedHead& head) {
  return class_center_directions(head.centers().tensor.matrix());
}

}  // namespace embedkit
