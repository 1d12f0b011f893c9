#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "embedkit/tensor.hpp"

namespace embedkit {

// Competition embedding length.
inline constexpr Index kEmbeddingDim = 64;

enum class MarginMode { Fixed, Dynamic };

/// Per-class ArcFace margin. Dynamic mode uses
/// m_c = clamp(a * n_c^(-lambda) + b, m_min, m_max) over class sample counts.
struct MarginSchedule {
  MarginMode mode = MarginMode::Fixed;
  double margin = 0.3;
  double a = 0.5;
  double lambda = 0.25;
  double b = 0.05;
  double m_min = 0.05;
  double m_max = 0.5;
  std::vector<Index> class_counts;
};

std::vector<double> dynamic_margins(const MarginSchedule& schedule, Index num_classes);

struct HeadConfig {
  int num_classes = 8;
  double dropout = 0.2;
  double scale = 30.0;
  MarginSchedule margin;
};

/// cos(theta_j) between L2-normalized embeddings [B,E] and L2-normalized
/// center columns [E,C], then the ArcFace margin on each row's target.
Tensor arcface_logits(const Tensor& embeddings, const Tensor& centers, std::span<const int> targets,
                      std::span<const double> class_margins, double scale);

/// Projection (D -> 64), dropout, and ArcFace class-center matrix W (64 x C).
class EmbedHead {
 public:
  EmbedHead(Index input_dim, const HeadConfig& config, std::uint64_t seed);

  const HeadConfig& config() const { return config_; }
  HeadConfig& mutable_config() { return config_; }
  Index input_dim() const { return projection_weight_.tensor.dim(0); }
  Index num_classes() const { return centers_.tensor.dim(1); }

  // Unnormalized 64-d embeddings; dropout only when train_mode.
  Tensor embed(const Tensor& features, bool train_mode, std::mt19937_64& rng) const;
  Tensor logits(const Tensor& embeddings, std::span<const int> targets, std::span<const double> class_margins) const;
  Tensor loss(const Tensor& embeddings, std::span<const int> targets, std::span<const double> class_margins) const;

  const Parameter& centers() const { return centers_; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

 private:
  HeadConfig config_;
  Parameter projection_weight_, projection_bias_;
  Parameter centers_;
};

/// Unit-norm columns of the center matrix. Throws ZeroCenter on a zero column.
template <class Derived>
Eigen::MatrixXd class_center_directions(const Eigen::MatrixBase<Derived>& centers) {
  Eigen::MatrixXd out = centers.template cast<double>();
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double norm = out.col(j).norm();
    if (!(norm > 0.0)) throw Error(Errc::ZeroCenter, "class center " + std::to_string(j) + " has zero norm");
    out.col(j) /= norm;
  }
  return out;
}

Eigen::MatrixXd class_center_directions(const EmbedHead& head);

}  // namespace embedkit
