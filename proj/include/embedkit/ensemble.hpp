#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "embedkit/dataset.hpp"
#include "embedkit/model.hpp"
#include "embedkit/retrieval.hpp"
#include "embedkit/train.hpp"

namespace embedkit {

/// Rows of every set L2-normalized, weighted-averaged, then normalized again.
/// Sets must share ids in the same order.
EmbeddingSet average_embeddings(std::span<const EmbeddingSet> sets, std::span<const double> weights);

/// Least-squares fit of Y1 ~ k * Y2 (+ b) over all entries, with relative
/// residual r = |Y1 - (k Y2 + b)|_F / |Y1|_F.
struct CompatibilityReport {
  double k = 0.0;
  double b = 0.0;
  double residual = 0.0;
  double tau = 0.05;
  bool affine = false;

  bool compatible() const { return residual <= tau; }
};

CompatibilityReport proportionality_check(const EmbeddingSet& y1, const EmbeddingSet& y2, bool affine,
                                          double tau = 0.05);

/// Affine map on embedding rows: e -> A e + b.
struct Adapter {
  RowMatrixXd A;
  Eigen::VectorXd b;

  static Adapter identity(Index dim);
  Index dim() const { return A.rows(); }
  bool is_identity() const;
  RowMatrixXd apply(const RowMatrixXd& rows) const;
  EmbeddingSet apply(const EmbeddingSet& set) const;
};

/// argmin over (A, b) of sum |A e_member + b - e_anchor|^2 + ridge |A|_F^2.
/// Throws SingularSystem when the system is rank deficient.
Adapter fit_adapter_least_squares(const EmbeddingSet& member, const EmbeddingSet& anchor, double ridge);

struct AdapterTrainReport {
  std::vector<double> epoch_losses;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
};

/// Trains an adapter on the member's train-split embeddings through the
/// anchor's ArcFace loss, starting from the identity. Member and anchor stay
/// untouched (FreezeViolation otherwise). Uses the stage's epochs, lr,
/// momentum, weight decay, batch size, seed and resolution; epochs may be 0.
Adapter fit_adapter_train(const EmbeddingModel& member, const EmbedHead& anchor_head, const SyntheticDataset& data,
                          const StageConfig& stage, AdapterTrainReport* report = nullptr);

/// Embeddings one member produced for the benchmark's query and index splits.
struct MemberEmbeddings {
  std::string id;
  EmbeddingSet queries;
  EmbeddingSet index;
  // Hash of the head the member was trained against, when known.
  std::optional<std::uint64_t> head_hash;
  std::optional<Adapter> adapter;
};

enum class EnsembleMode { NaiveAverage, SharedHead, AdapterAligned };

const char* ensemble_mode_name(EnsembleMode mode);
EnsembleMode parse_ensemble_mode(const std::string& name);

struct EnsembleEvalReport {
  std::vector<double> member_scores;
  double ensemble_score = 0.0;
};

/// Solo mP@5 of every member and of their ensemble under `mode`. SharedHead
/// requires equal head hashes (HeadNotShared otherwise); AdapterAligned maps
/// each member through its adapter (identity when absent) before averaging.
EnsembleEvalReport ensemble_modes_eval(std::span<const MemberEmbeddings> members, EnsembleMode mode,
                                       std::span<const double> weights = {},
                                       const RetrievalEvalOptions& options = {});

std::uint64_t head_hash(const EmbedHead& head);

}  // namespace embedkit
