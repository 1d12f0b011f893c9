#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

#include "embedkit/tensor.hpp"

namespace embedkit {

/// N x dim embeddings with a class label and a unique item id per row.
/// Magnitudes are stored as produced; retrieval normalizes rows on the fly.
struct EmbeddingSet {
  RowMatrixXd values;
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;

  Index size() const { return values.rows(); }
  Index dim() const { return values.cols(); }
  // Throws MisalignedSets on length mismatches or duplicate ids.
  void validate() const;
};

struct Hit {
  std::uint64_t id = 0;
  Index position = 0;  // row in the index set
  double score = 0.0;
};

/// Per-query top-k hits, scores non-increasing, ties by ascending id.
struct RetrievalResult {
  std::vector<std::vector<Hit>> hits;
};

struct KnnOptions {
  // Skip index rows whose id equals the query id (self-retrieval).
  bool exclude_same_id = false;
};

/// Rows divided by their L2 norm. Throws DegenerateRow on a zero row.
template <class Derived>
RowMatrixXd normalize_rows(const Eigen::MatrixBase<Derived>& m) {
  RowMatrixXd out = m.template cast<double>();
  for (Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (!(norm > 0.0)) throw Error(Errc::DegenerateRow, "row " + std::to_string(r) + " has zero norm");
    out.row(r) /= norm;
  }
  return out;
}

/// Exact cosine kNN by brute force.
RetrievalResult knn(const EmbeddingSet& queries, const EmbeddingSet& index, Index k, const KnnOptions& options = {});

enum class PrecisionDenominator {
  MinKRelevant,  // 1 / min(k, R_q)
  K,             // 1 / k
};

struct PrecisionReport {
  double mean = 0.0;
  Index evaluated_queries = 0;
  // One entry per query; queries with no relevant index item are excluded
  // from the mean and carry `evaluated == false`.
  struct Row {
    std::uint64_t query_id = 0;
    Index relevant = 0;
    Index hits_correct = 0;
    double precision = 0.0;
    bool evaluated = false;
  };
  std::vector<Row> rows;
};

/// Mean Precision@k over queries: (1/Q) sum_q (1/min(k, R_q)) sum_{i<=k} rel_q(i).
/// `relevant_counts` gives R_q per query. Throws NoEvaluableQueries when every
/// R_q is zero.
PrecisionReport mean_precision_at_k(const RetrievalResult& results, std::span<const int> query_labels,
                                    std::span<const int> index_labels, std::span<const Index> relevant_counts,
                                    Index k, PrecisionDenominator denominator = PrecisionDenominator::MinKRelevant);

/// mP@5 with R_q counted from `index_labels`.
double mp_at_5(const RetrievalResult& results, std::span<const int> query_labels, std::span<const int> index_labels);

struct RetrievalEvalOptions {
  Index k = 5;
  PrecisionDenominator denominator = PrecisionDenominator::MinKRelevant;
  bool exclude_same_id = false;
};

/// knn + precision over two embedding sets; R_q honours exclude_same_id.
PrecisionReport evaluate_retrieval(const EmbeddingSet& queries, const EmbeddingSet& index,
                                   const RetrievalEvalOptions& options = {});

}  // namespace embedkit
