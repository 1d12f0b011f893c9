#include "embedkit/retrieval.hpp"

#include <algorithm>
#include <string>
#include <unordered_set>

namespace embedkit {

void EmbeddingSet::validate() const {
  if (static_cast<Index>(labels.size()) != size() || static_cast<Index>(ids.size()) != size()) {
    throw Error(Errc::MisalignedSets, "embedding set has " + std::to_string(size()) + " rows but " +
                                          std::to_string(labels.size()) + " labels and " + std::to_string(ids.size()) +
                                          " ids");
  }
  std::unordered_set<std::uint64_t> seen;
  for (auto id : ids) {
    if (!seen.insert(id).second) throw Error(Errc::MisalignedSets, "duplicate item id " + std::to_string(id));
  }
}

RetrievalResult knn(const EmbeddingSet& queries, const EmbeddingSet& index, Index k, const KnnOptions& options) {
  if (k < 1) throw Error(Errc::InvalidConfig, "k must be >= 1");
  if (index.size() == 0) throw Error(Errc::EmptyIndex, "index set is empty");
  if (queries.dim() != index.dim()) {
    throw Error(Errc::DimensionMismatch, "query dim " + std::to_string(queries.dim()) + " != index dim " +
                                             std::to_string(index.dim()));
  }
  queries.validate();
  index.validate();

  const RowMatrixXd q = normalize_rows(queries.values);
  const RowMatrixXd x = normalize_rows(index.values);

  RetrievalResult result;
  result.hits.resize(static_cast<std::size_t>(q.rows()));
  std::vector<Hit> candidates;
  for (Index qi = 0; qi < q.rows(); ++qi) {
    candidates.clear();
    for (Index i = 0; i < x.rows(); ++i) {
      const auto id = index.ids[static_cast<std::size_t>(i)];
      if (options.exclude_same_id && id == queries.ids[static_cast<std::size_t>(qi)]) continue;
      candidates.push_back(Hit{id, i, q.row(qi).dot(x.row(i))});
    }
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), candidates.size());
    auto better = [](const Hit& a, const Hit& b) { return a.score != b.score ? a.score > b.score : a.id < b.id; };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                      better);
    result.hits[static_cast<std::size_t>(qi)].assign(candidates.begin(),
                                                     candidates.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return result;
}

PrecisionReport mean_precision_at_k(const RetrievalResult& results, std::span<const int> query_labels,
                                    std::span<const int> index_labels, std::span<const Index> relevant_counts,
                                    Index k, PrecisionDenominator denominator) {
  if (results.hits.size() != query_labels.size() || relevant_counts.size() != query_labels.size()) {
    throw Error(Errc::MisalignedSets, "one label and relevant count per query required");
  }
  PrecisionReport report;
  report.rows.reserve(query_labels.size());
  double total = 0.0;
  for (std::size_t q = 0; q < query_labels.size(); ++q) {
    PrecisionReport::Row row;
    row.relevant = relevant_counts[q];
    const auto& hits = results.hits[q];
    for (std::size_t i = 0; i < hits.size() && static_cast<Index>(i) < k; ++i) {
      const auto pos = static_cast<std::size_t>(hits[i].position);
      if (pos >= index_labels.size()) throw Error(Errc::MisalignedSets, "hit position outside index labels");
      if (index_labels[pos] == query_labels[q]) ++row.hits_correct;
    }
    if (row.relevant > 0) {
      const Index denom = denominator == PrecisionDenominator::K ? k : std::min(k, row.relevant);
      row.precision = static_cast<double>(row.hits_correct) / static_cast<double>(denom);
      row.evaluated = true;
      total += row.precision;
      ++report.evaluated_queries;
    }
    report.rows.push_back(row);
  }
  if (report.evaluated_queries == 0) {
    throw Error(Errc::NoEvaluableQueries, "no query has a relevant item in the index");
  }
  report.mean = total / static_cast<double>(report.evaluated_queries);
  return report;
}

namespace {

std::vector<Index> count_relevant(std::span<const int> query_labels, std::span<const int> index_labels) {
  std::vector<Index> counts;
  counts.reserve(query_labels.size());
  for (int label : query_labels) {
    counts.push_back(static_cast<Index>(std::count(index_labels.begin(), index_labels.end(), label)));
  }
  return counts;
}

}  // namespace

double mp_at_5(const RetrievalResult& results, std::span<const int> query_labels, std::span<const int> index_labels) {
  const auto counts = count_relevant(query_labels, index_labels);
  return mean_precision_at_k(results, query_labels, index_labels, counts, 5).mean;
}

PrecisionReport evaluate_retrieval(const EmbeddingSet& queries, const EmbeddingSet& index,
                                   const RetrievalEvalOptions& options) {
  const auto results = knn(queries, index, options.k, KnnOptions{options.exclude_same_id});
  auto counts = count_relevant(queries.labels, index.labels);
  if (options.exclude_same_id) {
    for (std::size_t q = 0; q < counts.size(); ++q) {
      const auto qid = queries.ids[q];
      for (std::size_t i = 0; i < index.ids.size(); ++i) {
        if (index.ids[i] == qid && index.labels[i] == queries.labels[q]) --counts[q];
      }
    }
  }
  auto report = mean_precision_at_k(results, queries.labels, index.labels, counts, options.k, options.denominator);
  for (std::size_t q = 0; q < report.rows.size(); ++q) report.rows[q].query_id = queries.ids[q];
  return report;
}

}  // namespace embedkit
