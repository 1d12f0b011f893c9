#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "embedkit/retrieval.hpp"
#include "test_util.hpp"

using namespace embedkit;
using embedkit::testing::error_code_of;
using embedkit::testing::random_matrix;

namespace {

EmbeddingSet make_set(RowMatrixXd values, std::vector<int> labels, std::uint64_t id_base = 0) {
  EmbeddingSet s;
  s.values = std::move(values);
  s.labels = std::move(labels);
  for (Index i = 0; i < s.size(); ++i) s.ids.push_back(id_base + static_cast<std::uint64_t>(i));
  return s;
}

// Naive reference: explicit loops, selection of the best remaining item k times.
std::vector<std::vector<std::uint64_t>> naive_knn(const EmbeddingSet& q, const EmbeddingSet& x, Index k) {
  std::vector<std::vector<std::uint64_t>> out;
  for (Index i = 0; i < q.size(); ++i) {
    std::vector<double> score(static_cast<std::size_t>(x.size()));
    for (Index j = 0; j < x.size(); ++j) {
      double dot = 0.0, nq = 0.0, nx = 0.0;
      for (Index d = 0; d < q.dim(); ++d) nq += q.values(i, d) * q.values(i, d);
      for (Index d = 0; d < q.dim(); ++d) nx += x.values(j, d) * x.values(j, d);
      for (Index d = 0; d < q.dim(); ++d) dot += (q.values(i, d) / std::sqrt(nq)) * (x.values(j, d) / std::sqrt(nx));
      score[static_cast<std::size_t>(j)] = dot;
    }
    std::vector<bool> used(score.size(), false);
    std::vector<std::uint64_t> picked;
    for (Index r = 0; r < std::min(k, x.size()); ++r) {
      std::size_t best = score.size();
      for (std::size_t j = 0; j < score.size(); ++j) {
        if (used[j]) continue;
        if (best == score.size() || score[j] > score[best] ||
            (score[j] == score[best] && x.ids[j] < x.ids[best])) {
          best = j;
        }
      }
      used[best] = true;
      picked.push_back(x.ids[best]);
    }
    out.push_back(picked);
  }
  return out;
}

double naive_mp5(const std::vector<std::vector<std::uint64_t>>& hits, const EmbeddingSet& q, const EmbeddingSet& x) {
  double total = 0.0;
  int evaluated = 0;
  for (Index i = 0; i < q.size(); ++i) {
    int relevant = 0;
    for (Index j = 0; j < x.size(); ++j) relevant += x.labels[j] == q.labels[i];
    if (relevant == 0) continue;
    int correct = 0;
    for (std::size_t r = 0; r < hits[i].size() && r < 5; ++r) {
      for (Index j = 0; j < x.size(); ++j) {
        if (x.ids[j] == hits[i][r] && x.labels[j] == q.labels[i]) ++correct;
      }
    }
    total += static_cast<double>(correct) / std::min(5, relevant);
    ++evaluated;
  }
  return total / evaluated;
}

}  // namespace

TEST_CASE("self retrieval with k=1") {
  std::mt19937_64 rng(3);
  auto s = make_set(random_matrix(10, 64, rng), std::vector<int>(10, 0));
  const auto r = knn(s, s, 1);
  for (Index i = 0; i < 10; ++i) {
    REQUIRE(r.hits[i].size() == 1u);
    CHECK(r.hits[i][0].id == s.ids[i]);
    CHECK(r.hits[i][0].score == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("two-item ordering and id tie-break") {
  RowMatrixXd idx = RowMatrixXd::Zero(2, 64);
  idx(0, 0) = 1.0;
  idx(1, 1) = 1.0;
  RowMatrixXd q = RowMatrixXd::Zero(1, 64);
  q(0, 0) = 0.9;
  q(0, 1) = 0.1;
  const auto r = knn(make_set(q, {0}), make_set(idx, {0, 1}), 2);
  CHECK(r.hits[0][0].id == 0u);
  CHECK(r.hits[0][1].id == 1u);

  RowMatrixXd tied = RowMatrixXd::Zero(3, 64);
  tied(0, 1) = 1.0;
  tied(1, 0) = 1.0;
  tied(2, 0) = 1.0;
  EmbeddingSet index = make_set(tied, {0, 0, 0});
  index.ids = {7, 5, 3};
  RowMatrixXd query = RowMatrixXd::Zero(1, 64);
  query(0, 0) = 1.0;
  const auto t = knn(make_set(query, {0}), index, 3);
  CHECK(t.hits[0][0].id == 3u);
  CHECK(t.hits[0][1].id == 5u);
  CHECK(t.hits[0][2].id == 7u);
}

TEST_CASE("knn and mP@5 match the naive double loop on random instances") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> size(1, 100), classes(2, 6), dim(2, 8);
    const Index nq = size(rng), nx = size(rng), d = dim(rng);
    const int c = classes(rng);
    std::uniform_int_distribution<int> label(0, c - 1);
    std::vector<int> ql, xl;
    for (Index i = 0; i < nq; ++i) ql.push_back(label(rng));
    for (Index i = 0; i < nx; ++i) xl.push_back(label(rng));
    RowMatrixXd xv = random_matrix(nx, d, rng);
    // Exact duplicates exercise the tie-break.
    if (nx > 3) xv.row(nx - 1) = xv.row(0);
    auto q = make_set(random_matrix(nq, d, rng), ql);
    auto x = make_set(xv, xl, 1000);
    std::vector<std::uint64_t> shuffled = x.ids;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    x.ids = shuffled;

    const auto got = knn(q, x, 5);
    const auto want = naive_knn(q, x, 5);
    bool same = true;
    for (Index i = 0; i < nq; ++i) {
      same = same && got.hits[i].size() == want[i].size();
      for (std::size_t r = 0; same && r < want[i].size(); ++r) same = got.hits[i][r].id == want[i][r];
    }
    CHECK(same);
    bool any_relevant = false;
    for (int l : ql) any_relevant = any_relevant || std::count(xl.begin(), xl.end(), l) > 0;
    if (!any_relevant) continue;
    CHECK(std::abs(mp_at_5(got, q.labels, x.labels) - naive_mp5(want, q, x)) <= 1e-12);
  }
}

TEST_CASE("precision formula examples") {
  RetrievalResult r;
  r.hits = {{{0, 0, 0.9}, {1, 1, 0.8}, {2, 2, 0.7}, {3, 3, 0.6}, {4, 4, 0.5}}};
  const std::vector<int> ql = {1};
  const std::vector<int> il = {1, 0, 1, 0, 0, 1};
  const std::vector<Index> rq = {3};
  CHECK(mean_precision_at_k(r, ql, il, rq, 5).mean == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(mean_precision_at_k(r, ql, il, rq, 5, PrecisionDenominator::K).mean == doctest::Approx(0.4));
  const std::vector<int> none = {2, 2, 2, 2, 2, 1};
  CHECK(mean_precision_at_k(r, ql, none, rq, 5).mean == 0.0);
  const std::vector<int> all = {1, 1, 1, 1, 1, 1};
  CHECK(mp_at_5(r, ql, all) == 1.0);
  const std::vector<Index> zero = {0};
  CHECK(error_code_of([&] { mean_precision_at_k(r, ql, il, zero, 5); }) == Errc::NoEvaluableQueries);
}

TEST_CASE("scale and permutation invariance") {
  std::mt19937_64 rng(8);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) labels[i] = i % 4;
  auto x = make_set(random_matrix(40, 64, rng), labels);
  auto q = make_set(random_matrix(12, 64, rng), std::vector<int>(labels.begin(), labels.begin() + 12), 500);
  const auto base = knn(q, x, 5);

  auto scaled = x;
  std::uniform_real_distribution<double> factor(0.1, 10.0);
  for (Index i = 0; i < scaled.size(); ++i) scaled.values.row(i) *= factor(rng);
  auto perm = x;
  std::vector<Index> order(40);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (Index i = 0; i < 40; ++i) {
    perm.values.row(i) = x.values.row(order[i]);
    perm.labels[i] = x.labels[order[i]];
    perm.ids[i] = x.ids[order[i]];
  }
  for (const auto* variant : {&scaled, &perm}) {
    const auto r = knn(q, *variant, 5);
    for (Index i = 0; i < q.size(); ++i) {
      for (int k = 0; k < 5; ++k) CHECK(r.hits[i][k].id == base.hits[i][k].id);
    }
    CHECK(mp_at_5(r, q.labels, variant->labels) == mp_at_5(base, q.labels, x.labels));
  }
}

TEST_CASE("random embeddings score about 1/C") {
  const int classes = 8;
  std::vector<double> scores;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> xl(400), ql(200);
    for (int i = 0; i < 400; ++i) xl[i] = i % classes;
    for (int i = 0; i < 200; ++i) ql[i] = i % classes;
    auto x = make_set(random_matrix(400, 64, rng), xl);
    auto q = make_set(random_matrix(200, 64, rng), ql, 10000);
    scores.push_back(evaluate_retrieval(q, x).mean);
  }
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / scores.size();
  // Per-query precision is roughly Binomial(5, 1/C) / 5; 200 queries per seed, 20 seeds.
  const double p = 1.0 / classes;
  const double sigma = std::sqrt(p * (1 - p) / 5.0 / (200.0 * 20.0));
  CHECK(std::abs(mean - p) <= 3 * sigma);
}

TEST_CASE("self-match exclusion and degenerate splits") {
  RowMatrixXd v = RowMatrixXd::Identity(4, 64);
  auto s = make_set(v, {0, 1, 2, 3});
  RetrievalEvalOptions opts;
  opts.exclude_same_id = true;
  CHECK(error_code_of([&] { evaluate_retrieval(s, s, opts); }) == Errc::NoEvaluableQueries);
  // Each query's only other relevant item is orthogonal like the rest, but
  // still lands in the top five.
  auto pairs = make_set(RowMatrixXd::Identity(4, 64), {0, 0, 1, 1});
  const auto report = evaluate_retrieval(pairs, pairs, opts);
  CHECK(report.mean == 1.0);
  for (const auto& row : report.rows) CHECK(row.relevant == 1);
}

TEST_CASE("retrieval errors") {
  std::mt19937_64 rng(1);
  auto a = make_set(random_matrix(3, 64, rng), {0, 1, 2});
  auto b = make_set(random_matrix(3, 32, rng), {0, 1, 2});
  EmbeddingSet empty;
  empty.values.resize(0, 64);
  CHECK(error_code_of([&] { knn(a, b, 5); }) == Errc::DimensionMismatch);
  CHECK(error_code_of([&] { knn(a, empty, 5); }) == Errc::EmptyIndex);
  auto bad = a;
  bad.labels.pop_back();
  CHECK(error_code_of([&] { knn(bad, a, 5); }) == Errc::MisalignedSets);
  auto zero = a;
  zero.values.row(1).setZero();
  CHECK(error_code_of([&] { knn(zero, a, 5); }) == Errc::DegenerateRow);
}
