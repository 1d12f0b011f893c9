#include <doctest.h>

#include <cmath>
#include <random>

#include "embedkit/gradcheck.hpp"
#include "embedkit/head.hpp"
#include "embedkit/ops.hpp"
#include "test_util.hpp"

using namespace embedkit;
using embedkit::testing::error_code_of;
using embedkit::testing::random_matrix;
using embedkit::testing::random_tensor;

namespace {

RowMatrixXd normalize_rows_seq(RowMatrixXd m) {
  for (Index r = 0; r < m.rows(); ++r) {
    double sq = 0.0;
    for (Index j = 0; j < m.cols(); ++j) sq += m(r, j) * m(r, j);
    const double n = std::sqrt(sq);
    for (Index j = 0; j < m.cols(); ++j) m(r, j) /= n;
  }
  return m;
}

}  // namespace

TEST_CASE("embed is deterministic in eval mode") {
  HeadConfig cfg{.num_classes = 4};
  EmbedHead head(16, cfg, 3);
  std::mt19937_64 rng(1), data(2);
  Tensor features = random_tensor({5, 16}, data);
  Tensor a = head.embed(features, false, rng);
  Tensor b = head.embed(features, false, rng);
  CHECK(a.shape() == Shape{5, kEmbeddingDim});
  for (Index i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("zero dropout makes train and eval agree") {
  HeadConfig cfg{.num_classes = 4, .dropout = 0.0};
  EmbedHead head(16, cfg, 3);
  std::mt19937_64 rng(1), data(2);
  Tensor features = random_tensor({5, 16}, data);
  Tensor a = head.embed(features, true, rng);
  Tensor b = head.embed(features, false, rng);
  for (Index i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("dropout statistics over many draws") {
  std::mt19937_64 rng(123);
  Tensor ones = Tensor::full({200000}, 1.0);
  Tensor out = dropout(ones, 0.2, rng, true);
  Index zeros = 0;
  for (double v : out.values()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      REQUIRE(v == doctest::Approx(1.0 / 0.8).epsilon(1e-15));
    }
  }
  const double fraction = static_cast<double>(zeros) / static_cast<double>(out.numel());
  CHECK(fraction > 0.18);
  CHECK(fraction < 0.22);
}

TEST_CASE("zero margin gives scaled cosines exactly") {
  std::mt19937_64 rng(7);
  const RowMatrixXd e = random_matrix(4, kEmbeddingDim, rng);
  const RowMatrixXd w = random_matrix(kEmbeddingDim, 5, rng);
  const std::vector<int> targets{0, 1, 4, 2};
  const std::vector<double> margins(5, 0.0);
  Tensor logits = arcface_logits(Tensor::from_matrix(e), Tensor::from_matrix(w), targets, margins, 30.0);

  const RowMatrixXd en = normalize_rows_seq(e);
  const RowMatrixXd wn = normalize_rows_seq(w.transpose()).transpose();
  const RowMatrixXd expected = en * wn;
  for (Index b = 0; b < 4; ++b)
    for (Index c = 0; c < 5; ++c) CHECK(logits[b * 5 + c] == 30.0 * expected(b, c));
}

TEST_CASE("target logit with margin on an aligned center") {
  RowMatrixXd e = RowMatrixXd::Zero(1, kEmbeddingDim);
  e(0, 0) = 1.0;
  RowMatrixXd w = RowMatrixXd::Zero(kEmbeddingDim, 2);
  w(0, 0) = 1.0;
  w(1, 1) = 1.0;
  const std::vector<int> targets{0};
  const std::vector<double> margins{0.5, 0.5};
  Tensor logits = arcface_logits(Tensor::from_matrix(e), Tensor::from_matrix(w), targets, margins, 30.0);
  CHECK(logits[0] == doctest::Approx(26.3275).epsilon(1e-5));
  CHECK(logits[0] == doctest::Approx(30.0 * std::cos(0.5)).epsilon(1e-14));
  CHECK(logits[1] == 0.0);
}

TEST_CASE("antipodal targets saturate at -s") {
  RowMatrixXd e = RowMatrixXd::Zero(1, kEmbeddingDim);
  e(0, 0) = -1.0;
  e(0, 1) = 0.05;
  RowMatrixXd w = RowMatrixXd::Zero(kEmbeddingDim, 2);
  w(0, 0) = 1.0;
  w(1, 1) = 1.0;
  const std::vector<int> targets{0};
  const std::vector<double> margins{0.5, 0.5};
  Tensor logits = arcface_logits(Tensor::from_matrix(e), Tensor::from_matrix(w), targets, margins, 30.0);
  CHECK(logits[0] == -30.0);
}

TEST_CASE("arcface input validation") {
  Tensor e = Tensor::full({2, kEmbeddingDim}, 1.0);
  Tensor w = Tensor::full({kEmbeddingDim, 3}, 1.0);
  const std::vector<double> margins{0.3, 0.3, 0.3};
  const std::vector<int> bad_targets{0, 3};
  CHECK(error_code_of([&] { arcface_logits(e, w, bad_targets, margins, 30); }) == Errc::InvalidLabel);
  const std::vector<int> targets{0, 1};
  const std::vector<double> bad_margins{0.3, 3.2, 0.3};
  CHECK(error_code_of([&] { arcface_logits(e, w, targets, bad_margins, 30); }) == Errc::InvalidMargin);
  const std::vector<double> negative{0.3, -0.1, 0.3};
  CHECK(error_code_of([&] { arcface_logits(e, w, targets, negative, 30); }) == Errc::InvalidMargin);
}

TEST_CASE("larger margin lowers the target logit") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor e = random_tensor({1, kEmbeddingDim}, rng);
    Tensor w = random_tensor({kEmbeddingDim, 3}, rng);
    const std::vector<int> targets{trial % 3};
    double previous = 1e300;
    for (double m = 0.0; m < 1.0; m += 0.1) {
      const std::vector<double> margins(3, m);
      const double logit = arcface_logits(e, w, targets, margins, 30.0)[targets[0]];
      CHECK(logit < previous);
      previous = logit;
    }
  }
}

TEST_CASE("cross-entropy over ArcFace logits: gradient check") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    Parameter e{"emb", random_tensor({4, kEmbeddingDim}, rng, true)};
    Parameter w{"W", random_tensor({kEmbeddingDim, 3}, rng, true)};
    const std::vector<int> targets{0, 2, 1, 2};
    const std::vector<double> margins{0.3, 0.2, 0.4};
    auto report = grad_check(
        [&] { return cross_entropy(arcface_logits(e.tensor, w.tensor, targets, margins, 30.0), targets); }, {e, w});
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("full head gradient check through projection") {
  HeadConfig cfg{.num_classes = 3, .dropout = 0.2};
  EmbedHead head(12, cfg, 5);
  std::mt19937_64 rng(6);
  Parameter features{"features", random_tensor({4, 12}, rng, true)};
  const std::vector<int> targets{0, 1, 2, 1};
  const auto margins = dynamic_margins(cfg.margin, 3);
  std::vector<Parameter> params{features};
  for (Parameter* p : head.parameters()) params.push_back(*p);
  std::mt19937_64 dropout_rng(0);
  auto report = grad_check([&] { return head.loss(head.embed(features.tensor, false, dropout_rng), targets, margins); },
                           params);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("dynamic margins") {
  MarginSchedule fixed{.mode = MarginMode::Fixed, .margin = 0.3};
  CHECK(dynamic_margins(fixed, 5) == std::vector<double>(5, 0.3));

  MarginSchedule degenerate{.mode = MarginMode::Dynamic, .a = 0.0, .b = 0.7, .m_min = 0.05, .m_max = 0.5,
                            .class_counts = {1, 10, 1000}};
  CHECK(dynamic_margins(degenerate, 3) == std::vector<double>(3, 0.5));

  MarginSchedule dyn{.mode = MarginMode::Dynamic, .a = 0.5, .lambda = 0.25, .b = 0.05, .m_min = 0.05, .m_max = 0.5,
                     .class_counts = {1, 16, 256}};
  auto m = dynamic_margins(dyn, 3);
  CHECK(m[0] == 0.5);
  CHECK(m[1] == doctest::Approx(0.30).epsilon(1e-15));
  CHECK(m[2] == doctest::Approx(0.175).epsilon(1e-15));

  dyn.class_counts = {4, 0, 2};
  CHECK(error_code_of([&] { dynamic_margins(dyn, 3); }) == Errc::InvalidCounts);
  dyn.class_counts = {4, 2};
  CHECK(error_code_of([&] { dynamic_margins(dyn, 3); }) == Errc::InvalidCounts);
}

TEST_CASE("dynamic margins are non-increasing in class size") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pos(0.01, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    MarginSchedule s{.mode = MarginMode::Dynamic, .a = pos(rng), .lambda = pos(rng), .b = pos(rng) * 0.1,
                     .m_min = 0.0, .m_max = 3.0};
    for (Index n = 1; n <= 400; n += 7) s.class_counts.push_back(n);
    auto m = dynamic_margins(s, static_cast<Index>(s.class_counts.size()));
    for (std::size_t i = 1; i < m.size(); ++i) CHECK(m[i] <= m[i - 1]);
  }
}

TEST_CASE("class center directions") {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(kEmbeddingDim, 2);
  w(0, 0) = 3.0;
  w(1, 0) = 4.0;
  w(5, 1) = 1.0;
  Eigen::MatrixXd d = class_center_directions(w);
  CHECK(d(0, 0) == doctest::Approx(0.6));
  CHECK(d(1, 0) == doctest::Approx(0.8));
  CHECK(d(5, 1) == 1.0);

  std::mt19937_64 rng(9);
  Eigen::MatrixXd random = random_matrix(kEmbeddingDim, 6, rng);
  Eigen::MatrixXd unit = class_center_directions(random);
  CHECK((class_center_directions(unit) - unit).cwiseAbs().maxCoeff() < 1e-15);
  for (double k : {0.01, 3.0, 1e4}) {
    CHECK((class_center_directions(k * random) - unit).cwiseAbs().maxCoeff() < 1e-14);
  }
  w.col(1).setZero();
  CHECK(error_code_of([&] { class_center_directions(w); }) == Errc::ZeroCenter);
}
