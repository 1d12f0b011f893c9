#include "embedkit/ensemble.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "embedkit/head.hpp"
#include "embedkit/ops.hpp"
#include "embedkit/pipeline.hpp"

namespace embedkit {

namespace {

void require_aligned(const EmbeddingSet& a, const EmbeddingSet& b) {
  a.validate();
  b.validate();
  if (a.size() != b.size() || a.dim() != b.dim() || a.ids != b.ids) {
    throw Error(Errc::MisalignedSets, "embedding sets differ in size, dimension or id order (" +
                                          std::to_string(a.size()) + "x" + std::to_string(a.dim()) + " vs " +
                                          std::to_string(b.size()) + "x" + std::to_string(b.dim()) + ")");
  }
}

}  // namespace

EmbeddingSet average_embeddings(std::span<const EmbeddingSet> sets, std::span<const double> weights) {
  if (sets.empty()) throw Error(Errc::MisalignedSets, "nothing to average");
  if (weights.size() != sets.size()) throw Error(Errc::MisalignedSets, "one weight per embedding set required");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw Error(Errc::InvalidConfig, "weights must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw Error(Errc::InvalidConfig, "weights must sum to a positive value");
  for (const auto& s : sets) require_aligned(sets.front(), s);

  EmbeddingSet out;
  out.labels = sets.front().labels;
  out.ids = sets.front().ids;
  out.values = RowMatrixXd::Zero(sets.front().size(), sets.front().dim());
  for (std::size_t m = 0; m < sets.size(); ++m) {
    if (weights[m] == 0.0) continue;
    out.values += weights[m] * normalize_rows(sets[m].values);
  }
  out.values = normalize_rows(out.values);
  return out;
}

CompatibilityReport proportionality_check(const EmbeddingSet& y1, const EmbeddingSet& y2, bool affine, double tau) {
  require_aligned(y1, y2);
  CompatibilityReport r;
  r.tau = tau;
  r.affine = affine;
  const auto a = y1.values.reshaped();
  const auto x = y2.values.reshaped();
  if (affine) {
    const double n = static_cast<double>(x.size());
    const double mx = x.sum() / n, ma = a.sum() / n;
    const double sxx = (x.array() - mx).square().sum();
    const double sxa = ((x.array() - mx) * (a.array() - ma)).sum();
    r.k = sxx > 0.0 ? sxa / sxx : 0.0;
    r.b = ma - r.k * mx;
  } else {
    const double sxx = x.squaredNorm();
    if (sxx == 0.0) throw Error(Errc::ZeroSecondSet, "second embedding set is all zeros");
    r.k = x.dot(a) / sxx;
  }
  const double denom = y1.values.norm();
  const double resid = (a.array() - (r.k * x.array() + r.b)).matrix().norm();
  r.residual = denom > 0.0 ? resid / denom : 0.0;
  return r;
}

Adapter Adapter::identity(Index dim) { return Adapter{RowMatrixXd::Identity(dim, dim), Eigen::VectorXd::Zero(dim)}; }

bool Adapter::is_identity() const {
  return A == RowMatrixXd::Identity(dim(), dim()) && b.isZero(0.0);
}

RowMatrixXd Adapter::apply(const RowMatrixXd& rows) const {
  if (rows.cols() != dim()) {
    throw Error(Errc::DimensionMismatch, "adapter is " + std::to_string(dim()) + "-d, embeddings are " +
                                             std::to_string(rows.cols()) + "-d");
  }
  RowMatrixXd out = rows * A.transpose();
  out.rowwise() += b.transpose();
  return out;
}

EmbeddingSet Adapter::apply(const EmbeddingSet& set) const {
  EmbeddingSet out = set;
  out.values = apply(set.values);
  return out;
}

Adapter fit_adapter_least_squares(const EmbeddingSet& member, const EmbeddingSet& anchor, double ridge) {
  require_aligned(member, anchor);
  if (!(ridge >= 0.0)) throw Error(Errc::InvalidConfig, "ridge must be >= 0");
  const Index n = member.size(), d = member.dim();
  // [E 1] X = Y with X = [A^T; b^T], plus sqrt(ridge) [I 0] X = 0 rows on A.
  Eigen::MatrixXd design = Eigen::MatrixXd::Zero(n + (ridge > 0.0 ? d : 0), d + 1);
  Eigen::MatrixXd target = Eigen::MatrixXd::Zero(design.rows(), d);
  design.topLeftCorner(n, d) = member.values;
  design.block(0, d, n, 1).setOnes();
  target.topRows(n) = anchor.values;
  if (ridge > 0.0) design.bottomLeftCorner(d, d) = std::sqrt(ridge) * Eigen::MatrixXd::Identity(d, d);

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < d + 1) {
    throw Error(Errc::SingularSystem, "adapter system has rank " + std::to_string(qr.rank()) + " < " +
                                          std::to_string(d + 1) + "; need more distinct rows or ridge > 0");
  }
  const Eigen::MatrixXd x = qr.solve(target);
  return Adapter{x.topRows(d).transpose(), x.row(d).transpose()};
}

Adapter fit_adapter_train(const EmbeddingModel& member, const EmbedHead& anchor_head, const SyntheticDataset& data,
                          const StageConfig& stage, AdapterTrainReport* report) {
  // Zero epochs is allowed here and leaves the identity.
  StageConfig checked = stage;
  checked.epochs = std::max(1, stage.epochs);
  checked.validate();
  if (member.backbone().config().image_size != stage.resolution ||
      member.backbone().config().overlap != stage.overlap) {
    throw Error(Errc::InvalidConfig, "adapter stage geometry differs from the member model's");
  }
  std::vector<const Parameter*> frozen = member.parameters();
  for (const Parameter* p : anchor_head.parameters()) frozen.push_back(p);
  AdapterTrainReport local;
  AdapterTrainReport& rep = report ? *report : local;
  rep = {};
  rep.frozen_hash_before = parameter_hash(frozen);

  const EmbeddingSet train = embed_split(member, data, SplitKind::Train);
  const Index d = train.dim();
  Parameter weight{"adapter.A", Tensor::from_matrix(RowMatrixXd::Identity(d, d), true), true};
  Parameter bias{"adapter.b", Tensor::zeros({d}), true};
  bias.tensor.set_requires_grad(true);
  std::vector<Parameter*> params = {&weight, &bias};

  const Tensor centers = anchor_head.centers().tensor.detach();
  const auto margins = stage_margins(anchor_head, data);
  SgdOptimizer optimizer({stage.lr, stage.momentum, stage.weight_decay});
  std::mt19937_64 shuffle_rng(stage.seed);
  std::vector<Index> order(static_cast<std::size_t>(train.size()));

  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (Index begin = 0; begin < train.size(); begin += stage.batch_size) {
      const Index end = std::min(train.size(), begin + stage.batch_size);
      RowMatrixXd rows(end - begin, d);
      std::vector<int> targets;
      for (Index i = begin; i < end; ++i) {
        const auto pos = order[static_cast<std::size_t>(i)];
        rows.row(i - begin) = train.values.row(pos);
        targets.push_back(train.labels[static_cast<std::size_t>(pos)]);
      }
      double batch_loss = 0.0;
      {
        Tape tape;
        TapeScope scope(tape);
        // weight holds A^T so rows map as e A^T + b.
        Tensor adapted = linear(Tensor::from_matrix(rows), weight.tensor, bias.tensor);
        Tensor loss = cross_entropy(arcface_logits(adapted, centers, targets, margins, anchor_head.config().scale),
                                    targets);
        batch_loss = loss.item();
        if (!std::isfinite(batch_loss)) throw Error(Errc::NonFiniteLoss, "adapter training produced a non-finite loss");
        backward(loss);
      }
      optimizer.step(params);
      zero_grads(params);
      loss_sum += batch_loss * static_cast<double>(end - begin);
    }
    rep.epoch_losses.push_back(loss_sum / static_cast<double>(train.size()));
  }

  rep.frozen_hash_after = parameter_hash(frozen);
  if (rep.frozen_hash_after != rep.frozen_hash_before) {
    throw Error(Errc::FreezeViolation, "member or anchor parameters changed while fitting the adapter");
  }
  return Adapter{weight.tensor.matrix().transpose(), Eigen::Map<const Eigen::VectorXd>(bias.tensor.values().data(), d)};
}

const char* ensemble_mode_name(EnsembleMode mode) {
  switch (mode) {
    case EnsembleMode::NaiveAverage: return "naive";
    case EnsembleMode::SharedHead: return "shared-head";
    case EnsembleMode::AdapterAligned: return "adapter";
  }
  return "?";
}

EnsembleMode parse_ensemble_mode(const std::string& name) {
  if (name == "naive") return EnsembleMode::NaiveAverage;
  if (name == "shared-head") return EnsembleMode::SharedHead;
  if (name == "adapter") return EnsembleMode::AdapterAligned;
  throw Error(Errc::InvalidConfig, "unknown ensemble mode '" + name + "' (expected naive, shared-head or adapter)");
}

EnsembleEvalReport ensemble_modes_eval(std::span<const MemberEmbeddings> members, EnsembleMode mode,
                                       std::span<const double> weights, const RetrievalEvalOptions& options) {
  if (members.empty()) throw Error(Errc::InvalidConfig, "ensemble needs at least one member");
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(members.size(), 1.0);

  if (mode == EnsembleMode::SharedHead) {
    for (const auto& m : members) {
      if (!m.head_hash || *m.head_hash != *members.front().head_hash) {
        throw Error(Errc::HeadNotShared, "member '" + m.id + "' was not trained against the anchor's head");
      }
    }
  }

  EnsembleEvalReport report;
  std::vector<EmbeddingSet> queries, index;
  for (const auto& m : members) {
    report.member_scores.push_back(evaluate_retrieval(m.queries, m.index, options).mean);
    if (mode == EnsembleMode::AdapterAligned && m.adapter) {
      queries.push_back(m.adapter->apply(m.queries));
      index.push_back(m.adapter->apply(m.index));
    } else {
      queries.push_back(m.queries);
      index.push_back(m.index);
    }
  }
  report.ensemble_score =
      evaluate_retrieval(average_embeddings(queries, w), average_embeddings(index, w), options).mean;
  return report;
}

std::uint64_t head_hash(const EmbedHead& head) { return parameter_hash(head.parameters()); }

}  // namespace embedkit
