#include "embedkit/train.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "embedkit/ops.hpp"

namespace embedkit {

void StageConfig::validate() const {
  if (epochs < 1) throw Error(Errc::InvalidConfig, "stage '" + name + "': epochs must be >= 1");
  if (!(lr > 0.0)) throw Error(Errc::InvalidConfig, "stage '" + name + "': lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw Error(Errc::InvalidConfig, "stage '" + name + "': momentum must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw Error(Errc::InvalidConfig, "stage '" + name + "': weight_decay must be >= 0");
  if (batch_size < 1) throw Error(Errc::InvalidConfig, "stage '" + name + "': batch_size must be >= 1");
  for (const auto& s : lr_scales) {
    if (!(s.scale > 0.0)) throw Error(Errc::InvalidConfig, "stage '" + name + "': lr scale must be > 0");
  }
}

void StagePlan::validate() const {
  if (version != 1) throw Error(Errc::InvalidConfig, "unsupported plan version " + std::to_string(version));
  if (stages.empty()) throw Error(Errc::InvalidConfig, "plan has no stages");
  for (const auto& s : stages) s.validate();
}

bool glob_match(std::string_view pattern, std::string_view name) {
  const std::string p(pattern), n(name);
  return ::fnmatch(p.c_str(), n.c_str(), 0) == 0;
}

FreezeMask apply_freeze(std::span<Parameter* const> params, const std::vector<std::string>& globs) {
  for (const auto& glob : globs) {
    const bool matched = std::any_of(params.begin(), params.end(), [&](const Parameter* p) {
      return glob_match(glob, p->name);
    });
    if (!matched) throw Error(Errc::UnmatchedGlob, "frozen glob '" + glob + "' matches no parameter");
  }
  FreezeMask mask;
  for (Parameter* p : params) {
    const bool frozen = std::any_of(globs.begin(), globs.end(), [&](const std::string& g) {
      return glob_match(g, p->name);
    });
    p->trainable = !frozen;
    p->tensor.set_requires_grad(!frozen);
    (frozen ? mask.frozen : mask.trainable).push_back(p->name);
  }
  return mask;
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->tensor.zero_grad();
}

SgdOptimizer::SgdOptimizer(SgdHyper hyper) : hyper_(hyper) {
  if (!(hyper.lr > 0.0) || !(hyper.momentum >= 0.0 && hyper.momentum < 1.0) || !(hyper.weight_decay >= 0.0)) {
    throw Error(Errc::InvalidConfig, "SGD needs lr > 0, 0 <= momentum < 1, weight_decay >= 0");
  }
}

void SgdOptimizer::step(std::span<Parameter* const> params) {
  for (const Parameter* p : params) {
    if (p->trainable && !p->tensor.has_grad()) {
      throw Error(Errc::MissingGrad, "trainable parameter '" + p->name + "' has no gradient");
    }
  }
  for (Parameter* p : params) {
    if (!p->trainable) {
      retire(p->name);
      continue;
    }
    auto values = p->tensor.mutable_values();
    auto grad = p->tensor.grad();
    auto& v = buffers_[p->name];
    if (v.size() != values.size()) v.assign(values.size(), 0.0);
    const auto scale_it = lr_scale_.find(p->name);
    const double lr = hyper_.lr * (scale_it == lr_scale_.end() ? 1.0 : scale_it->second);
    for (std::size_t i = 0; i < values.size(); ++i) {
      v[i] = hyper_.momentum * v[i] + (grad[i] + hyper_.weight_decay * values[i]);
      values[i] -= lr * v[i];
    }
  }
}

const SyntheticDataset& resolve_dataset(const DatasetRegistry& datasets, const std::string& id) {
  if (id.empty()) {
    if (datasets.size() == 1) return *datasets.begin()->second;
    throw Error(Errc::InvalidConfig, "stage names no dataset and " + std::to_string(datasets.size()) +
                                         " datasets are registered");
  }
  auto it = datasets.find(id);
  if (it == datasets.end()) throw Error(Errc::InvalidConfig, "unknown dataset '" + id + "'");
  return *it->second;
}

std::vector<double> stage_margins(const EmbedHead& head, const SyntheticDataset& data) {
  MarginSchedule schedule = head.config().margin;
  if (schedule.mode == MarginMode::Dynamic) schedule.class_counts = data.train_class_counts();
  return dynamic_margins(schedule, head.num_classes());
}

namespace {

std::vector<const Parameter*> select(const std::vector<Parameter*>& params, const std::vector<std::string>& names) {
  std::vector<const Parameter*> out;
  for (const Parameter* p : params) {
    if (std::find(names.begin(), names.end(), p->name) != names.end()) out.push_back(p);
  }
  return out;
}

}  // namespace

StageReport run_stage(EmbeddingModel& model, const StageConfig& stage, const SyntheticDataset& data) {
  stage.validate();
  const auto start = std::chrono::steady_clock::now();
  if (data.spec().num_classes != model.head().num_classes()) {
    throw Error(Errc::InvalidConfig, "dataset has " + std::to_string(data.spec().num_classes) + " classes, head has " +
                                         std::to_string(model.head().num_classes()));
  }
  if (data.spec().channels != model.backbone().config().in_channels) {
    throw Error(Errc::InvalidConfig, "dataset channels differ from backbone in_channels");
  }

  StageReport report;
  report.name = stage.name;
  const auto& vit = model.backbone().config();
  if (vit.image_size != stage.resolution || vit.overlap != stage.overlap) {
    report.pos_embed_resampled = model.backbone().set_geometry(stage.resolution, stage.overlap);
  }

  auto params = model.parameters();
  report.mask = apply_freeze(params, stage.frozen);
  const auto frozen = select(params, report.mask.frozen);
  report.frozen_hash_before = parameter_hash(frozen);

  SgdOptimizer optimizer({stage.lr, stage.momentum, stage.weight_decay});
  for (const Parameter* p : params) {
    double scale_factor = 1.0;
    for (const auto& s : stage.lr_scales) {
      if (glob_match(s.glob, p->name)) scale_factor = s.scale;
    }
    if (scale_factor != 1.0) optimizer.set_lr_scale(p->name, scale_factor);
  }

  const auto margins = stage_margins(model.head(), data);
  const DatasetSplit& train = data.split(SplitKind::Train);
  const Index n = train.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::mt19937_64 shuffle_rng(stage.seed);
  std::mt19937_64 dropout_rng(stage.seed ^ 0xd1b54a32d192ed03ull);
  zero_grads(params);

  int flat_epochs = 0;
  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    Index seen = 0;
    for (Index begin = 0; begin < n; begin += stage.batch_size) {
      const Index end = std::min(n, begin + stage.batch_size);
      std::vector<Index> positions(order.begin() + begin, order.begin() + end);
      std::vector<int> targets;
      targets.reserve(positions.size());
      for (Index pos : positions) targets.push_back(train.labels[static_cast<std::size_t>(pos)]);
      Tensor images = data.batch(SplitKind::Train, stage.resolution, positions);

      double batch_loss = 0.0;
      {
        Tape tape;
        TapeScope scope(tape);
        Tensor emb = model.embed(images, true, dropout_rng);
        Tensor loss = model.head().loss(emb, targets, margins);
        batch_loss = loss.item();
        if (!std::isfinite(batch_loss)) {
          throw Error(Errc::NonFiniteLoss, "stage '" + stage.name + "' epoch " + std::to_string(epoch + 1) +
                                               " produced a non-finite loss");
        }
        backward(loss);
      }
      optimizer.step(params);
      zero_grads(params);
      loss_sum += batch_loss * static_cast<double>(end - begin);
      seen += end - begin;
    }
    const double epoch_loss = loss_sum / static_cast<double>(seen);
    if (stage.plateau && !report.epoch_losses.empty()) {
      const double prev = report.epoch_losses.back();
      const double improvement = (prev - epoch_loss) / std::max(std::abs(prev), 1e-12);
      flat_epochs = improvement < 1e-4 ? flat_epochs + 1 : 0;
    }
    report.epoch_losses.push_back(epoch_loss);
    if (stage.plateau && flat_epochs >= 2) {
      report.stopped_on_plateau = true;
      break;
    }
  }

  report.frozen_hash_after = parameter_hash(frozen);
  if (report.frozen_hash_after != report.frozen_hash_before) {
    throw Error(Errc::FreezeViolation, "frozen parameters changed during stage '" + stage.name + "'");
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::vector<StageReport> run_plan(EmbeddingModel& model, const StagePlan& plan, const DatasetRegistry& datasets,
                                  const PlanHooks& hooks) {
  plan.validate();
  // Resolve everything up front so a bad plan fails before any training.
  std::vector<const SyntheticDataset*> resolved;
  for (const auto& stage : plan.stages) {
    resolved.push_back(&resolve_dataset(datasets, stage.dataset));
    patch_grid(stage.resolution, model.backbone().config().patch_size, stage.overlap);
    auto params = model.parameters();
    for (const auto& glob : stage.frozen) {
      if (std::none_of(params.begin(), params.end(), [&](const Parameter* p) { return glob_match(glob, p->name); })) {
        throw Error(Errc::UnmatchedGlob, "stage '" + stage.name + "': frozen glob '" + glob + "' matches no parameter");
      }
    }
  }
  std::vector<StageReport> reports;
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    reports.push_back(run_stage(model, plan.stages[i], *resolved[i]));
    if (hooks.on_stage_end) hooks.on_stage_end(i, reports.back(), model);
  }
  return reports;
}

namespace {

StageConfig base_stage(const RecipeConfig& r, std::string name, int epochs, double lr, std::uint64_t seed_offset) {
  StageConfig s;
  s.name = std::move(name);
  s.epochs = epochs;
  s.lr = lr;
  s.momentum = r.momentum;
  s.weight_decay = r.weight_decay;
  s.resolution = r.resolution;
  s.overlap = r.overlap;
  s.dataset = r.dataset;
  s.batch_size = r.batch_size;
  s.seed = r.seed * 1000 + seed_offset;
  s.plateau = r.plateau;
  return s;
}

}  // namespace

StagePlan head_locked_plan(const RecipeConfig& r) {
  StagePlan plan;
  StageConfig head = base_stage(r, "head", r.head_epochs, r.head_lr, 1);
  head.frozen = {"backbone.*"};
  plan.stages.push_back(head);

  const std::vector<std::string> lock =
      r.lock_centers_only ? std::vector<std::string>{"head.arcface.*"} : std::vector<std::string>{"head.*"};
  StageConfig body = base_stage(r, "backbone", r.backbone_epochs, r.backbone_lr, 2);
  body.frozen = lock;
  body.plateau = false;
  plan.stages.push_back(body);

  std::uint64_t offset = 3;
  for (const auto& [resolution, overlap] : r.resolution_steps) {
    StageConfig s = base_stage(r, "res" + std::to_string(resolution) + "v" + std::to_string(overlap),
                               std::max(1, r.head_epochs / 2), r.backbone_lr / 2.0, offset++);
    s.resolution = resolution;
    s.overlap = overlap;
    s.frozen = lock;
    s.plateau = false;
    plan.stages.push_back(s);
  }
  return plan;
}

StagePlan lp_ft_plan(const RecipeConfig& r) {
  StagePlan plan;
  StageConfig head = base_stage(r, "linear-probe", r.head_epochs, r.head_lr, 1);
  head.frozen = {"backbone.*"};
  plan.stages.push_back(head);
  StageConfig full = base_stage(r, "full-finetune", r.backbone_epochs, r.backbone_lr, 2);
  full.plateau = false;
  plan.stages.push_back(full);
  return plan;
}

StagePlan split_lr_plan(const RecipeConfig& r) {
  StagePlan plan;
  StageConfig s = base_stage(r, "split-lr", r.head_epochs + r.backbone_epochs, r.backbone_lr, 1);
  s.lr_scales = {{"head.*", r.head_lr / r.backbone_lr}};
  plan.stages.push_back(s);
  return plan;
}

}  // namespace embedkit
