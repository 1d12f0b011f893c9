#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "embedkit/dataset.hpp"
#include "embedkit/model.hpp"

namespace embedkit {

/// Multiplies the stage learning rate for parameters matching `glob`.
struct LrScale {
  std::string glob;
  double scale = 1.0;
};

struct StageConfig {
  std::string name = "stage";
  int epochs = 1;
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1.5e-4;
  int resolution = 32;
  int overlap = 0;
  std::vector<std::string> frozen;  // parameter-name globs
  std::string dataset;              // empty: the only registered dataset
  int batch_size = 32;
  std::uint64_t seed = 0;
  // Stop early once the epoch-mean loss improves by < 1e-4 (relative) for
  // two consecutive epochs.
  bool plateau = false;
  std::vector<LrScale> lr_scales;

  void validate() const;
};

struct StagePlan {
  int version = 1;
  std::vector<StageConfig> stages;

  void validate() const;
};

/// Shell-style match: `*` any run, `?` one character, `[...]` sets.
bool glob_match(std::string_view pattern, std::string_view name);

struct FreezeMask {
  std::vector<std::string> frozen;
  std::vector<std::string> trainable;
};

/// Marks every parameter matched by a glob non-trainable and every other
/// parameter trainable. Throws UnmatchedGlob when a glob matches nothing.
FreezeMask apply_freeze(std::span<Parameter* const> params, const std::vector<std::string>& globs);

void zero_grads(std::span<Parameter* const> params);

struct SgdHyper {
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1.5e-4;
};

/// SGD with momentum and L2 weight decay:
///   v <- momentum * v + (grad + weight_decay * theta)
///   theta <- theta - lr * v
/// Buffers exist only for parameters stepped while trainable.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdHyper hyper);

  const SgdHyper& hyper() const { return hyper_; }
  void set_lr_scale(const std::string& name, double scale) { lr_scale_[name] = scale; }

  /// Updates trainable parameters; frozen ones are skipped and their buffers
  /// retired. Throws MissingGrad if a trainable parameter has no gradient.
  void step(std::span<Parameter* const> params);
  void retire(const std::string& name) { buffers_.erase(name); }
  bool has_buffer(const std::string& name) const { return buffers_.count(name) != 0; }
  const std::vector<double>& buffer(const std::string& name) const { return buffers_.at(name); }

 private:
  SgdHyper hyper_;
  std::map<std::string, std::vector<double>> buffers_;
  std::map<std::string, double> lr_scale_;
};

struct StageReport {
  std::string name;
  std::vector<double> epoch_losses;
  double wall_seconds = 0.0;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
  FreezeMask mask;
  bool pos_embed_resampled = false;
  bool stopped_on_plateau = false;
};

using DatasetRegistry = std::map<std::string, const SyntheticDataset*>;

const SyntheticDataset& resolve_dataset(const DatasetRegistry& datasets, const std::string& id);

/// Class margins for a head on a dataset; dynamic schedules read the
/// dataset's train-split class counts.
std::vector<double> stage_margins(const EmbedHead& head, const SyntheticDataset& data);

/// Trains one stage: switches geometry if needed (resampling the positional
/// table), applies the freeze mask, then epochs of shuffled mini-batches of
/// forward / ArcFace loss / backward / SGD. Throws NonFiniteLoss on NaN/Inf
/// and FreezeViolation if a frozen parameter changed.
StageReport run_stage(EmbeddingModel& model, const StageConfig& stage, const SyntheticDataset& data);

struct PlanHooks {
  // Called after every stage, e.g. to persist a checkpoint.
  std::function<void(std::size_t stage_index, const StageReport&, const EmbeddingModel&)> on_stage_end;
};

std::vector<StageReport> run_plan(EmbeddingModel& model, const StagePlan& plan, const DatasetRegistry& datasets,
                                  const PlanHooks& hooks = {});

/// Knobs shared by the recipe templates below.
struct RecipeConfig {
  int head_epochs = 6;
  int backbone_epochs = 3;
  double head_lr = 1e-2;
  double backbone_lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1.5e-4;
  int batch_size = 32;
  std::uint64_t seed = 0;
  std::string dataset;
  int resolution = 32;
  int overlap = 0;
  // Extra (resolution, overlap) stages after the backbone stage.
  std::vector<std::pair<int, int>> resolution_steps;
  // Lock only the ArcFace centers instead of projection + centers.
  bool lock_centers_only = false;
  bool plateau = false;
};

/// Head stage (backbone frozen), then backbone stage (head frozen), then one
/// stage per resolution step at half the head-stage epochs and half the
/// backbone learning rate, head still frozen.
StagePlan head_locked_plan(const RecipeConfig& recipe);
/// Head stage, then every parameter unfrozen at the backbone learning rate.
StagePlan lp_ft_plan(const RecipeConfig& recipe);
/// Single all-trainable stage; head at head_lr, backbone at backbone_lr.
StagePlan split_lr_plan(const RecipeConfig& recipe);

}  // namespace embedkit
