#include <doctest.h>

#include <cmath>

#include "embedkit/ops.hpp"
#include "embedkit/train.hpp"
#include "test_util.hpp"

using namespace embedkit;
using embedkit::testing::error_code_of;

namespace {

ModelConfig tiny_model(int classes = 4) {
  ModelConfig m;
  m.vit = ViTConfig{.image_size = 16, .patch_size = 8, .embed_dim = 16, .depth = 1, .num_heads = 2};
  m.head.num_classes = classes;
  m.seed = 5;
  return m;
}

SyntheticDataset tiny_data(double sigma = 0.2) {
  return SyntheticDataset(
      SyntheticDatasetSpec{.num_classes = 4, .samples_per_class = 16, .image_size = 16, .noise_sigma = sigma, .seed = 2});
}

Parameter scalar_param(double value) {
  Tensor t = Tensor::scalar(value);
  t.set_requires_grad(true);
  return Parameter{"p", t, true};
}

void set_grad(Parameter& p, double g) {
  Tape tape;
  TapeScope scope(tape);
  backward(scale(p.tensor, g));
}

std::vector<const Parameter*> head_params(const EmbeddingModel& m) { return m.head().parameters(); }

}  // namespace

TEST_CASE("sgd scalar updates") {
  for (auto [wd, want] : {std::pair{0.0, 0.95}, std::pair{1.5e-4, 0.949985}}) {
    Parameter p = scalar_param(1.0);
    set_grad(p, 0.5);
    SgdOptimizer opt({0.1, 0.0, wd});
    std::vector<Parameter*> ps = {&p};
    opt.step(ps);
    CHECK(std::abs(p.tensor.item() - want) < 1e-15);
  }
}

TEST_CASE("sgd momentum unrolls to 2.9 g") {
  Parameter p = scalar_param(2.0);
  SgdOptimizer opt({0.1, 0.9, 0.0});
  std::vector<Parameter*> ps = {&p};
  for (int i = 0; i < 2; ++i) {
    p.tensor.zero_grad();
    set_grad(p, 0.5);
    opt.step(ps);
  }
  CHECK(std::abs(p.tensor.item() - (2.0 - 0.1 * 2.9 * 0.5)) < 1e-15);
  CHECK(opt.buffer("p")[0] == doctest::Approx(1.9 * 0.5));
}

TEST_CASE("sgd needs gradients and skips frozen parameters") {
  Parameter p = scalar_param(1.0);
  SgdOptimizer opt({0.1, 0.9, 0.0});
  std::vector<Parameter*> ps = {&p};
  CHECK(error_code_of([&] { opt.step(ps); }) == Errc::MissingGrad);
  set_grad(p, 1.0);
  opt.step(ps);
  CHECK(opt.has_buffer("p"));
  p.trainable = false;
  const double before = p.tensor.item();
  opt.step(ps);
  CHECK(p.tensor.item() == before);
  CHECK_FALSE(opt.has_buffer("p"));
}

TEST_CASE("globs and freeze masks") {
  CHECK(glob_match("head.*", "head.arcface.W"));
  CHECK_FALSE(glob_match("head.*", "backbone.norm.gamma"));
  CHECK(glob_match("backbone.blocks.?.attn.*", "backbone.blocks.1.attn.q.weight"));
  CHECK(glob_match("*", "anything"));

  EmbeddingModel model(tiny_model());
  auto params = model.parameters();
  auto mask = apply_freeze(params, {"head.*"});
  CHECK(mask.frozen == std::vector<std::string>{"head.projection.weight", "head.projection.bias", "head.arcface.W"});
  for (const Parameter* p : params) CHECK(p->trainable == (p->name.rfind("head.", 0) != 0));
  mask = apply_freeze(params, {});
  CHECK(mask.frozen.empty());
  CHECK(error_code_of([&] { apply_freeze(params, {"nothing.*"}); }) == Errc::UnmatchedGlob);
}

TEST_CASE("total freeze leaves every parameter untouched") {
  EmbeddingModel model(tiny_model());
  auto data = tiny_data();
  StageConfig stage{.name = "frozen", .epochs = 2, .resolution = 16, .frozen = {"*"}, .batch_size = 8};
  const auto before = parameter_hash(std::as_const(model).parameters());
  const auto report = run_stage(model, stage, data);
  CHECK(report.frozen_hash_before == report.frozen_hash_after);
  CHECK(parameter_hash(std::as_const(model).parameters()) == before);
}

TEST_CASE("head-only stage reduces loss and keeps the backbone") {
  EmbeddingModel model(tiny_model());
  auto data = tiny_data(0.1);
  StageConfig stage{.name = "head", .epochs = 5, .lr = 0.05, .resolution = 16, .frozen = {"backbone.*"},
                    .batch_size = 8, .seed = 3};
  const auto backbone_before = parameter_hash(model.backbone().parameters());
  const auto report = run_stage(model, stage, data);
  REQUIRE(report.epoch_losses.size() == 5u);
  CHECK(report.epoch_losses.back() < report.epoch_losses.front());
  CHECK(parameter_hash(model.backbone().parameters()) == backbone_before);
}

TEST_CASE("head-locked stage keeps class-center directions exactly") {
  EmbeddingModel model(tiny_model());
  auto data = tiny_data();
  const Eigen::MatrixXd before = class_center_directions(model.head());
  const auto hash_before = parameter_hash(head_params(model));
  StageConfig stage{.name = "body", .epochs = 1, .lr = 1e-2, .resolution = 16, .frozen = {"head.*"}, .batch_size = 8};
  run_stage(model, stage, data);
  CHECK(parameter_hash(head_params(model)) == hash_before);
  CHECK(class_center_directions(model.head()) == before);
}

TEST_CASE("training is deterministic") {
  auto data = tiny_data();
  StageConfig stage{.name = "all", .epochs = 2, .lr = 1e-2, .resolution = 16, .batch_size = 8, .seed = 11};
  EmbeddingModel a(tiny_model()), b(tiny_model());
  run_stage(a, stage, data);
  run_stage(b, stage, data);
  CHECK(parameter_hash(std::as_const(a).parameters()) == parameter_hash(std::as_const(b).parameters()));
}

TEST_CASE("plans switch resolution once and templates are wired") {
  auto data = tiny_data();
  DatasetRegistry reg{{"toy", &data}};
  RecipeConfig recipe{.head_epochs = 2, .backbone_epochs = 1, .batch_size = 8, .resolution = 16,
                      .resolution_steps = {{24, 0}, {24, 4}}};
  StagePlan plan = head_locked_plan(recipe);
  REQUIRE(plan.stages.size() == 4u);
  CHECK(plan.stages[0].frozen == std::vector<std::string>{"backbone.*"});
  CHECK(plan.stages[1].frozen == std::vector<std::string>{"head.*"});
  CHECK(plan.stages[2].epochs == 1);
  CHECK(plan.stages[2].lr == recipe.backbone_lr / 2);

  EmbeddingModel model(tiny_model());
  std::size_t hook_calls = 0;
  PlanHooks hooks{[&](std::size_t, const StageReport&, const EmbeddingModel&) { ++hook_calls; }};
  const auto reports = run_plan(model, plan, reg, hooks);
  CHECK(hook_calls == 4u);
  CHECK_FALSE(reports[0].pos_embed_resampled);
  CHECK_FALSE(reports[1].pos_embed_resampled);
  CHECK(reports[2].pos_embed_resampled);
  CHECK(reports[3].pos_embed_resampled);
  CHECK(model.config().vit.image_size == 24);
  CHECK(model.config().vit.overlap == 4);
  for (const auto& r : reports) {
    for (double l : r.epoch_losses) CHECK(std::isfinite(l));
  }

  const auto lpft = lp_ft_plan(recipe);
  CHECK(lpft.stages[1].frozen.empty());
  const auto split = split_lr_plan(recipe);
  REQUIRE(split.stages.size() == 1u);
  CHECK(split.stages[0].lr_scales[0].scale == doctest::Approx(10.0));
  recipe.lock_centers_only = true;
  CHECK(head_locked_plan(recipe).stages[1].frozen == std::vector<std::string>{"head.arcface.*"});
}

TEST_CASE("unchanged resolution keeps the positional table") {
  auto data = tiny_data();
  EmbeddingModel model(tiny_model());
  const Tensor pos = model.backbone().pos_embed().tensor.clone();
  StagePlan plan;
  plan.stages = {StageConfig{.name = "a", .resolution = 16, .frozen = {"backbone.pos_embed"}, .batch_size = 16},
                 StageConfig{.name = "b", .resolution = 16, .frozen = {"backbone.pos_embed"}, .batch_size = 16}};
  run_plan(model, plan, {{"toy", &data}});
  const Tensor after = model.backbone().pos_embed().tensor;
  for (Index i = 0; i < pos.numel(); ++i) CHECK(after[i] == pos[i]);
}

TEST_CASE("plan validation errors") {
  auto data = tiny_data();
  EmbeddingModel model(tiny_model());
  DatasetRegistry reg{{"toy", &data}};
  StagePlan plan;
  plan.stages = {StageConfig{.name = "x", .resolution = 16, .frozen = {"head.nope*"}}};
  CHECK(error_code_of([&] { run_plan(model, plan, reg); }) == Errc::UnmatchedGlob);
  plan.stages = {StageConfig{.name = "x", .resolution = 18}};
  CHECK(error_code_of([&] { run_plan(model, plan, reg); }) == Errc::NonConformingGrid);
  plan.stages = {StageConfig{.name = "x", .epochs = 0, .resolution = 16}};
  CHECK(error_code_of([&] { run_plan(model, plan, reg); }) == Errc::InvalidConfig);
  plan.stages = {StageConfig{.name = "x", .resolution = 16, .dataset = "missing"}};
  CHECK(error_code_of([&] { run_plan(model, plan, reg); }) == Errc::InvalidConfig);
}

TEST_CASE("diverging training raises NonFiniteLoss") {
  auto data = tiny_data();
  EmbeddingModel model(tiny_model());
  Tensor images = data.images(SplitKind::Train, 16).clone();
  images.mutable_values()[0] = std::nan("");
  data.set_images(SplitKind::Train, 16, images);
  StageConfig stage{.name = "boom", .epochs = 1, .resolution = 16, .batch_size = 64};
  CHECK(error_code_of([&] { run_stage(model, stage, data); }) == Errc::NonFiniteLoss);
}

TEST_CASE("dynamic margins use train-split counts") {
  SyntheticDataset data(SyntheticDatasetSpec{.num_classes = 4, .samples_per_class = 32,
                                             .profile = ImbalanceProfile::LongTail, .image_size = 16});
  ModelConfig cfg = tiny_model();
  cfg.head.margin.mode = MarginMode::Dynamic;
  EmbeddingModel model(cfg);
  const auto margins = stage_margins(model.head(), data);
  const auto counts = data.train_class_counts();
  const auto& s = cfg.head.margin;
  for (std::size_t c = 0; c < margins.size(); ++c) {
    const double want = std::clamp(s.a * std::pow(static_cast<double>(counts[c]), -s.lambda) + s.b, s.m_min, s.m_max);
    CHECK(margins[c] == want);
  }
  StageConfig stage{.name = "dyn", .epochs = 1, .resolution = 16, .batch_size = 8};
  CHECK_NOTHROW(run_stage(model, stage, data));
}
