#include "embedkit/gradsuite.hpp"

#include <random>

#include "embedkit/head.hpp"
#include "embedkit/ops.hpp"
#include "embedkit/vit.hpp"

namespace embedkit {

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad, double stddev = 1.0) {
  Tensor t(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.mutable_values()) v = dist(rng);
  return t;
}

Parameter leaf(std::string name, Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  return Parameter{std::move(name), random_tensor(std::move(shape), rng, true, stddev), true};
}

struct Case {
  const char* module;
  const char* name;
  GradCheckReport (*run)(std::mt19937_64&);
};

GradCheckReport check_matmul(std::mt19937_64& rng) {
  auto a = leaf("a", {4, 5}, rng), b = leaf("b", {5, 3}, rng);
  Tensor w = random_tensor({4, 3}, rng, false);
  return grad_check([&] { return sum(mul(matmul(a.tensor, b.tensor), w)); }, {a, b});
}

GradCheckReport check_layer_norm(std::mt19937_64& rng) {
  auto x = leaf("x", {3, 6}, rng), gamma = leaf("gamma", {6}, rng), beta = leaf("beta", {6}, rng);
  Tensor w = random_tensor({3, 6}, rng, false);
  return grad_check([&] { return sum(mul(layer_norm(x.tensor, gamma.tensor, beta.tensor), w)); }, {x, gamma, beta});
}

GradCheckReport check_softmax(std::mt19937_64& rng) {
  auto x = leaf("x", {3, 7}, rng);
  Tensor w = random_tensor({3, 7}, rng, false);
  return grad_check([&] { return sum(mul(softmax(x.tensor, -1), w)); }, {x});
}

GradCheckReport check_attention_block(std::mt19937_64& rng) {
  ViTConfig cfg{.image_size = 8, .patch_size = 4, .embed_dim = 8, .depth = 1, .num_heads = 2};
  ViTBackbone model(cfg, rng());
  auto x = leaf("x", {2, 5, 8}, rng);
  Tensor w = random_tensor({2, 5, 8}, rng, false);
  std::vector<Parameter> params = {x};
  for (Parameter* p : model.block(0).parameters()) params.push_back(*p);
  const EncoderBlock& block = model.block(0);
  return grad_check([&] { return sum(mul(encoder_block(x.tensor, block, cfg.num_heads), w)); }, params);
}

GradCheckReport check_patch_embed(std::mt19937_64& rng) {
  const PatchGrid grid = patch_grid(10, 4, 1);
  auto images = leaf("images", {2, 2, 10, 10}, rng);
  auto weight = leaf("weight", {grid.patch_dim(2), 3}, rng, 0.3);
  auto bias = leaf("bias", {3}, rng);
  Tensor w = random_tensor({2, grid.num_patches(), 3}, rng, false);
  return grad_check([&] { return sum(mul(linear(extract_patches(images.tensor, grid), weight.tensor, bias.tensor), w)); },
                    {images, weight, bias});
}

GradCheckReport check_projection(std::mt19937_64& rng) {
  auto x = leaf("features", {4, 6}, rng);
  auto weight = leaf("weight", {6, kEmbeddingDim}, rng, 0.4);
  auto bias = leaf("bias", {kEmbeddingDim}, rng, 0.1);
  Tensor w = random_tensor({4, kEmbeddingDim}, rng, false);
  return grad_check([&] { return sum(mul(l2_normalize(linear(x.tensor, weight.tensor, bias.tensor), 1), w)); },
                    {x, weight, bias});
}

GradCheckReport check_arcface(std::mt19937_64& rng) {
  const Index classes = 5;
  auto emb = leaf("embeddings", {6, kEmbeddingDim}, rng);
  auto centers = leaf("centers", {kEmbeddingDim, classes}, rng);
  std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
  std::vector<int> targets;
  for (int i = 0; i < 6; ++i) targets.push_back(label(rng));
  const std::vector<double> margins(classes, 0.3);
  // A moderate scale keeps the softmax unsaturated so no gradient is exactly zero.
  return grad_check([&] { return cross_entropy(arcface_logits(emb.tensor, centers.tensor, targets, margins, 4.0), targets); },
                    {emb, centers});
}

constexpr Case kCases[] = {
    {"vit", "matmul", check_matmul},
    {"vit", "layer_norm", check_layer_norm},
    {"vit", "softmax", check_softmax},
    {"vit", "attention_block", check_attention_block},
    {"vit", "overlapping_patch_embed", check_patch_embed},
    {"head", "projection", check_projection},
    {"head", "arcface_loss", check_arcface},
};

}  // namespace

std::vector<SuiteResult> run_gradient_suite(const std::string& module, int seeds) {
  if (module != "all" && module != "vit" && module != "head") {
    throw Error(Errc::InvalidConfig, "unknown gradcheck module '" + module + "' (expected all, vit or head)");
  }
  std::vector<SuiteResult> out;
  for (const Case& c : kCases) {
    if (module != "all" && module != c.module) continue;
    for (int seed = 0; seed < seeds; ++seed) {
      std::mt19937_64 rng(0x5eed0000ull + static_cast<std::uint64_t>(seed));
      out.push_back(SuiteResult{c.module, c.name, static_cast<std::uint64_t>(seed), c.run(rng).max_rel_error});
    }
  }
  return out;
}

}  // namespace embedkit
