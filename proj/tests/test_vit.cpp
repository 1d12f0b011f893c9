#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "embedkit/gradcheck.hpp"
#include "embedkit/ops.hpp"
#include "embedkit/vit.hpp"
#include "test_util.hpp"

using namespace embedkit;
using embedkit::testing::error_code_of;
using embedkit::testing::random_tensor;

namespace {

// Standard ViT tiling written directly as nested loops over disjoint tiles.
Tensor standard_patches(const Tensor& images, int patch) {
  const Index batch = images.dim(0), channels = images.dim(1), res = images.dim(2);
  const Index side = res / patch;
  Tensor out({batch, side * side, channels * patch * patch});
  auto dst = out.mutable_values();
  std::size_t k = 0;
  for (Index b = 0; b < batch; ++b)
    for (Index i = 0; i < side; ++i)
      for (Index j = 0; j < side; ++j)
        for (Index c = 0; c < channels; ++c)
          for (Index y = 0; y < patch; ++y)
            for (Index x = 0; x < patch; ++x)
              dst[k++] = images[((b * channels + c) * res + i * patch + y) * res + j * patch + x];
  return out;
}

Eigen::MatrixXd ln_rows(const Eigen::MatrixXd& x, const Parameter& g, const Parameter& b) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    for (Index j = 0; j < x.cols(); ++j) {
      out(r, j) = (x(r, j) - mu) / std::sqrt(var + 1e-6) * g.tensor[j] + b.tensor[j];
    }
  }
  return out;
}

Eigen::MatrixXd mat(const Parameter& p) { return p.tensor.matrix(); }
Eigen::RowVectorXd vec(const Parameter& p) { return p.tensor.matrix(); }

// Whole-network reference for one image, written with plain Eigen algebra.
Eigen::RowVectorXd reference_forward(ViTBackbone& model, const Eigen::MatrixXd& patches) {
  auto params = model.parameters();
  const auto& cfg = model.config();
  const Index d = cfg.embed_dim, heads = cfg.num_heads, hd = d / heads;
  const Index tokens = patches.rows() + 1;
  Eigen::MatrixXd x(tokens, d);
  x.row(0) = vec(*params[2]);
  x.bottomRows(patches.rows()) = (patches * mat(*params[0])).rowwise() + vec(*params[1]);
  x += Eigen::MatrixXd(mat(*params[3]));
  for (int blk = 0; blk < cfg.depth; ++blk) {
    EncoderBlock& b = model.block(static_cast<std::size_t>(blk));
    Eigen::MatrixXd h = ln_rows(x, b.norm1_gamma, b.norm1_beta);
    Eigen::MatrixXd q = (h * mat(b.q_weight)).rowwise() + vec(b.q_bias);
    Eigen::MatrixXd k = h * mat(b.k_weight);
    Eigen::MatrixXd v = (h * mat(b.v_weight)).rowwise() + vec(b.v_bias);
    Eigen::MatrixXd ctx(tokens, d);
    for (Index hh = 0; hh < heads; ++hh) {
      Eigen::MatrixXd s = q.middleCols(hh * hd, hd) * k.middleCols(hh * hd, hd).transpose() / std::sqrt(double(hd));
      for (Index r = 0; r < tokens; ++r) {
        s.row(r) = (s.row(r).array() - s.row(r).maxCoeff()).exp();
        s.row(r) /= s.row(r).sum();
      }
      ctx.middleCols(hh * hd, hd) = s * v.middleCols(hh * hd, hd);
    }
    x += (ctx * mat(b.proj_weight)).rowwise() + vec(b.proj_bias);
    Eigen::MatrixXd m = (ln_rows(x, b.norm2_gamma, b.norm2_beta) * mat(b.fc1_weight)).rowwise() + vec(b.fc1_bias);
    m = m.unaryExpr([](double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); });
    x += (m * mat(b.fc2_weight)).rowwise() + vec(b.fc2_bias);
  }
  Eigen::MatrixXd out = ln_rows(x, *params[params.size() - 2], *params[params.size() - 1]);
  return out.row(0);
}

}  // namespace

TEST_CASE("patch_grid geometry") {
  auto g = patch_grid(32, 8, 0);
  CHECK(g.side == 4);
  CHECK(g.stride == 8);
  g = patch_grid(32, 8, 4);
  CHECK(g.side == 7);
  CHECK(g.stride == 4);
  CHECK(error_code_of([] { patch_grid(290, 14, 4); }) == Errc::NonConformingGrid);
  CHECK(error_code_of([] { patch_grid(32, 8, 8); }) == Errc::NonConformingGrid);
  CHECK(error_code_of([] { patch_grid(4, 8, 0); }) == Errc::NonConformingGrid);
}

TEST_CASE("non-overlapping grid equals image_size / patch_size") {
  for (int p = 1; p <= 8; ++p) {
    for (int mult = 1; mult <= 6; ++mult) {
      CHECK(patch_grid(p * mult, p, 0).side == mult);
    }
  }
}

TEST_CASE("patch count grows with overlap") {
  const int res = 40, p = 8;
  int previous_side = 0;
  for (int v = 0; v < p; ++v) {
    if ((res - p) % (p - v) != 0) continue;
    const int side = patch_grid(res, p, v).side;
    CHECK(side > previous_side);
    previous_side = side;
  }
}

TEST_CASE("overlapping windows share pixels") {
  std::vector<double> px(16);
  for (int i = 0; i < 16; ++i) px[static_cast<std::size_t>(i)] = i + 1;
  Tensor image({1, 1, 4, 4}, px);
  Tensor patches = extract_patches(image, patch_grid(4, 2, 1));
  REQUIRE(patches.shape() == Shape{1, 9, 4});
  const std::vector<double> p00{1, 2, 5, 6}, p01{2, 3, 6, 7};
  for (Index k = 0; k < 4; ++k) {
    CHECK(patches[k] == p00[static_cast<std::size_t>(k)]);
    CHECK(patches[4 + k] == p01[static_cast<std::size_t>(k)]);
  }
  // last patch is the bottom-right window
  const std::vector<double> p22{11, 12, 15, 16};
  for (Index k = 0; k < 4; ++k) CHECK(patches[8 * 4 + k] == p22[static_cast<std::size_t>(k)]);
}

TEST_CASE("disjoint tiles reassemble the image") {
  std::mt19937_64 rng(4);
  Tensor images = random_tensor({2, 3, 12, 12}, rng);
  const auto grid = patch_grid(12, 4, 0);
  Tensor patches = extract_patches(images, grid);
  Tensor rebuilt({2, 3, 12, 12});
  auto dst = rebuilt.mutable_values();
  std::vector<int> hits(dst.size(), 0);
  for (Index b = 0; b < 2; ++b)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j)
        for (Index c = 0; c < 3; ++c)
          for (Index y = 0; y < 4; ++y)
            for (Index x = 0; x < 4; ++x) {
              const auto idx = static_cast<std::size_t>(((b * 3 + c) * 12 + i * 4 + y) * 12 + j * 4 + x);
              dst[idx] = patches[((b * 9 + i * 3 + j) * 3 + c) * 16 + y * 4 + x];
              ++hits[idx];
            }
  for (std::size_t k = 0; k < dst.size(); ++k) {
    CHECK(hits[k] == 1);
    CHECK(dst[k] == images[static_cast<Index>(k)]);
  }
}

TEST_CASE("extract_patches gradient through a linear map") {
  std::mt19937_64 rng(10);
  Parameter images{"images", random_tensor({2, 2, 8, 8}, rng, true)};
  const auto grid = patch_grid(8, 4, 2);
  Tensor w = random_tensor({2 * 16, 3}, rng);
  auto report = grad_check(
      [&] {
        Tensor p = extract_patches(images.tensor, grid);
        return sum(matmul(reshape(p, {p.dim(0) * p.dim(1), p.dim(2)}), w));
      },
      {images});
  CHECK(report.max_rel_error < 1e-5);
}

TEST_CASE("extract_patches rejects a grid built for another size") {
  Tensor images({1, 1, 16, 16});
  CHECK(error_code_of([&] { extract_patches(images, patch_grid(32, 8, 0)); }) == Errc::NonConformingGrid);
}

TEST_CASE("positional interpolation") {
  std::mt19937_64 rng(3);
  const auto g4 = patch_grid(32, 8, 0);
  Tensor table = random_tensor({17, 5}, rng);

  SUBCASE("unchanged grid is the identity") {
    Tensor out = interpolate_pos_embed(table, g4, g4);
    REQUIRE(out.shape() == table.shape());
    for (Index i = 0; i < table.numel(); ++i) CHECK(out[i] == table[i]);
  }
  SUBCASE("constants stay constant") {
    Tensor constant = Tensor::full({17, 5}, 0.37);
    Tensor out = interpolate_pos_embed(constant, g4, patch_grid(40, 8, 4));
    CHECK(out.shape() == Shape{82, 5});
    for (double v : out.values()) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
  }
  SUBCASE("class token row is copied") {
    Tensor out = interpolate_pos_embed(table, g4, patch_grid(40, 8, 0));
    for (Index j = 0; j < 5; ++j) CHECK(out[j] == table[j]);
  }
  SUBCASE("bilinear center of a 2x2 grid") {
    Tensor small({5, 1}, {9.0, 0.0, 1.0, 1.0, 2.0});
    Tensor out = interpolate_pos_embed(small, patch_grid(4, 2, 0), patch_grid(6, 2, 0));
    REQUIRE(out.shape() == Shape{10, 1});
    CHECK(out[0] == 9.0);
    CHECK(out[1 + 4] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out[1] == 0.0);
    CHECK(out[9] == 2.0);
  }
  CHECK_THROWS_AS(interpolate_pos_embed(table, patch_grid(40, 8, 0), g4), Error);
}

TEST_CASE("vit_forward shape and determinism") {
  ViTConfig cfg{.image_size = 16, .patch_size = 4, .overlap = 2, .embed_dim = 8, .depth = 1, .num_heads = 2};
  ViTBackbone model(cfg, 5);
  std::mt19937_64 rng(1);
  Tensor images = random_tensor({3, 1, 16, 16}, rng);
  Tensor a = model.forward(images);
  Tensor b = model.forward(images);
  CHECK(a.shape() == Shape{3, 8});
  for (Index i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  CHECK_THROWS_AS(model.forward(random_tensor({3, 1, 12, 12}, rng)), Error);
}

TEST_CASE("overlap-0 embedder reduces to standard patching") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ViTConfig cfg{.image_size = 8 * static_cast<int>(seed + 1),
                  .patch_size = 4 * static_cast<int>(1 + seed % 2),
                  .embed_dim = 8 * static_cast<int>(seed),
                  .depth = static_cast<int>(seed),
                  .num_heads = 2,
                  .in_channels = static_cast<int>(seed % 2 + 1)};
    if (cfg.image_size % cfg.patch_size != 0) cfg.image_size = cfg.patch_size * 4;
    ViTBackbone model(cfg, seed);
    std::mt19937_64 rng(seed);
    Tensor images = random_tensor({2, cfg.in_channels, cfg.image_size, cfg.image_size}, rng);
    Tensor ours = model.forward(images);
    Tensor reference = model.forward_patches(standard_patches(images, cfg.patch_size));
    for (Index i = 0; i < ours.numel(); ++i) REQUIRE(ours[i] == reference[i]);
  }
}

TEST_CASE("tape forward agrees with a plain Eigen reference") {
  ViTConfig cfg{.image_size = 12, .patch_size = 4, .overlap = 2, .embed_dim = 8, .depth = 2, .num_heads = 2};
  ViTBackbone model(cfg, 42);
  std::mt19937_64 rng(8);
  Tensor images = random_tensor({2, 1, 12, 12}, rng);
  Tensor out = model.forward(images);
  Tensor patches = extract_patches(images, model.grid());
  for (Index b = 0; b < 2; ++b) {
    Eigen::MatrixXd p(patches.dim(1), patches.dim(2));
    for (Index r = 0; r < p.rows(); ++r)
      for (Index c = 0; c < p.cols(); ++c) p(r, c) = patches[(b * p.rows() + r) * p.cols() + c];
    Eigen::RowVectorXd ref = reference_forward(model, p);
    for (Index j = 0; j < 8; ++j) CHECK(out[b * 8 + j] == doctest::Approx(ref(j)).epsilon(1e-12));
  }
}

TEST_CASE("batch permutation permutes outputs") {
  ViTConfig cfg{.image_size = 8, .patch_size = 4, .overlap = 0, .embed_dim = 8, .depth = 1, .num_heads = 2};
  ViTBackbone model(cfg, 9);
  std::mt19937_64 rng(2);
  Tensor images = random_tensor({3, 1, 8, 8}, rng);
  Tensor swapped({3, 1, 8, 8});
  const Index stride = 64;
  const std::array<Index, 3> order{2, 0, 1};
  for (Index i = 0; i < 3; ++i)
    for (Index k = 0; k < stride; ++k) swapped.mutable_values()[static_cast<std::size_t>(i * stride + k)] = images[order[i] * stride + k];
  Tensor a = model.forward(images), b = model.forward(swapped);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 8; ++j) CHECK(b[i * 8 + j] == a[order[i] * 8 + j]);
}

TEST_CASE("full backbone gradient check") {
  ViTConfig cfg{.image_size = 8, .patch_size = 4, .overlap = 2, .embed_dim = 16, .depth = 2, .num_heads = 2};
  ViTBackbone model(cfg, 17);
  std::mt19937_64 rng(4);
  Tensor images = random_tensor({2, 1, 8, 8}, rng);
  Tensor w = random_tensor({2, 16}, rng);
  std::vector<Parameter> params;
  for (Parameter* p : model.parameters()) params.push_back(*p);
  auto report = grad_check([&] { return sum(mul(model.forward(images), w)); }, params);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.entries.size() == params.size());
}

TEST_CASE("set_geometry resamples the table once per grid change") {
  ViTConfig cfg{.image_size = 32, .patch_size = 8, .overlap = 0, .embed_dim = 8, .depth = 1, .num_heads = 2};
  ViTBackbone model(cfg, 1);
  const std::vector<double> before(model.pos_embed().tensor.values().begin(), model.pos_embed().tensor.values().end());
  CHECK_FALSE(model.set_geometry(32, 0));
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(model.pos_embed().tensor[static_cast<Index>(i)] == before[i]);
  CHECK(model.set_geometry(40, 0));
  CHECK(model.pos_embed().tensor.dim(0) == 26);
  CHECK(model.set_geometry(40, 4));
  CHECK(model.pos_embed().tensor.dim(0) == 82);
  CHECK(model.grid().side == 9);
  CHECK(error_code_of([&] { model.set_geometry(41, 4); }) == Errc::NonConformingGrid);
  CHECK(model.grid().side == 9);
}

TEST_CASE("config validation") {
  ViTConfig cfg{.embed_dim = 10, .num_heads = 4};
  CHECK(error_code_of([&] { cfg.validate(); }) == Errc::InvalidConfig);
}
