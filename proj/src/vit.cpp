#include "embedkit/vit.hpp"

#include <cmath>
#include <random>
#include <string>

#include "embedkit/detail/op_support.hpp"
#include "embedkit/ops.hpp"

namespace embedkit {

using detail::grad_sink;

int ViTConfig::mlp_hidden() const {
  return static_cast<int>(std::lround(embed_dim * mlp_ratio));
}

void ViTConfig::validate() const {
  if (embed_dim < 1 || depth < 0 || num_heads < 1 || in_channels < 1 || mlp_hidden() < 1) {
    throw Error(Errc::InvalidConfig, "ViT dimensions must be positive");
  }
  if (embed_dim % num_heads != 0) {
    throw Error(Errc::InvalidConfig, "embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                                         std::to_string(num_heads));
  }
  patch_grid(image_size, patch_size, overlap);
}

PatchGrid patch_grid(int image_size, int patch_size, int overlap) {
  if (patch_size < 1 || overlap < 0 || overlap >= patch_size) {
    throw Error(Errc::NonConformingGrid, "overlap must satisfy 0 <= overlap < patch_size (patch " +
                                             std::to_string(patch_size) + ", overlap " + std::to_string(overlap) + ")");
  }
  if (image_size < patch_size) {
    throw Error(Errc::NonConformingGrid, "image size " + std::to_string(image_size) + " smaller than patch size " +
                                             std::to_string(patch_size));
  }
  const int stride = patch_size - overlap;
  if ((image_size - patch_size) % stride != 0) {
    throw Error(Errc::NonConformingGrid,
                "(" + std::to_string(image_size) + " - " + std::to_string(patch_size) + ") is not a multiple of stride " +
                    std::to_string(stride));
  }
  return PatchGrid{image_size, patch_size, overlap, stride, (image_size - patch_size) / stride + 1};
}

Tensor extract_patches(const Tensor& images, const PatchGrid& grid) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3)) {
    throw Error(Errc::ShapeMismatch, "images must be [B,C,R,R], got " + shape_str(images.shape()));
  }
  const PatchGrid check = patch_grid(static_cast<int>(images.dim(2)), grid.patch_size, grid.overlap);
  if (!(check == grid)) {
    throw Error(Errc::NonConformingGrid, "grid was built for image size " + std::to_string(grid.image_size) +
                                             ", images are " + std::to_string(images.dim(2)));
  }
  const Index batch = images.dim(0), channels = images.dim(1), res = images.dim(2);
  const Index p = grid.patch_size, stride = grid.stride, side = grid.side;
  const Index patch_dim = channels * p * p;
  const Index patches = side * side;

  // gather[k] = flat pixel offset within one image for output feature k.
  std::vector<Index> gather(static_cast<std::size_t>(patches * patch_dim));
  for (Index i = 0; i < side; ++i) {
    for (Index j = 0; j < side; ++j) {
      Index* dst = gather.data() + (i * side + j) * patch_dim;
      for (Index c = 0; c < channels; ++c) {
        for (Index dy = 0; dy < p; ++dy) {
          for (Index dx = 0; dx < p; ++dx) {
            *dst++ = (c * res + i * stride + dy) * res + j * stride + dx;
          }
        }
      }
    }
  }

  const Index image_numel = channels * res * res;
  std::vector<double> out_values(static_cast<std::size_t>(batch * patches * patch_dim));
  auto src = images.values();
  for (Index b = 0; b < batch; ++b) {
    const double* img = src.data() + b * image_numel;
    double* dst = out_values.data() + b * patches * patch_dim;
    for (std::size_t k = 0; k < gather.size(); ++k) dst[k] = img[gather[k]];
  }
  Tensor out = detail::make_output({batch, patches, patch_dim}, std::move(out_values), {&images});
  detail::record({images}, out,
                 [images, gather = std::move(gather), batch, image_numel](std::span<const double> g) {
                   auto d = grad_sink(images);
                   if (d.empty()) return;
                   const std::size_t per_image = gather.size();
                   for (Index b = 0; b < batch; ++b) {
                     double* img = d.data() + b * image_numel;
                     const double* gb = g.data() + static_cast<std::size_t>(b) * per_image;
                     for (std::size_t k = 0; k < per_image; ++k) img[gather[k]] += gb[k];
                   }
                 });
  return out;
}

Tensor interpolate_pos_embed(const Tensor& table, const PatchGrid& old_grid, const PatchGrid& new_grid) {
  const Index n = old_grid.side, m = new_grid.side;
  if (table.rank() != 2 || table.dim(0) != n * n + 1) {
    throw Error(Errc::ShapeMismatch, "positional table " + shape_str(table.shape()) + " does not match a " +
                                         std::to_string(n) + "x" + std::to_string(n) + " grid plus class token");
  }
  if (n == m) return table.detach();

  const Index width = table.dim(1);
  const ConstMatrixMap src = table.matrix();
  RowMatrixXd dst(m * m + 1, width);
  dst.row(0) = src.row(0);

  auto sample_coord = [&](Index i) {
    return m > 1 ? static_cast<double>(i) * static_cast<double>(n - 1) / static_cast<double>(m - 1) : 0.5 * (n - 1);
  };
  for (Index i = 0; i < m; ++i) {
    const double y = sample_coord(i);
    const Index y0 = std::min(static_cast<Index>(std::floor(y)), n - 1);
    const Index y1 = std::min(y0 + 1, n - 1);
    const double wy = y - static_cast<double>(y0);
    for (Index j = 0; j < m; ++j) {
      const double x = sample_coord(j);
      const Index x0 = std::min(static_cast<Index>(std::floor(x)), n - 1);
      const Index x1 = std::min(x0 + 1, n - 1);
      const double wx = x - static_cast<double>(x0);
      dst.row(1 + i * m + j) = (1.0 - wy) * ((1.0 - wx) * src.row(1 + y0 * n + x0) + wx * src.row(1 + y0 * n + x1)) +
                               wy * ((1.0 - wx) * src.row(1 + y1 * n + x0) + wx * src.row(1 + y1 * n + x1));
    }
  }
  return Tensor::from_matrix(dst);
}

std::vector<Parameter*> EncoderBlock::parameters() {
  return {&norm1_gamma, &norm1_beta, &q_weight, &q_bias,     &k_weight,   &v_weight,    &v_bias,   &proj_weight,
          &proj_bias,   &norm2_gamma, &norm2_beta, &fc1_weight, &fc1_bias, &fc2_weight, &fc2_bias};
}

namespace {

Tensor split_heads(const Tensor& x, Index batch, Index tokens, Index heads, Index head_dim) {
  return reshape(permute(reshape(x, {batch, tokens, heads, head_dim}), {0, 2, 1, 3}), {batch * heads, tokens, head_dim});
}

}  // namespace

Tensor self_attention(const Tensor& x, const EncoderBlock& block, int num_heads) {
  const Index batch = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  const Index heads = num_heads, head_dim = d / heads;
  Tensor q = linear(x, block.q_weight.tensor, block.q_bias.tensor);
  Tensor k = reshape(matmul(reshape(x, {batch * tokens, d}), block.k_weight.tensor), {batch, tokens, d});
  Tensor v = linear(x, block.v_weight.tensor, block.v_bias.tensor);

  Tensor scores = scale(bmm(split_heads(q, batch, tokens, heads, head_dim),
                            split_heads(k, batch, tokens, heads, head_dim), true),
                        1.0 / std::sqrt(static_cast<double>(head_dim)));
  Tensor attn = softmax(scores, -1);
  Tensor ctx = bmm(attn, split_heads(v, batch, tokens, heads, head_dim));
  Tensor merged = reshape(permute(reshape(ctx, {batch, heads, tokens, head_dim}), {0, 2, 1, 3}), {batch, tokens, d});
  return linear(merged, block.proj_weight.tensor, block.proj_bias.tensor);
}

Tensor encoder_block(const Tensor& x, const EncoderBlock& block, int num_heads) {
  Tensor h = add(x, self_attention(layer_norm(x, block.norm1_gamma.tensor, block.norm1_beta.tensor), block, num_heads));
  Tensor mlp = linear(gelu(linear(layer_norm(h, block.norm2_gamma.tensor, block.norm2_beta.tensor),
                                  block.fc1_weight.tensor, block.fc1_bias.tensor)),
                      block.fc2_weight.tensor, block.fc2_bias.tensor);
  return add(h, mlp);
}

namespace {

Parameter normal_param(std::string name, Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape), true);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.mutable_values()) v = dist(rng);
  return Parameter{std::move(name), t, true};
}

Parameter constant_param(std::string name, Shape shape, double value) {
  return Parameter{std::move(name), Tensor::full(std::move(shape), value, true), true};
}

}  // namespace

ViTBackbone::ViTBackbone(const ViTConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  grid_ = patch_grid(config_.image_size, config_.patch_size, config_.overlap);
  std::mt19937_64 rng(seed);
  const Index d = config_.embed_dim;
  const Index hidden = config_.mlp_hidden();
  const Index patch_dim = grid_.patch_dim(config_.in_channels);
  auto fan_in = [](Index n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  patch_weight_ = normal_param("backbone.patch_embed.weight", {patch_dim, d}, fan_in(patch_dim), rng);
  patch_bias_ = constant_param("backbone.patch_embed.bias", {d}, 0.0);
  cls_token_ = normal_param("backbone.cls_token", {d}, 0.02, rng);
  pos_embed_ = normal_param("backbone.pos_embed", {grid_.num_patches() + 1, d}, 0.02, rng);

  for (int i = 0; i < config_.depth; ++i) {
    const std::string prefix = "backbone.blocks." + std::to_string(i) + ".";
    EncoderBlock b;
    b.norm1_gamma = constant_param(prefix + "norm1.gamma", {d}, 1.0);
    b.norm1_beta = constant_param(prefix + "norm1.beta", {d}, 0.0);
    b.q_weight = normal_param(prefix + "attn.q.weight", {d, d}, fan_in(d), rng);
    b.q_bias = constant_param(prefix + "attn.q.bias", {d}, 0.0);
    b.k_weight = normal_param(prefix + "attn.k.weight", {d, d}, fan_in(d), rng);
    b.v_weight = normal_param(prefix + "attn.v.weight", {d, d}, fan_in(d), rng);
    b.v_bias = constant_param(prefix + "attn.v.bias", {d}, 0.0);
    b.proj_weight = normal_param(prefix + "attn.proj.weight", {d, d}, fan_in(d), rng);
    b.proj_bias = constant_param(prefix + "attn.proj.bias", {d}, 0.0);
    b.norm2_gamma = constant_param(prefix + "norm2.gamma", {d}, 1.0);
    b.norm2_beta = constant_param(prefix + "norm2.beta", {d}, 0.0);
    b.fc1_weight = normal_param(prefix + "mlp.fc1.weight", {d, hidden}, fan_in(d), rng);
    b.fc1_bias = constant_param(prefix + "mlp.fc1.bias", {hidden}, 0.0);
    b.fc2_weight = normal_param(prefix + "mlp.fc2.weight", {hidden, d}, fan_in(hidden), rng);
    b.fc2_bias = constant_param(prefix + "mlp.fc2.bias", {d}, 0.0);
    blocks_.push_back(std::move(b));
  }
  norm_gamma_ = constant_param("backbone.norm.gamma", {d}, 1.0);
  norm_beta_ = constant_param("backbone.norm.beta", {d}, 0.0);
}

Tensor ViTBackbone::forward(const Tensor& images, bool /*train_mode*/) const {
  if (images.rank() != 4 || images.dim(1) != config_.in_channels || images.dim(2) != config_.image_size ||
      images.dim(3) != config_.image_size) {
    throw Error(Errc::ShapeMismatch, "backbone expects [B," + std::to_string(config_.in_channels) + "," +
                                         std::to_string(config_.image_size) + "," + std::to_string(config_.image_size) +
                                         "] images, got " + shape_str(images.shape()));
  }
  return forward_patches(extract_patches(images, grid_));
}

Tensor ViTBackbone::forward_patches(const Tensor& patch_rows) const {
  if (patch_rows.rank() != 3 || patch_rows.dim(1) != grid_.num_patches() ||
      patch_rows.dim(2) != grid_.patch_dim(config_.in_channels)) {
    throw Error(Errc::ShapeMismatch, "patch rows " + shape_str(patch_rows.shape()) + " do not match the patch grid");
  }
  Tensor tokens = linear(patch_rows, patch_weight_.tensor, patch_bias_.tensor);
  Tensor x = add_broadcast(prepend_token(tokens, cls_token_.tensor), pos_embed_.tensor);
  for (const auto& block : blocks_) x = encoder_block(x, block, config_.num_heads);
  x = layer_norm(x, norm_gamma_.tensor, norm_beta_.tensor);
  return select_token(x, 0);
}

bool ViTBackbone::set_geometry(int image_size, int overlap) {
  const PatchGrid next = patch_grid(image_size, config_.patch_size, overlap);
  bool resampled = false;
  if (next.side != grid_.side) {
    Tensor table = interpolate_pos_embed(pos_embed_.tensor, grid_, next);
    table.set_requires_grad(pos_embed_.tensor.requires_grad());
    pos_embed_.tensor = table;
    resampled = true;
  }
  grid_ = next;
  config_.image_size = image_size;
  config_.overlap = overlap;
  return resampled;
}

std::vector<Parameter*> ViTBackbone::parameters() {
  std::vector<Parameter*> out{&patch_weight_, &patch_bias_, &cls_token_, &pos_embed_};
  for (auto& block : blocks_) {
    for (Parameter* p : block.parameters()) out.push_back(p);
  }
  out.push_back(&norm_gamma_);
  out.push_back(&norm_beta_);
  return out;
}

std::vector<const Parameter*> ViTBackbone::parameters() const {
  auto mutable_params = const_cast<ViTBackbone*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

}  // namespace embedkit
