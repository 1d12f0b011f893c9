#pragma once

#include <cstdint>
#include <vector>

#include "embedkit/tensor.hpp"

namespace embedkit {

struct ViTConfig {
  int image_size = 32;
  int patch_size = 8;
  int overlap = 0;
  int embed_dim = 32;
  int depth = 2;
  int num_heads = 4;
  double mlp_ratio = 2.0;
  int in_channels = 1;

  int mlp_hidden() const;
  // Throws InvalidConfig / NonConformingGrid.
  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

/// Patch layout of a square image tiled by a sliding window of stride
/// patch_size - overlap.
struct PatchGrid {
  int image_size = 0;
  int patch_size = 0;
  int overlap = 0;
  int stride = 0;
  int side = 0;

  Index num_patches() const { return static_cast<Index>(side) * side; }
  Index patch_dim(int channels) const { return static_cast<Index>(channels) * patch_size * patch_size; }
  bool operator==(const PatchGrid&) const = default;
};

PatchGrid patch_grid(int image_size, int patch_size, int overlap);

/// [B,C,R,R] images -> [B, side^2, C*P*P] patch rows in raster order. Patch
/// (i,j) covers rows [i*S, i*S+P) and columns [j*S, j*S+P); features are
/// ordered channel, row, column.
Tensor extract_patches(const Tensor& images, const PatchGrid& grid);

/// Resamples the grid rows of a positional table (row 0 is the class token)
/// from old_grid.side^2 to new_grid.side^2 with bilinear interpolation on
/// corner-aligned sample points. The class-token row is copied unchanged.
Tensor interpolate_pos_embed(const Tensor& table, const PatchGrid& old_grid, const PatchGrid& new_grid);

struct EncoderBlock {
  Parameter norm1_gamma, norm1_beta;
  Parameter q_weight, q_bias;
  Parameter k_weight;  // a key bias shifts every score in a row equally and is omitted
  Parameter v_weight, v_bias;
  Parameter proj_weight, proj_bias;
  Parameter norm2_gamma, norm2_beta;
  Parameter fc1_weight, fc1_bias;
  Parameter fc2_weight, fc2_bias;

  std::vector<Parameter*> parameters();
};

// Multi-head self-attention over [B,T,D] (no residual, no norm).
Tensor self_attention(const Tensor& x, const EncoderBlock& block, int num_heads);
// Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(.)).
Tensor encoder_block(const Tensor& x, const EncoderBlock& block, int num_heads);

/// Miniature ViT feature extractor. Output is the final-normed class token.
class ViTBackbone {
 public:
  ViTBackbone(const ViTConfig& config, std::uint64_t seed);

  const ViTConfig& config() const { return config_; }
  const PatchGrid& grid() const { return grid_; }
  Index output_dim() const { return config_.embed_dim; }

  Tensor forward(const Tensor& images, bool train_mode = false) const;
  // Trunk shared by every patching route: [B, N, C*P*P] patch rows -> [B, D].
  Tensor forward_patches(const Tensor& patch_rows) const;

  /// Switches resolution and/or overlap; the positional table is resampled
  /// once if the patch side changes. Returns whether it was resampled.
  bool set_geometry(int image_size, int overlap);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  EncoderBlock& block(std::size_t i) { return blocks_[i]; }
  const Parameter& pos_embed() const { return pos_embed_; }

 private:
  ViTConfig config_;
  PatchGrid grid_;
  Parameter patch_weight_, patch_bias_;
  Parameter cls_token_;
  Parameter pos_embed_;
  std::vector<EncoderBlock> blocks_;
  Parameter norm_gamma_, norm_beta_;
};

}  // namespace embedkit
