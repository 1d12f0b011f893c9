#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "embedkit/head.hpp"
#include "embedkit/vit.hpp"

namespace embedkit {

struct ModelConfig {
  ViTConfig vit;
  HeadConfig head;
  std::uint64_t seed = 0;
};

/// Backbone g followed by head f: the full embedding model.
class EmbeddingModel {
 public:
  explicit EmbeddingModel(const ModelConfig& config);

  // Parameters are tensor handles; copying would alias them. Use clone().
  EmbeddingModel(const EmbeddingModel&) = delete;
  EmbeddingModel& operator=(const EmbeddingModel&) = delete;
  EmbeddingModel(EmbeddingModel&&) = default;
  EmbeddingModel& operator=(EmbeddingModel&&) = default;

  EmbeddingModel clone() const;

  // Current geometry is reflected in config().vit.
  ModelConfig config() const;

  ViTBackbone& backbone() { return backbone_; }
  const ViTBackbone& backbone() const { return backbone_; }
  EmbedHead& head() { return head_; }
  const EmbedHead& head() const { return head_; }

  Tensor embed(const Tensor& images, bool train_mode, std::mt19937_64& rng) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter* find(std::string_view name);

 private:
  std::uint64_t seed_;
  ViTBackbone backbone_;
  EmbedHead head_;
};

/// FNV-1a over bytes.
std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed = 14695981039346656037ull);

/// Order-sensitive hash over parameter names, shapes and raw value bits.
std::uint64_t parameter_hash(std::span<const Parameter* const> params);

}  // namespace embedkit
