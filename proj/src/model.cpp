#include "embedkit/model.hpp"

#include <cstring>

namespace embedkit {

EmbeddingModel::EmbeddingModel(const ModelConfig& config)
    : seed_(config.seed),
      backbone_(config.vit, config.seed),
      head_(config.vit.embed_dim, config.head, config.seed ^ 0x9e3779b97f4a7c15ull) {}

EmbeddingModel EmbeddingModel::clone() const {
  EmbeddingModel copy(config());
  auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->tensor = src[i]->tensor.clone();
    dst[i]->trainable = src[i]->trainable;
  }
  return copy;
}

ModelConfig EmbeddingModel::config() const {
  return ModelConfig{backbone_.config(), head_.config(), seed_};
}

Tensor EmbeddingModel::embed(const Tensor& images, bool train_mode, std::mt19937_64& rng) const {
  return head_.embed(backbone_.forward(images, train_mode), train_mode, rng);
}

std::vector<Parameter*> EmbeddingModel::parameters() {
  auto out = backbone_.parameters();
  for (Parameter* p : head_.parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> EmbeddingModel::parameters() const {
  auto out = backbone_.parameters();
  for (const Parameter* p : head_.parameters()) out.push_back(p);
  return out;
}

Parameter* EmbeddingModel::find(std::string_view name) {
  for (Parameter* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t parameter_hash(std::span<const Parameter* const> params) {
  std::uint64_t h = 14695981039346656037ull;
  for (const Parameter* p : params) {
    h = fnv1a({reinterpret_cast<const unsigned char*>(p->name.data()), p->name.size()}, h);
    const auto& shape = p->tensor.shape();
    h = fnv1a({reinterpret_cast<const unsigned char*>(shape.data()), shape.size() * sizeof(Index)}, h);
    auto values = p->tensor.values();
    h = fnv1a({reinterpret_cast<const unsigned char*>(values.data()), values.size() * sizeof(double)}, h);
  }
  return h;
}

}  // namespace embedkit
