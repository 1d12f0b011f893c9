#pragma once

#include <filesystem>
#include <string>

#include "embedkit/dataset.hpp"
#include "embedkit/ensemble.hpp"
#include "embedkit/model.hpp"
#include "embedkit/retrieval.hpp"

namespace embedkit {

/// EMB1 layout, little-endian:
///   "EMB1" | u32 N | u32 dim (= 64) | N x { u64 id | u32 label | dim x f32 }
void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path);
EmbeddingSet load_embeddings(const std::filesystem::path& path);

/// EKCP layout, little-endian:
///   "EKCP" | u32 version | u32 len | model config JSON | u32 count |
///   count x { u32 len | name | u32 rank | rank x u64 dims | u8 trainable | f64 values } |
///   u64 FNV-1a of every preceding byte
void save_checkpoint(const EmbeddingModel& model, const std::filesystem::path& path);
EmbeddingModel load_checkpoint(const std::filesystem::path& path);

/// EKAD layout: "EKAD" | u32 dim | dim*dim f64 A (row-major) | dim f64 b | u64 FNV-1a.
void save_adapter(const Adapter& adapter, const std::filesystem::path& path);
Adapter load_adapter(const std::filesystem::path& path);

/// A dataset directory holds dataset.json (the spec) and one image file per
/// split at the spec's base resolution.
void save_dataset(const SyntheticDataset& data, const std::filesystem::path& dir);
SyntheticDataset load_dataset(const std::filesystem::path& dir);

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace embedkit
