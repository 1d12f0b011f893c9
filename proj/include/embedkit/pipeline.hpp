#pragma once

#include "embedkit/dataset.hpp"
#include "embedkit/model.hpp"
#include "embedkit/retrieval.hpp"

namespace embedkit {

/// Eval-mode embeddings of a whole split at the model's current resolution.
EmbeddingSet embed_split(const EmbeddingModel& model, const SyntheticDataset& data, SplitKind kind,
                         Index batch_size = 64);

/// Embeds the query and index splits and scores retrieval between them.
PrecisionReport evaluate(const EmbeddingModel& model, const SyntheticDataset& data,
                         const RetrievalEvalOptions& options = {});

}  // namespace embedkit
