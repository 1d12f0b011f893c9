#include "embedkit/pipeline.hpp"

#include <algorithm>
#include <numeric>

namespace embedkit {

EmbeddingSet embed_split(const EmbeddingModel& model, const SyntheticDataset& data, SplitKind kind,
                         Index batch_size) {
  const DatasetSplit& split = data.split(kind);
  const int resolution = model.backbone().config().image_size;
  EmbeddingSet out;
  out.values.resize(split.size(), kEmbeddingDim);
  out.labels = split.labels;
  out.ids = split.ids;
  // Eval mode never draws from the generator.
  std::mt19937_64 unused(0);
  for (Index begin = 0; begin < split.size(); begin += batch_size) {
    const Index end = std::min(split.size(), begin + batch_size);
    std::vector<Index> positions(static_cast<std::size_t>(end - begin));
    std::iota(positions.begin(), positions.end(), begin);
    const Tensor emb = model.embed(data.batch(kind, resolution, positions), false, unused);
    out.values.middleRows(begin, end - begin) = emb.matrix();
  }
  return out;
}

PrecisionReport evaluate(const EmbeddingModel& model, const SyntheticDataset& data,
                         const RetrievalEvalOptions& options) {
  return evaluate_retrieval(embed_split(model, data, SplitKind::Query), embed_split(model, data, SplitKind::Index),
                            options);
}

}  // namespace embedkit
