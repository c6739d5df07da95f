#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dapcap/attribute_supervision.h"
#include "dapcap/caption_model.h"
#include "dapcap/data_io.h"
#include "json.hpp"

namespace dapcap {

// Per-dimension z-score across the rows' population; dimensions with zero
// variance are only centred.
void ZScoreNormalize(std::vector<Vector>& vectors);

// Mean of F's M*N columns per video, then z-scored across the given videos.
// Throws std::invalid_argument for an empty video set.
std::vector<std::pair<std::string, Vector>> PooledFeatures(
    const CaptionModel& model, const std::vector<const VideoRecord*>& videos);

// Cosine similarity; 0 when either vector is zero.
double CosineSimilarity(const Vector& a, const Vector& b);

struct AcsMatrix {
  std::vector<int> categories;
  Matrix values;  // mean cosine over all |A|*|B| pairs; the diagonal includes self-pairs
  std::vector<int> singleton_categories;
  size_t zero_vectors = 0;

  nlohmann::json ToJson() const;
  std::string ToCsv() const;
};

// Throws std::invalid_argument when a category has no vectors.
AcsMatrix ComputeAcs(const std::map<int, std::vector<Vector>>& groups);

struct AttributeNeighbors {
  std::vector<std::string> words;  // attributes found in the caption vocabulary
  Matrix embeddings;               // (words, d_h), rows of W^w
  std::map<std::string, std::vector<std::pair<std::string, double>>> neighbors;
  std::vector<std::string> skipped;

  nlohmann::json ToJson() const;
  std::string EmbeddingsCsv() const;
};

// Ranks attributes by cosine between their word-embedding columns; each list
// excludes the word itself, ties go to the lower attribute index.
AttributeNeighbors FindAttributeNeighbors(const CaptionModel& model,
                                          const CaptionVocabulary& caption_vocab,
                                          const AttributeVocabulary& attribute_vocab,
                                          size_t top_n);

}  // namespace dapcap
