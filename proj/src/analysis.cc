#include "dapcap/analysis.h"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dapcap {

void ZScoreNormalize(std::vector<Vector>& vectors) {
  if (vectors.empty()) return;
  const double n = static_cast<double>(vectors.size());
  Vector mean = Vector::Zero(vectors.front().size());
  for (const auto& v : vectors) mean += v;
  mean /= n;
  Vector var = Vector::Zero(mean.size());
  for (const auto& v : vectors) var.array() += (v - mean).array().square();
  var /= n;
  for (auto& v : vectors) {
    v -= mean;
    for (Eigen::Index d = 0; d < v.size(); ++d) {
      if (var(d) > 0.0) v(d) /= std::sqrt(var(d));
    }
  }
}

std::vector<std::pair<std::string, Vector>> PooledFeatures(
    const CaptionModel& model, const std::vector<const VideoRecord*>& videos) {
  if (videos.empty()) throw std::invalid_argument("no videos to pool");
  std::vector<Vector> pooled;
  for (const auto* v : videos) {
    pooled.push_back(model.Encode(PrepareInputs(model.config(), *v)).rowwise().mean());
  }
  ZScoreNormalize(pooled);
  std::vector<std::pair<std::string, Vector>> out;
  for (size_t i = 0; i < videos.size(); ++i) out.emplace_back(videos[i]->video_id, pooled[i]);
  return out;
}

double CosineSimilarity(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

AcsMatrix ComputeAcs(const std::map<int, std::vector<Vector>>& groups) {
  AcsMatrix out;
  std::vector<const std::vector<Vector>*> sets;
  for (const auto& [category, vectors] : groups) {
    if (vectors.empty()) {
      throw std::invalid_argument("category " + std::to_string(category) + " has no vectors");
    }
    out.categories.push_back(category);
    sets.push_back(&vectors);
    if (vectors.size() == 1) out.singleton_categories.push_back(category);
    for (const auto& v : vectors) {
      if (v.norm() == 0.0) ++out.zero_vectors;
    }
  }
  const auto c = static_cast<Eigen::Index>(sets.size());
  out.values = Matrix::Zero(c, c);
  for (Eigen::Index i = 0; i < c; ++i) {
    for (Eigen::Index j = i; j < c; ++j) {
      double sum = 0.0;
      for (const auto& a : *sets[i])
        for (const auto& b : *sets[j]) sum += CosineSimilarity(a, b);
      const double mean = sum / static_cast<double>(sets[i]->size() * sets[j]->size());
      out.values(i, j) = out.values(j, i) = mean;
    }
  }
  return out;
}

nlohmann::json AcsMatrix::ToJson() const {
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    rows.emplace_back();
    for (Eigen::Index j = 0; j < values.cols(); ++j) rows.back().push_back(values(i, j));
  }
  double intra = 0.0;
  for (Eigen::Index i = 0; i < values.rows(); ++i) intra += values(i, i);
  return {{"categories", categories},
          {"acs", rows},
          {"mean_intra_class_acs", values.rows() ? intra / static_cast<double>(values.rows()) : 0.0},
          {"diagonal_includes_self_pairs", true},
          {"singleton_categories", singleton_categories},
          {"zero_vectors", zero_vectors}};
}

std::string AcsMatrix::ToCsv() const {
  std::ostringstream out;
  out.precision(10);
  out << "category";
  for (int c : categories) out << "," << c;
  out << "\n";
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    out << categories[static_cast<size_t>(i)];
    for (Eigen::Index j = 0; j < values.cols(); ++j) out << "," << values(i, j);
    out << "\n";
  }
  return out.str();
}

AttributeNeighbors FindAttributeNeighbors(const CaptionModel& model,
                                          const CaptionVocabulary& caption_vocab,
                                          const AttributeVocabulary& attribute_vocab,
                                          size_t top_n) {
  AttributeNeighbors out;
  std::vector<Vector> columns;
  for (const auto& word : attribute_vocab.words()) {
    if (!caption_vocab.Contains(word)) {
      std::cerr << "warning: attribute '" << word << "' is not in the caption vocabulary\n";
      out.skipped.push_back(word);
      continue;
    }
    out.words.push_back(word);
    columns.push_back(model.params().word_embeddings.col(caption_vocab.Id(word)));
  }
  out.embeddings = Matrix(static_cast<Eigen::Index>(columns.size()), model.config().hidden_size);
  for (size_t i = 0; i < columns.size(); ++i) {
    out.embeddings.row(static_cast<Eigen::Index>(i)) = columns[i].transpose();
  }
  for (size_t i = 0; i < columns.size(); ++i) {
    std::vector<std::pair<double, size_t>> ranked;
    for (size_t j = 0; j < columns.size(); ++j) {
      if (j != i) ranked.emplace_back(CosineSimilarity(columns[i], columns[j]), j);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    auto& list = out.neighbors[out.words[i]];
    for (size_t r = 0; r < std::min(top_n, ranked.size()); ++r) {
      list.emplace_back(out.words[ranked[r].second], ranked[r].first);
    }
  }
  return out;
}

nlohmann::json AttributeNeighbors::ToJson() const {
  nlohmann::json n = nlohmann::json::object();
  for (const auto& [word, list] : neighbors) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [other, cosine] : list) entries.push_back({{"word", other}, {"cosine", cosine}});
    n[word] = entries;
  }
  return {{"words", words}, {"neighbors", n}, {"skipped", skipped}};
}

std::string AttributeNeighbors::EmbeddingsCsv() const {
  std::ostringstream out;
  out.precision(10);
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    out << words[static_cast<size_t>(i)];
    for (Eigen::Index j = 0; j < embeddings.cols(); ++j) out << "," << embeddings(i, j);
    out << "\n";
  }
  return out.str();
}

}  // namespace dapcap
