#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dapcap/attribute_supervision.h"
#include "json.hpp"

namespace dapcap {

enum class Split { kTrain, kValidation, kTest };

Split ParseSplit(const std::string& name);
std::string SplitName(Split split);

using FeatureMatrix = Eigen::MatrixXf;  // (frames, feature dim)

struct VideoRecord {
  std::string video_id;
  Split split = Split::kTrain;
  std::optional<int> category;
  std::map<std::string, FeatureMatrix> features;
  std::vector<std::string> captions;

  // Shared row count of every feature matrix; 0 when there are none.
  Eigen::Index num_frames() const;
  const FeatureMatrix& feature(const std::string& modality) const;
};

std::vector<const VideoRecord*> SelectSplit(const std::vector<VideoRecord>& records,
                                            Split split);

// Flat little-endian float32 array at `path` plus a `<path>.json` sidecar
// holding {"shape": [rows, cols]}.
void WriteFeatureFile(const std::filesystem::path& path, const FeatureMatrix& matrix);
FeatureMatrix ReadFeatureFile(const std::filesystem::path& path);

// JSON-lines manifest; one record per line, feature paths relative to the
// manifest's directory. A modality mapped to null is zero-filled, taking
// its width from the record's "dims" object.
std::vector<VideoRecord> LoadManifest(const std::filesystem::path& path);

// Writes `<dir>/manifest.jsonl` and `<dir>/features/*`. Returns the manifest path.
std::filesystem::path WriteDataset(const std::vector<VideoRecord>& records,
                                   const std::filesystem::path& dir);

class CaptionVocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  CaptionVocabulary();
  explicit CaptionVocabulary(const std::vector<std::string>& words);

  size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
  // kUnk for out-of-vocabulary words.
  int Id(const std::string& token) const;
  bool Contains(const std::string& token) const { return index_.contains(token); }

  nlohmann::json ToJson() const;
  static CaptionVocabulary FromJson(const nlohmann::json& doc);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

CaptionVocabulary BuildCaptionVocabulary(const std::vector<std::string>& train_captions,
                                         size_t min_count = 2);

// BOS + content ids + EOS, content truncated so the total fits in t_max,
// right-padded with PAD to exactly t_max ids.
std::vector<int> EncodeCaption(const std::string& text, const CaptionVocabulary& vocab,
                               size_t t_max);
// Drops the leading BOS and stops at the first EOS or PAD.
std::string DecodeCaption(const std::vector<int>& ids, const CaptionVocabulary& vocab);

struct SyntheticConfig {
  size_t num_videos = 50;
  size_t num_frames = 8;
  std::vector<std::pair<std::string, size_t>> modalities = {{"image", 32}, {"motion", 24}};
  // Content words; attribute k is words[k]. Defaults to a 20-word pool.
  std::vector<std::string> words;
  size_t attributes_per_video = 2;
  size_t captions_per_video = 3;
  double noise = 0.1;
  // Attribute index pairs that always appear together in a video.
  std::vector<std::pair<size_t, size_t>> cooccurring;
  double validation_fraction = 0.15;
  double test_fraction = 0.15;
  size_t num_categories = 5;
  uint64_t seed = 13;
};

const std::vector<std::string>& DefaultSyntheticWords();

// Each frame shows one of the video's attributes: its rows are the per-modality
// centroid of that attribute plus Gaussian noise. Captions list the video's
// attribute words in a random order. Pure function of the config.
std::vector<VideoRecord> GenerateSyntheticDataset(const SyntheticConfig& config);

}  // namespace dapcap
