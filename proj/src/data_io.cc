#include "dapcap/data_io.h"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dapcap/rng.h"

namespace dapcap {

namespace fs = std::filesystem;
using nlohmann::json;

Split ParseSplit(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "validation" || name == "val") return Split::kValidation;
  if (name == "test") return Split::kTest;
  throw std::invalid_argument("unknown split label: " + name);
}

std::string SplitName(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "train";
}

Eigen::Index VideoRecord::num_frames() const {
  return features.empty() ? 0 : features.begin()->second.rows();
}

const FeatureMatrix& VideoRecord::feature(const std::string& modality) const {
  auto it = features.find(modality);
  if (it == features.end()) {
    throw std::out_of_range("video " + video_id + " has no modality " + modality);
  }
  return it->second;
}

std::vector<const VideoRecord*> SelectSplit(const std::vector<VideoRecord>& records,
                                            Split split) {
  std::vector<const VideoRecord*> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian; add byte swapping for this target");

fs::path SidecarPath(const fs::path& path) { return fs::path(path.string() + ".json"); }

}  // namespace

void WriteFeatureFile(const fs::path& path, const FeatureMatrix& matrix) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = matrix;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(rows.data()),
            static_cast<std::streamsize>(rows.size() * sizeof(float)));
  std::ofstream side(SidecarPath(path));
  side << json{{"shape", {matrix.rows(), matrix.cols()}}}.dump() << "\n";
}

FeatureMatrix ReadFeatureFile(const fs::path& path) {
  std::ifstream side(SidecarPath(path));
  if (!side) throw std::runtime_error("missing sidecar for " + path.string());
  const auto shape = json::parse(side).at("shape").get<std::vector<Eigen::Index>>();
  if (shape.size() != 2) throw std::runtime_error("feature sidecar shape must be 2-D: " + path.string());
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows(shape[0], shape[1]);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto bytes = static_cast<std::streamsize>(rows.size() * sizeof(float));
  in.read(reinterpret_cast<char*>(rows.data()), bytes);
  if (in.gcount() != bytes || in.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("feature file size does not match sidecar shape: " + path.string());
  }
  return rows;
}

std::vector<VideoRecord> LoadManifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();

  std::vector<VideoRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json doc;
    try {
      doc = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    VideoRecord rec;
    rec.video_id = doc.at("video_id").get<std::string>();
    rec.split = ParseSplit(doc.value("split", "train"));
    if (doc.contains("category") && !doc["category"].is_null()) {
      rec.category = doc["category"].get<int>();
    }
    rec.captions = doc.value("captions", std::vector<std::string>{});

    std::map<std::string, Eigen::Index> missing;
    for (const auto& [modality, entry] : doc.at("features").items()) {
      if (entry.is_null()) {
        const auto dims = doc.value("dims", json::object());
        if (!dims.contains(modality)) {
          throw std::runtime_error("video " + rec.video_id + ": modality " + modality +
                                   " is null but has no entry in \"dims\"");
        }
        missing[modality] = dims[modality].get<Eigen::Index>();
      } else {
        rec.features[modality] = ReadFeatureFile(base / entry.get<std::string>());
      }
    }
    Eigen::Index frames = rec.num_frames();
    if (rec.features.empty()) frames = doc.value("frames", Eigen::Index{0});
    for (const auto& [modality, m] : rec.features) {
      if (m.rows() != frames) {
        throw std::runtime_error("video " + rec.video_id + ": modality " + modality + " has " +
                                 std::to_string(m.rows()) + " rows, expected " +
                                 std::to_string(frames));
      }
    }
    if (!missing.empty() && frames == 0) {
      throw std::runtime_error("video " + rec.video_id +
                               ": cannot infer frame count for zero-padded modalities");
    }
    for (const auto& [modality, dim] : missing) {
      rec.features[modality] = FeatureMatrix::Zero(frames, dim);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

fs::path WriteDataset(const std::vector<VideoRecord>& records, const fs::path& dir) {
  fs::create_directories(dir / "features");
  const fs::path manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest);
  if (!out) throw std::runtime_error("cannot write " + manifest.string());
  for (const auto& rec : records) {
    json features = json::object();
    for (const auto& [modality, m] : rec.features) {
      const std::string rel = "features/" + rec.video_id + "." + modality + ".f32";
      WriteFeatureFile(dir / rel, m);
      features[modality] = rel;
    }
    json doc = {{"video_id", rec.video_id},
                {"split", SplitName(rec.split)},
                {"captions", rec.captions},
                {"features", features}};
    if (rec.category) doc["category"] = *rec.category;
    out << doc.dump() << "\n";
  }
  return manifest;
}

namespace {

const std::vector<std::string> kSpecialTokens = {"<pad>", "<bos>", "<eos>", "<unk>"};

}  // namespace

CaptionVocabulary::CaptionVocabulary() : CaptionVocabulary(std::vector<std::string>{}) {}

CaptionVocabulary::CaptionVocabulary(const std::vector<std::string>& words)
    : tokens_(kSpecialTokens) {
  tokens_.insert(tokens_.end(), words.begin(), words.end());
  for (size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate caption token: " + tokens_[i]);
    }
  }
}

int CaptionVocabulary::Id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

nlohmann::json CaptionVocabulary::ToJson() const { return {{"tokens", tokens_}}; }

CaptionVocabulary CaptionVocabulary::FromJson(const nlohmann::json& doc) {
  auto tokens = doc.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < kNumSpecials ||
      !std::equal(kSpecialTokens.begin(), kSpecialTokens.end(), tokens.begin())) {
    throw std::runtime_error("caption vocabulary must start with the four special tokens");
  }
  return CaptionVocabulary(std::vector<std::string>(tokens.begin() + kNumSpecials, tokens.end()));
}

CaptionVocabulary BuildCaptionVocabulary(const std::vector<std::string>& train_captions,
                                         size_t min_count) {
  if (min_count == 0) throw std::invalid_argument("min_count must be >= 1");
  std::map<std::string, size_t> counts;
  for (const auto& caption : train_captions) {
    for (auto& token : TokenizeCaption(caption)) ++counts[token];
  }
  std::vector<std::pair<std::string, size_t>> kept;
  for (auto& [token, count] : counts) {
    if (count >= min_count && std::find(kSpecialTokens.begin(), kSpecialTokens.end(), token) ==
                                  kSpecialTokens.end()) {
      kept.emplace_back(token, count);
    }
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [token, count] : kept) words.push_back(token);
  return CaptionVocabulary(words);
}

std::vector<int> EncodeCaption(const std::string& text, const CaptionVocabulary& vocab,
                               size_t t_max) {
  if (t_max < 2) throw std::invalid_argument("t_max must leave room for BOS and EOS");
  const Tokens tokens = TokenizeCaption(text);
  std::vector<int> ids;
  ids.reserve(t_max);
  ids.push_back(CaptionVocabulary::kBos);
  const size_t content = std::min(tokens.size(), t_max - 2);
  for (size_t i = 0; i < content; ++i) ids.push_back(vocab.Id(tokens[i]));
  ids.push_back(CaptionVocabulary::kEos);
  ids.resize(t_max, CaptionVocabulary::kPad);
  return ids;
}

std::string DecodeCaption(const std::vector<int>& ids, const CaptionVocabulary& vocab) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (i == 0 && id == CaptionVocabulary::kBos) continue;
    if (id == CaptionVocabulary::kEos || id == CaptionVocabulary::kPad) break;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

const std::vector<std::string>& DefaultSyntheticWords() {
  static const std::vector<std::string> kWords = {
      "man",     "woman",   "dog",      "cat",     "car",     "guitar",  "ball",
      "kitchen", "street",  "beach",    "running", "cooking", "singing", "driving",
      "playing", "dancing", "swimming", "talking", "eating",  "jumping"};
  return kWords;
}

std::vector<VideoRecord> GenerateSyntheticDataset(const SyntheticConfig& config) {
  const std::vector<std::string>& words =
      config.words.empty() ? DefaultSyntheticWords() : config.words;
  const size_t num_attributes = words.size();
  if (config.num_frames == 0 || config.num_videos == 0) {
    throw std::invalid_argument("synthetic dataset needs at least one video and one frame");
  }
  if (config.attributes_per_video == 0 || config.attributes_per_video > num_attributes) {
    throw std::invalid_argument("attributes_per_video must be in [1, number of words]");
  }
  Rng rng(config.seed);

  // Per-modality attribute centroids, one column per attribute.
  std::vector<Eigen::MatrixXd> centroids;
  for (const auto& [name, dim] : config.modalities) {
    Eigen::MatrixXd c(dim, num_attributes);
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      for (Eigen::Index i = 0; i < c.rows(); ++i) c(i, j) = rng.Normal();
    centroids.push_back(std::move(c));
  }

  // Attributes that must travel together form one sampling unit.
  std::vector<int> partner(num_attributes, -1);
  for (auto [a, b] : config.cooccurring) {
    if (a >= num_attributes || b >= num_attributes || a == b) {
      throw std::invalid_argument("invalid co-occurring attribute pair");
    }
    partner[a] = static_cast<int>(b);
    partner[b] = static_cast<int>(a);
  }

  const auto num_test = static_cast<size_t>(config.test_fraction * config.num_videos + 0.5);
  const auto num_val =
      static_cast<size_t>(config.validation_fraction * config.num_videos + 0.5);
  const size_t num_train =
      config.num_videos > num_test + num_val ? config.num_videos - num_test - num_val : 0;

  std::vector<VideoRecord> records;
  records.reserve(config.num_videos);
  for (size_t v = 0; v < config.num_videos; ++v) {
    // Round-robin primary attribute so every word appears in training.
    std::vector<size_t> attrs;
    auto add = [&](size_t a) {
      if (std::find(attrs.begin(), attrs.end(), a) != attrs.end()) return;
      attrs.push_back(a);
      if (partner[a] >= 0) attrs.push_back(static_cast<size_t>(partner[a]));
    };
    add(v % num_attributes);
    while (attrs.size() < config.attributes_per_video) {
      add(static_cast<size_t>(rng.UniformInt(num_attributes)));
    }

    VideoRecord rec;
    std::ostringstream id;
    id << "video" << (v < 10 ? "00" : v < 100 ? "0" : "") << v;
    rec.video_id = id.str();
    rec.split = v < num_train ? Split::kTrain
                : v < num_train + num_val ? Split::kValidation
                                          : Split::kTest;
    if (config.num_categories > 0) {
      rec.category = static_cast<int>(attrs.front() % config.num_categories);
    }

    std::vector<size_t> frame_attr(config.num_frames);
    for (size_t f = 0; f < config.num_frames; ++f) frame_attr[f] = attrs[f % attrs.size()];
    rng.Shuffle(frame_attr);
    for (size_t m = 0; m < config.modalities.size(); ++m) {
      const auto& [name, dim] = config.modalities[m];
      FeatureMatrix x(static_cast<Eigen::Index>(config.num_frames), static_cast<Eigen::Index>(dim));
      for (size_t f = 0; f < config.num_frames; ++f) {
        for (size_t d = 0; d < dim; ++d) {
          x(f, d) = static_cast<float>(centroids[m](d, frame_attr[f]) + config.noise * rng.Normal());
        }
      }
      rec.features[name] = std::move(x);
    }

    for (size_t c = 0; c < config.captions_per_video; ++c) {
      std::vector<size_t> order = attrs;
      rng.Shuffle(order);
      std::string caption;
      for (size_t a : order) {
        if (!caption.empty()) caption.push_back(' ');
        caption += words[a];
      }
      rec.captions.push_back(std::move(caption));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace dapcap
