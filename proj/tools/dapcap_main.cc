// Command-line front end: dataset tooling, training, decoding, evaluation and
// representation analysis.

#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dapcap/analysis.h"
#include "dapcap/attribute_supervision.h"
#include "dapcap/caption_model.h"
#include "dapcap/data_io.h"
#include "dapcap/decoding.h"
#include "dapcap/evaluation_metrics.h"
#include "dapcap/training_engine.h"
#include "json.hpp"

namespace {

using namespace dapcap;
using nlohmann::json;

void WriteText(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

void Emit(const std::string& path, const json& doc) {
  if (path.empty()) {
    std::cout << doc.dump(2) << "\n";
  } else {
    WriteText(path, doc.dump(2) + "\n");
  }
}

StopWords StopWordsFrom(const std::string& path) {
  return path.empty() ? DefaultStopWords() : LoadStopWords(path);
}

int BuildVocab(const std::string& manifest, size_t k, const std::string& stopwords,
               const std::string& out) {
  std::vector<Tokens> captions;
  for (const auto& r : LoadManifest(manifest)) {
    if (r.split != Split::kTrain) continue;
    for (const auto& c : r.captions) captions.push_back(TokenizeCaption(c));
  }
  Emit(out, BuildAttributeVocabulary(captions, k, StopWordsFrom(stopwords)).ToJson());
  return 0;
}

int Train(const std::string& config_path, const std::string& manifest, const std::string& out) {
  std::ifstream in(config_path);
  if (!in) throw std::runtime_error("cannot open config " + config_path);
  ExperimentConfig config = ExperimentConfig::FromJson(json::parse(in));
  const auto records = LoadManifest(manifest);
  const StopWords stopwords = StopWordsFrom(config.stopwords_path.value_or(""));
  PreparedDataset data = PrepareDataset(records, config.model, config.num_attributes,
                                        config.caption_min_count, stopwords);
  CaptionModel model(config.model, config.train.seed);
  std::filesystem::create_directories(out);
  WriteText((std::filesystem::path(out) / "config.json").string(), config.ToJson().dump(2) + "\n");
  TrainOutput output{out, true};
  const TrainResult result = Train(model, data, config.train, &output);
  SaveCheckpoint(std::filesystem::path(out) / "final.ckpt", model, data.caption_vocab,
                 data.attribute_vocab);
  std::cerr << "trained " << result.epochs.size() << " epochs (" << result.steps.size()
            << " steps); best epoch " << result.best_epoch << " with L_cap "
            << result.best_validation_caption_loss << "\n";
  return 0;
}

int Decode(const std::string& checkpoint_path, const std::string& manifest,
           const std::string& split, size_t beam, const std::string& out) {
  const Checkpoint ckpt = LoadCheckpoint(checkpoint_path);
  const auto records = LoadManifest(manifest);
  json captions = json::object();
  for (const auto* r : SelectSplit(records, ParseSplit(split))) {
    const Matrix features = ckpt.model.Encode(PrepareInputs(ckpt.model.config(), *r));
    const auto ids =
        BeamDecode(ckpt.model, features, beam, static_cast<size_t>(ckpt.model.config().max_length))
            .best;
    captions[r->video_id] = DecodeCaption(ids, ckpt.caption_vocab);
  }
  Emit(out, captions);
  return 0;
}

std::vector<size_t> ParseCounts(const std::string& text) {
  std::vector<size_t> counts;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) counts.push_back(std::stoul(item));
  }
  return counts;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video captioning with dual attribute prediction"};
  app.require_subcommand(1);

  std::string manifest, out, stopwords, config, checkpoint, split = "test", csv, frame_counts;
  size_t k = 500, beam = 5, top_n = 10;
  dapcap::SyntheticConfig synthetic;

  auto* vocab_cmd = app.add_subcommand("build-vocab", "Mine the attribute vocabulary");
  vocab_cmd->add_option("--manifest", manifest)->required();
  vocab_cmd->add_option("--k", k, "Number of attributes");
  vocab_cmd->add_option("--stopwords", stopwords, "Stop-word list, one per line");
  vocab_cmd->add_option("--out", out, "Output JSON (stdout when omitted)");

  auto* synth_cmd = app.add_subcommand("make-synthetic", "Generate a synthetic dataset");
  synth_cmd->add_option("--out", out)->required();
  synth_cmd->add_option("--videos", synthetic.num_videos);
  synth_cmd->add_option("--frames", synthetic.num_frames);
  synth_cmd->add_option("--seed", synthetic.seed);
  synth_cmd->add_option("--attributes-per-video", synthetic.attributes_per_video);
  synth_cmd->add_option("--captions-per-video", synthetic.captions_per_video);
  synth_cmd->add_option("--noise", synthetic.noise);

  auto* train_cmd = app.add_subcommand("train", "Train a captioner");
  train_cmd->add_option("--config", config)->required();
  train_cmd->add_option("--manifest", manifest)->required();
  train_cmd->add_option("--out", out)->required();

  auto* decode_cmd = app.add_subcommand("decode", "Generate captions");
  decode_cmd->add_option("--checkpoint", checkpoint)->required();
  decode_cmd->add_option("--manifest", manifest)->required();
  decode_cmd->add_option("--split", split);
  decode_cmd->add_option("--beam", beam);
  decode_cmd->add_option("--out", out);

  auto* eval_cmd = app.add_subcommand("evaluate", "Score captions and attribute ranking");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--manifest", manifest)->required();
  eval_cmd->add_option("--split", split);
  eval_cmd->add_option("--beam", beam);
  eval_cmd->add_option("--map-frame-counts", frame_counts, "Comma-separated, e.g. 1,2,4,8");
  eval_cmd->add_option("--out", out);
  eval_cmd->add_option("--csv", csv, "mAP vs frame-count curve");

  auto* acs_cmd = app.add_subcommand("analyze-acs", "Average cosine similarity by category");
  acs_cmd->add_option("--checkpoint", checkpoint)->required();
  acs_cmd->add_option("--manifest", manifest)->required();
  acs_cmd->add_option("--split", split);
  acs_cmd->add_option("--out", out);
  acs_cmd->add_option("--csv", csv);

  auto* nn_cmd = app.add_subcommand("attribute-neighbors", "Nearest attributes by embedding");
  nn_cmd->add_option("--checkpoint", checkpoint)->required();
  nn_cmd->add_option("--top-n", top_n);
  nn_cmd->add_option("--out", out);
  nn_cmd->add_option("--csv", csv, "Raw attribute embeddings");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*vocab_cmd) return BuildVocab(manifest, k, stopwords, out);
    if (*synth_cmd) {
      const auto path = dapcap::WriteDataset(dapcap::GenerateSyntheticDataset(synthetic), out);
      std::cerr << "wrote " << path.string() << "\n";
      return 0;
    }
    if (*train_cmd) return Train(config, manifest, out);
    if (*decode_cmd) return Decode(checkpoint, manifest, split, beam, out);
    if (*eval_cmd) {
      const auto ckpt = dapcap::LoadCheckpoint(checkpoint);
      dapcap::EvaluateOptions options{dapcap::ParseSplit(split), beam, ParseCounts(frame_counts)};
      const auto report = dapcap::EvaluateRun(ckpt, dapcap::LoadManifest(manifest), options);
      Emit(out, report.ToJson());
      if (!csv.empty()) WriteText(csv, report.MapCurveCsv());
      return 0;
    }
    if (*acs_cmd) {
      const auto ckpt = dapcap::LoadCheckpoint(checkpoint);
      const auto records = dapcap::LoadManifest(manifest);
      const auto videos = dapcap::SelectSplit(records, dapcap::ParseSplit(split));
      const auto pooled = dapcap::PooledFeatures(ckpt.model, videos);
      std::map<int, std::vector<dapcap::Vector>> groups;
      for (size_t i = 0; i < videos.size(); ++i) {
        if (videos[i]->category) groups[*videos[i]->category].push_back(pooled[i].second);
      }
      const auto acs = dapcap::ComputeAcs(groups);
      Emit(out, acs.ToJson());
      if (!csv.empty()) WriteText(csv, acs.ToCsv());
      return 0;
    }
    if (*nn_cmd) {
      const auto ckpt = dapcap::LoadCheckpoint(checkpoint);
      const auto result = dapcap::FindAttributeNeighbors(ckpt.model, ckpt.caption_vocab,
                                                         ckpt.attribute_vocab, top_n);
      Emit(out, result.ToJson());
      if (!csv.empty()) WriteText(csv, result.EmbeddingsCsv());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
