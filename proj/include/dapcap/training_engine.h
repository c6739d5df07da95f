#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dapcap/attribute_supervision.h"
#include "dapcap/caption_model.h"
#include "dapcap/dap_objectives.h"
#include "dapcap/data_io.h"
#include "json.hpp"

namespace dapcap {

struct TrainConfig {
  size_t batch_size = 64;
  size_t epochs = 50;
  double lr_init = 5e-4;
  double lr_decay_per_epoch = 0.9;
  double lr_floor = 1e-6;
  double weight_decay = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  DapWeights dap;
  bool sparse_sampling = true;

  nlohmann::json ToJson() const;
  static TrainConfig FromJson(const nlohmann::json& doc);
};

// max(lr_init * decay^epoch, lr_floor).
double LearningRate(size_t epoch, const TrainConfig& config);

// Everything needed to build vocabularies and the model from a manifest.
struct ExperimentConfig {
  CaptionModelConfig model;  // vocab/attribute/modality sizes filled by PrepareDataset
  TrainConfig train;
  size_t num_attributes = 500;
  size_t caption_min_count = 2;
  std::optional<std::string> stopwords_path;

  // Layout: {"model": {...}, "train": {...}, "dap": {"lambda1", "lambda2",
  // "sparse_sampling"}, "data": {"num_attributes", "caption_min_count", "stopwords"}}.
  nlohmann::json ToJson() const;
  static ExperimentConfig FromJson(const nlohmann::json& doc);
};

struct PreparedVideo {
  std::string video_id;
  Split split = Split::kTrain;
  std::vector<Matrix> inputs;              // (d_m, N), model modality order
  std::vector<std::vector<int>> captions;  // encoded, length T_max
  std::vector<std::string> raw_captions;
  MultiHotLabel label;
  std::optional<int> category;
};

struct PreparedDataset {
  CaptionVocabulary caption_vocab;
  AttributeVocabulary attribute_vocab;
  std::vector<PreparedVideo> videos;

  std::vector<const PreparedVideo*> InSplit(Split split) const;
};

// Builds both vocabularies from the training split and encodes every video.
// Fills the vocabulary, attribute and modality fields of `model_config`
// (modalities default to every feature of the first record, sorted by name).
PreparedDataset PrepareDataset(const std::vector<VideoRecord>& records,
                               CaptionModelConfig& model_config, size_t num_attributes,
                               size_t caption_min_count, const StopWords& stopwords);

// Encodes records against existing vocabularies (e.g. from a checkpoint).
PreparedDataset PrepareWithVocabularies(const std::vector<VideoRecord>& records,
                                        const CaptionModel& model,
                                        const CaptionVocabulary& caption_vocab,
                                        const AttributeVocabulary& attribute_vocab);

// Decoupled weight decay Adam; biases and layer-norm parameters are not decayed.
class AdamW {
 public:
  AdamW(const CaptionModelConfig& config, const TrainConfig& train);
  // Tensors whose name starts with a frozen prefix are never updated.
  void Freeze(std::string prefix) { frozen_.push_back(std::move(prefix)); }
  void Step(CaptionModelParams& params, CaptionModelParams& grads, double lr);
  size_t steps() const { return steps_; }

 private:
  TrainConfig train_;
  CaptionModelParams first_moment_;
  CaptionModelParams second_moment_;
  std::vector<std::string> frozen_;
  size_t steps_ = 0;
};

struct EpochLog {
  size_t epoch = 0;
  double learning_rate = 0.0;
  LossBreakdown train;  // mean over the epoch's steps
  double validation_caption_loss = 0.0;  // NaN without a validation split
  nlohmann::json ToJson() const;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::vector<LossBreakdown> steps;
  size_t best_epoch = 0;
  double best_validation_caption_loss = 0.0;
};

struct TrainOutput {
  std::filesystem::path dir;  // epoch_XXX.ckpt, best.ckpt, train_log.jsonl
  bool save_every_epoch = true;
};

// Seeded per-epoch shuffling over all (video, caption) training pairs.
// Throws std::runtime_error naming the batch when the loss is not finite.
TrainResult Train(CaptionModel& model, const PreparedDataset& data, const TrainConfig& config,
                  const TrainOutput* output = nullptr);

// All (video, caption) pairs of a split with full-feature VAP.
std::vector<TrainingExample> MakeExamples(const std::vector<const PreparedVideo*>& videos);

// Eval-mode mean L_cap over every caption of the split's videos.
double ValidationCaptionLoss(const CaptionModel& model,
                             const std::vector<const PreparedVideo*>& videos);

struct GradientCheckGroup {
  std::string name;
  size_t coordinates = 0;
  double max_relative_error = 0.0;
  bool passed = true;
};

struct GradientCheckReport {
  std::vector<GradientCheckGroup> groups;
  bool passed() const;
};

// Central finite differences over `params`, compared against `analytic`
// (same layout). Each group checks min(size, coordinates_per_group) random
// coordinates. relative error = |a - n| / max(|a|, |n|, abs_floor).
GradientCheckReport GradientCheck(const std::vector<TensorRef>& params,
                                  const std::vector<TensorRef>& analytic,
                                  const std::function<double()>& loss, double tolerance,
                                  size_t coordinates_per_group = 200, uint64_t seed = 0,
                                  double step = 1e-5, double abs_floor = 1e-5);

}  // namespace dapcap
