#include "dapcap/training_engine.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dapcap {

using nlohmann::json;

json TrainConfig::ToJson() const {
  return {{"batch_size", batch_size},
          {"epochs", epochs},
          {"lr_init", lr_init},
          {"lr_decay_per_epoch", lr_decay_per_epoch},
          {"lr_floor", lr_floor},
          {"weight_decay", weight_decay},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"seed", seed}};
}

TrainConfig TrainConfig::FromJson(const json& doc) {
  TrainConfig c;
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.epochs = doc.value("epochs", c.epochs);
  c.lr_init = doc.value("lr_init", c.lr_init);
  c.lr_decay_per_epoch = doc.value("lr_decay_per_epoch", c.lr_decay_per_epoch);
  c.lr_floor = doc.value("lr_floor", c.lr_floor);
  c.weight_decay = doc.value("weight_decay", c.weight_decay);
  c.adam_beta1 = doc.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = doc.value("adam_beta2", c.adam_beta2);
  c.adam_eps = doc.value("adam_eps", c.adam_eps);
  c.seed = doc.value("seed", c.seed);
  if (c.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  return c;
}

double LearningRate(size_t epoch, const TrainConfig& config) {
  const double lr = config.lr_init * std::pow(config.lr_decay_per_epoch, static_cast<double>(epoch));
  return std::max(lr, config.lr_floor);
}

json ExperimentConfig::ToJson() const {
  json data = {{"num_attributes", num_attributes}, {"caption_min_count", caption_min_count}};
  if (stopwords_path) data["stopwords"] = *stopwords_path;
  return {{"model", model.ToJson()},
          {"train", train.ToJson()},
          {"dap",
           {{"lambda1", train.dap.lambda_video},
            {"lambda2", train.dap.lambda_text},
            {"sparse_sampling", train.sparse_sampling}}},
          {"data", data}};
}

ExperimentConfig ExperimentConfig::FromJson(const json& doc) {
  ExperimentConfig c;
  if (doc.contains("model")) c.model = CaptionModelConfig::FromJson(doc.at("model"));
  if (doc.contains("train")) c.train = TrainConfig::FromJson(doc.at("train"));
  if (doc.contains("dap")) {
    const auto& dap = doc.at("dap");
    c.train.dap.lambda_video = dap.value("lambda1", c.train.dap.lambda_video);
    c.train.dap.lambda_text = dap.value("lambda2", c.train.dap.lambda_text);
    c.train.sparse_sampling = dap.value("sparse_sampling", c.train.sparse_sampling);
    if (c.train.dap.lambda_video < 0 || c.train.dap.lambda_text < 0) {
      throw std::invalid_argument("dap.lambda1 and dap.lambda2 must be nonnegative");
    }
  }
  if (doc.contains("data")) {
    const auto& data = doc.at("data");
    c.num_attributes = data.value("num_attributes", c.num_attributes);
    c.caption_min_count = data.value("caption_min_count", c.caption_min_count);
    if (data.contains("stopwords")) c.stopwords_path = data.at("stopwords").get<std::string>();
  }
  return c;
}

std::vector<const PreparedVideo*> PreparedDataset::InSplit(Split split) const {
  std::vector<const PreparedVideo*> out;
  for (const auto& v : videos) {
    if (v.split == split) out.push_back(&v);
  }
  return out;
}

namespace {

PreparedVideo EncodeVideo(const VideoRecord& rec, const CaptionModelConfig& config,
                          const CaptionVocabulary& caption_vocab,
                          const AttributeVocabulary& attribute_vocab) {
  PreparedVideo v;
  v.video_id = rec.video_id;
  v.split = rec.split;
  v.category = rec.category;
  v.inputs = PrepareInputs(config, rec);
  v.raw_captions = rec.captions;
  std::vector<Tokens> tokenized;
  for (const auto& c : rec.captions) {
    v.captions.push_back(EncodeCaption(c, caption_vocab, static_cast<size_t>(config.max_length)));
    tokenized.push_back(TokenizeCaption(c));
  }
  v.label = MakeMultiHotLabel(tokenized, attribute_vocab);
  return v;
}

}  // namespace

PreparedDataset PrepareDataset(const std::vector<VideoRecord>& records,
                               CaptionModelConfig& model_config, size_t num_attributes,
                               size_t caption_min_count, const StopWords& stopwords) {
  if (records.empty()) throw std::invalid_argument("dataset is empty");
  if (model_config.modalities.empty()) {
    for (const auto& [name, m] : records.front().features) {
      model_config.modalities.push_back({name, static_cast<int>(m.cols())});
    }
  }
  for (auto& m : model_config.modalities) {
    if (m.dim == 0) m.dim = static_cast<int>(records.front().feature(m.name).cols());
  }

  std::vector<std::string> train_captions;
  std::vector<Tokens> train_tokens;
  for (const auto& r : records) {
    if (r.split != Split::kTrain) continue;
    for (const auto& c : r.captions) {
      train_captions.push_back(c);
      train_tokens.push_back(TokenizeCaption(c));
    }
  }
  if (train_captions.empty()) throw std::invalid_argument("training split has no captions");

  PreparedDataset data;
  data.caption_vocab = BuildCaptionVocabulary(train_captions, caption_min_count);
  data.attribute_vocab = BuildAttributeVocabulary(train_tokens, num_attributes, stopwords);
  model_config.vocab_size = static_cast<int>(data.caption_vocab.size());
  model_config.num_attributes = static_cast<int>(data.attribute_vocab.size());
  model_config.Validate();
  for (const auto& r : records) {
    data.videos.push_back(EncodeVideo(r, model_config, data.caption_vocab, data.attribute_vocab));
  }
  return data;
}

PreparedDataset PrepareWithVocabularies(const std::vector<VideoRecord>& records,
                                        const CaptionModel& model,
                                        const CaptionVocabulary& caption_vocab,
                                        const AttributeVocabulary& attribute_vocab) {
  PreparedDataset data{caption_vocab, attribute_vocab, {}};
  for (const auto& r : records) {
    data.videos.push_back(EncodeVideo(r, model.config(), caption_vocab, attribute_vocab));
  }
  return data;
}

AdamW::AdamW(const CaptionModelConfig& config, const TrainConfig& train)
    : train_(train),
      first_moment_(CaptionModelParams::Zeros(config)),
      second_moment_(CaptionModelParams::Zeros(config)) {}

void AdamW::Step(CaptionModelParams& params, CaptionModelParams& grads, double lr) {
  ++steps_;
  const double b1 = train_.adam_beta1;
  const double b2 = train_.adam_beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  auto p = params.Tensors();
  auto g = grads.Tensors();
  auto m = first_moment_.Tensors();
  auto v = second_moment_.Tensors();
  for (size_t i = 0; i < p.size(); ++i) {
    const bool frozen = std::any_of(frozen_.begin(), frozen_.end(), [&](const std::string& f) {
      return p[i].name.starts_with(f);
    });
    if (frozen) continue;
    const double decay = p[i].decay ? lr * train_.weight_decay : 0.0;
    for (Eigen::Index j = 0; j < p[i].size(); ++j) {
      const double grad = g[i].data[j];
      double& mj = m[i].data[j];
      double& vj = v[i].data[j];
      mj = b1 * mj + (1.0 - b1) * grad;
      vj = b2 * vj + (1.0 - b2) * grad * grad;
      double& theta = p[i].data[j];
      theta -= decay * theta;
      theta -= lr * (mj / correction1) / (std::sqrt(vj / correction2) + train_.adam_eps);
    }
  }
}

json EpochLog::ToJson() const {
  json j = {{"epoch", epoch}, {"lr", learning_rate}, {"train", train.ToJson()}};
  if (std::isfinite(validation_caption_loss)) {
    j["validation_L_cap"] = validation_caption_loss;
  } else {
    j["validation_L_cap"] = nullptr;
  }
  return j;
}

std::vector<TrainingExample> MakeExamples(const std::vector<const PreparedVideo*>& videos) {
  std::vector<TrainingExample> out;
  for (const auto* v : videos) {
    for (const auto& c : v->captions) out.push_back({&v->inputs, c, &v->label, {}});
  }
  return out;
}

double ValidationCaptionLoss(const CaptionModel& model,
                             const std::vector<const PreparedVideo*>& videos) {
  std::vector<CaptionExample> examples;
  for (const auto* v : videos) {
    for (const auto& c : v->captions) examples.push_back({&v->inputs, c});
  }
  return CaptionLoss(model, examples);
}

TrainResult Train(CaptionModel& model, const PreparedDataset& data, const TrainConfig& config,
                  const TrainOutput* output) {
  const auto train_videos = data.InSplit(Split::kTrain);
  const auto val_videos = data.InSplit(Split::kValidation);
  std::vector<std::pair<size_t, size_t>> pairs;
  for (size_t v = 0; v < train_videos.size(); ++v) {
    for (size_t c = 0; c < train_videos[v]->captions.size(); ++c) pairs.emplace_back(v, c);
  }
  if (pairs.empty()) throw std::invalid_argument("training split has no video-caption pairs");
  if (config.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");

  AdamW optimizer(model.config(), config);
  if (config.dap.lambda_video == 0.0) optimizer.Freeze("video_apnet");
  if (config.dap.lambda_text == 0.0) optimizer.Freeze("text_apnet");
  CaptionModelParams grads = CaptionModelParams::Zeros(model.config());
  const LossOptions options{config.dap, 1.0};

  std::ofstream log;
  if (output) {
    std::filesystem::create_directories(output->dir);
    log.open(output->dir / "train_log.jsonl");
  }

  Rng rng(config.seed);
  TrainResult result;
  result.best_validation_caption_loss = std::numeric_limits<double>::infinity();
  const size_t num_batches = (pairs.size() + config.batch_size - 1) / config.batch_size;
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng epoch_rng = rng.Fork();
    epoch_rng.Shuffle(pairs);
    const double lr = LearningRate(epoch, config);
    LossBreakdown epoch_sum;
    for (size_t b = 0; b < num_batches; ++b) {
      std::vector<TrainingExample> batch;
      const size_t end = std::min(pairs.size(), (b + 1) * config.batch_size);
      for (size_t i = b * config.batch_size; i < end; ++i) {
        const PreparedVideo* v = train_videos[pairs[i].first];
        TrainingExample ex{&v->inputs, v->captions[pairs[i].second], &v->label, {}};
        if (config.sparse_sampling) {
          ex.frames = DrawSparseSample(static_cast<size_t>(v->inputs.front().cols()), epoch_rng);
        }
        batch.push_back(std::move(ex));
      }
      grads.SetZero();
      const LossBreakdown loss = TotalLoss(model, batch, options, &epoch_rng, &grads);
      if (!std::isfinite(loss.total)) {
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(b));
      }
      optimizer.Step(model.params(), grads, lr);
      result.steps.push_back(loss);
      epoch_sum += loss;
    }
    epoch_sum /= static_cast<double>(num_batches);

    EpochLog entry{epoch, lr, epoch_sum, std::numeric_limits<double>::quiet_NaN()};
    if (!val_videos.empty()) entry.validation_caption_loss = ValidationCaptionLoss(model, val_videos);
    const double selection =
        val_videos.empty() ? epoch_sum.caption : entry.validation_caption_loss;
    const bool improved = selection < result.best_validation_caption_loss;
    if (improved) {
      result.best_validation_caption_loss = selection;
      result.best_epoch = epoch;
    }
    result.epochs.push_back(entry);

    if (output) {
      log << entry.ToJson().dump() << "\n" << std::flush;
      if (output->save_every_epoch) {
        std::ostringstream name;
        name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
        SaveCheckpoint(output->dir / name.str(), model, data.caption_vocab, data.attribute_vocab);
      }
      if (improved) {
        SaveCheckpoint(output->dir / "best.ckpt", model, data.caption_vocab, data.attribute_vocab);
      }
    }
  }
  return result;
}

bool GradientCheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.passed; });
}

GradientCheckReport GradientCheck(const std::vector<TensorRef>& params,
                                  const std::vector<TensorRef>& analytic,
                                  const std::function<double()>& loss, double tolerance,
                                  size_t coordinates_per_group, uint64_t seed, double step,
                                  double abs_floor) {
  if (params.size() != analytic.size()) {
    throw std::invalid_argument("parameter and gradient layouts differ");
  }
  Rng rng(seed);
  GradientCheckReport report;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto n = static_cast<size_t>(params[i].size());
    std::vector<size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > coordinates_per_group) {
      for (size_t j = 0; j < coordinates_per_group; ++j) {
        std::swap(coords[j], coords[j + rng.UniformInt(n - j)]);
      }
      coords.resize(coordinates_per_group);
    }
    GradientCheckGroup group{params[i].name, coords.size(), 0.0, true};
    for (size_t c : coords) {
      double& theta = params[i].data[c];
      const double saved = theta;
      theta = saved + step;
      const double plus = loss();
      theta = saved - step;
      const double minus = loss();
      theta = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[i].data[c];
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      group.max_relative_error = std::max(group.max_relative_error, std::abs(a - numeric) / denom);
    }
    group.passed = group.max_relative_error <= tolerance;
    report.groups.push_back(group);
  }
  return report;
}

}  // namespace dapcap
