#include "dapcap/caption_model.h"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace dapcap {

using nlohmann::json;

void CaptionModelConfig::Validate() const {
  if (hidden_size <= 0 || hidden_size % nn::kHeadSize != 0) {
    throw std::invalid_argument("hidden_size must be a positive multiple of 64");
  }
  if (num_decoder_layers < 1) throw std::invalid_argument("need at least one decoder layer");
  if (max_length < 2) throw std::invalid_argument("max_length must be >= 2");
  if (modalities.empty()) throw std::invalid_argument("at least one modality is required");
  for (const auto& m : modalities) {
    if (m.dim <= 0) throw std::invalid_argument("modality " + m.name + " has no width");
  }
  if (vocab_size < CaptionVocabulary::kNumSpecials) {
    throw std::invalid_argument("vocab_size must include the special tokens");
  }
  if (num_attributes < 1) throw std::invalid_argument("num_attributes must be >= 1");
  for (double p : {attention_dropout, dropout}) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
  }
}

json CaptionModelConfig::ToJson() const {
  json mods = json::array();
  for (const auto& m : modalities) mods.push_back({{"name", m.name}, {"dim", m.dim}});
  return {{"hidden_size", hidden_size},
          {"num_decoder_layers", num_decoder_layers},
          {"attention_dropout", attention_dropout},
          {"dropout", dropout},
          {"max_length", max_length},
          {"modalities", mods},
          {"vocab_size", vocab_size},
          {"num_attributes", num_attributes}};
}

CaptionModelConfig CaptionModelConfig::FromJson(const json& doc) {
  CaptionModelConfig c;
  c.hidden_size = doc.value("hidden_size", c.hidden_size);
  c.num_decoder_layers = doc.value("num_decoder_layers", c.num_decoder_layers);
  c.attention_dropout = doc.value("attention_dropout", c.attention_dropout);
  c.dropout = doc.value("dropout", c.dropout);
  c.max_length = doc.value("max_length", c.max_length);
  c.vocab_size = doc.value("vocab_size", c.vocab_size);
  c.num_attributes = doc.value("num_attributes", c.num_attributes);
  if (doc.contains("modalities")) {
    for (const auto& m : doc.at("modalities")) {
      c.modalities.push_back({m.at("name").get<std::string>(), m.value("dim", 0)});
    }
  }
  return c;
}

CaptionModelParams CaptionModelParams::Zeros(const CaptionModelConfig& config) {
  const Eigen::Index d = config.hidden_size;
  CaptionModelParams p;
  for (const auto& m : config.modalities) {
    p.projections.push_back({nn::Linear::Zeros(m.dim, d), {Vector::Zero(d), Vector::Zero(d)}});
  }
  p.word_embeddings = Matrix::Zero(d, config.vocab_size);
  p.position_embeddings = Matrix::Zero(d, config.max_length);
  p.embedding_ln = {Vector::Zero(d), Vector::Zero(d)};
  auto attention = [d] {
    return nn::Attention{nn::Linear::Zeros(d, d), nn::Linear::Zeros(d, d),
                         nn::Linear::Zeros(d, d), nn::Linear::Zeros(d, d)};
  };
  const nn::LayerNorm zero_ln{Vector::Zero(d), Vector::Zero(d)};
  for (int i = 0; i < config.num_decoder_layers; ++i) {
    p.layers.push_back({attention(), zero_ln, attention(), zero_ln,
                        nn::Linear::Zeros(d, config.ffn_size()),
                        nn::Linear::Zeros(config.ffn_size(), d), zero_ln});
  }
  p.head = nn::Linear::Zeros(d, config.vocab_size);
  p.video_apnet = nn::Linear::Zeros(d, config.num_attributes);
  p.text_apnet = nn::Linear::Zeros(d, config.num_attributes);
  return p;
}

namespace {

void AddLinear(std::vector<TensorRef>& out, const std::string& name, nn::Linear& l) {
  out.push_back({name + ".weight", l.weight.data(), l.weight.rows(), l.weight.cols(), true});
  out.push_back({name + ".bias", l.bias.data(), l.bias.rows(), 1, false});
}

void AddLayerNorm(std::vector<TensorRef>& out, const std::string& name, nn::LayerNorm& ln) {
  out.push_back({name + ".gain", ln.gain.data(), ln.gain.rows(), 1, false});
  out.push_back({name + ".bias", ln.bias.data(), ln.bias.rows(), 1, false});
}

void AddAttention(std::vector<TensorRef>& out, const std::string& name, nn::Attention& a) {
  AddLinear(out, name + ".query", a.query);
  AddLinear(out, name + ".key", a.key);
  AddLinear(out, name + ".value", a.value);
  AddLinear(out, name + ".output", a.output);
}

}  // namespace

std::vector<TensorRef> CaptionModelParams::Tensors() {
  std::vector<TensorRef> out;
  for (size_t m = 0; m < projections.size(); ++m) {
    const std::string prefix = "projection." + std::to_string(m);
    AddLinear(out, prefix + ".fc", projections[m].fc);
    AddLayerNorm(out, prefix + ".ln", projections[m].ln);
  }
  out.push_back({"word_embeddings", word_embeddings.data(), word_embeddings.rows(),
                 word_embeddings.cols(), true});
  out.push_back({"position_embeddings", position_embeddings.data(), position_embeddings.rows(),
                 position_embeddings.cols(), true});
  AddLayerNorm(out, "embedding_ln", embedding_ln);
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string prefix = "decoder." + std::to_string(i);
    auto& layer = layers[i];
    AddAttention(out, prefix + ".self_attention", layer.self_attention);
    AddLayerNorm(out, prefix + ".self_ln", layer.self_ln);
    AddAttention(out, prefix + ".cross_attention", layer.cross_attention);
    AddLayerNorm(out, prefix + ".cross_ln", layer.cross_ln);
    AddLinear(out, prefix + ".ffn_in", layer.ffn_in);
    AddLinear(out, prefix + ".ffn_out", layer.ffn_out);
    AddLayerNorm(out, prefix + ".ffn_ln", layer.ffn_ln);
  }
  AddLinear(out, "head", head);
  AddLinear(out, "video_apnet", video_apnet);
  AddLinear(out, "text_apnet", text_apnet);
  return out;
}

size_t CaptionModelParams::NumParameters() {
  size_t n = 0;
  for (const auto& t : Tensors()) n += static_cast<size_t>(t.size());
  return n;
}

void CaptionModelParams::SetZero() {
  for (auto& t : Tensors()) std::fill(t.values().begin(), t.values().end(), 0.0);
}

size_t DecoderLayerParameterCount(size_t d) {
  const size_t attention = 4 * (d * d + d);
  const size_t ffn = (d * 4 * d + 4 * d) + (4 * d * d + d);
  const size_t layer_norms = 3 * 2 * d;
  return 2 * attention + ffn + layer_norms;
}

CaptionModel::CaptionModel(CaptionModelConfig config, uint64_t seed)
    : config_(std::move(config)) {
  config_.Validate();
  params_ = CaptionModelParams::Zeros(config_);
  Rng rng(seed);
  for (auto& t : params_.Tensors()) {
    const bool is_ln_gain = t.name.ends_with(".gain");
    for (double& v : t.values()) {
      if (is_ln_gain) {
        v = 1.0;
      } else if (t.decay) {
        v = rng.TruncatedNormal(0.02);
      }
    }
  }
}

CaptionModel::CaptionModel(CaptionModelConfig config, CaptionModelParams params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.Validate();
}

std::vector<Matrix> PrepareInputs(const CaptionModelConfig& config, const VideoRecord& record) {
  std::vector<Matrix> inputs;
  inputs.reserve(config.modalities.size());
  for (const auto& m : config.modalities) {
    const FeatureMatrix& x = record.feature(m.name);
    if (x.cols() != m.dim) {
      throw std::invalid_argument("video " + record.video_id + ": modality " + m.name +
                                  " has width " + std::to_string(x.cols()) + ", model expects " +
                                  std::to_string(m.dim));
    }
    inputs.push_back(x.transpose().cast<double>());
  }
  return inputs;
}

Matrix CaptionModel::Encode(const std::vector<Matrix>& inputs, Rng* rng,
                            EncoderCache* cache) const {
  if (inputs.size() != config_.modalities.size()) {
    throw std::invalid_argument("expected " + std::to_string(config_.modalities.size()) +
                                " modalities, got " + std::to_string(inputs.size()));
  }
  const Eigen::Index frames = inputs.front().cols();
  Matrix features(config_.hidden_size, frames * static_cast<Eigen::Index>(inputs.size()));
  if (cache) {
    cache->inputs = inputs;
    cache->ln.assign(inputs.size(), {});
  }
  for (size_t m = 0; m < inputs.size(); ++m) {
    if (inputs[m].rows() != config_.modalities[m].dim || inputs[m].cols() != frames) {
      throw std::invalid_argument("modality " + config_.modalities[m].name +
                                  " input has the wrong shape");
    }
    const auto& proj = params_.projections[m];
    features.middleCols(static_cast<Eigen::Index>(m) * frames, frames) = nn::LayerNormForward(
        proj.ln, nn::LinearForward(proj.fc, inputs[m]), cache ? &cache->ln[m] : nullptr);
  }
  return nn::Dropout(features, config_.dropout, rng, cache ? &cache->dropout : nullptr);
}

void CaptionModel::EncodeBackward(const EncoderCache& cache, const Matrix& dfeatures,
                                  CaptionModelParams* grad) const {
  const Matrix d = nn::DropoutBackward(dfeatures, cache.dropout);
  const Eigen::Index frames = cache.inputs.front().cols();
  for (size_t m = 0; m < cache.inputs.size(); ++m) {
    const auto& proj = params_.projections[m];
    auto& gproj = grad->projections[m];
    Matrix dz = nn::LayerNormBackward(
        proj.ln, cache.ln[m], d.middleCols(static_cast<Eigen::Index>(m) * frames, frames),
        &gproj.ln);
    gproj.fc.weight.noalias() += dz * cache.inputs[m].transpose();
    gproj.fc.bias += dz.rowwise().sum();
  }
}

Matrix CaptionModel::Embed(std::span<const int> ids, Rng* rng, EmbeddingCache* cache) const {
  if (ids.size() > static_cast<size_t>(config_.max_length)) {
    throw std::out_of_range("embedding position " + std::to_string(ids.size() - 1) +
                            " exceeds max_length " + std::to_string(config_.max_length));
  }
  Matrix summed(config_.hidden_size, static_cast<Eigen::Index>(ids.size()));
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= config_.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside vocabulary");
    }
    summed.col(static_cast<Eigen::Index>(i)) =
        params_.word_embeddings.col(ids[i]) +
        params_.position_embeddings.col(static_cast<Eigen::Index>(i));
  }
  if (cache) cache->ids.assign(ids.begin(), ids.end());
  Matrix e = nn::LayerNormForward(params_.embedding_ln, summed, cache ? &cache->ln : nullptr);
  return nn::Dropout(e, config_.dropout, rng, cache ? &cache->dropout : nullptr);
}

void CaptionModel::EmbedBackward(const EmbeddingCache& cache, const Matrix& dembedded,
                                 CaptionModelParams* grad) const {
  const Matrix ds = nn::LayerNormBackward(
      params_.embedding_ln, cache.ln, nn::DropoutBackward(dembedded, cache.dropout),
      &grad->embedding_ln);
  for (size_t i = 0; i < cache.ids.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    grad->word_embeddings.col(cache.ids[i]) += ds.col(col);
    grad->position_embeddings.col(col) += ds.col(col);
  }
}

Matrix CaptionModel::Decode(const Matrix& embedded, const Matrix& features, Rng* rng,
                            std::vector<DecoderLayerCache>* caches) const {
  if (embedded.cols() == 0) throw std::invalid_argument("decoder input is empty");
  const int heads = config_.num_heads();
  if (caches) caches->assign(params_.layers.size(), {});
  Matrix x = embedded;
  for (size_t i = 0; i < params_.layers.size(); ++i) {
    const auto& layer = params_.layers[i];
    DecoderLayerCache* c = caches ? &(*caches)[i] : nullptr;
    Matrix a = nn::AttentionForward(layer.self_attention, x, x, heads, /*causal=*/true,
                                    config_.attention_dropout, rng,
                                    c ? &c->self_attention : nullptr);
    a = nn::Dropout(a, config_.dropout, rng, c ? &c->self_dropout : nullptr);
    Matrix h1 = nn::LayerNormForward(layer.self_ln, x + a, c ? &c->self_ln : nullptr);

    Matrix b = nn::AttentionForward(layer.cross_attention, h1, features, heads,
                                    /*causal=*/false, config_.attention_dropout, rng,
                                    c ? &c->cross_attention : nullptr);
    b = nn::Dropout(b, config_.dropout, rng, c ? &c->cross_dropout : nullptr);
    Matrix h2 = nn::LayerNormForward(layer.cross_ln, h1 + b, c ? &c->cross_ln : nullptr);

    Matrix u = nn::LinearForward(layer.ffn_in, h2);
    Matrix f = nn::LinearForward(layer.ffn_out, nn::Gelu(u));
    f = nn::Dropout(f, config_.dropout, rng, c ? &c->ffn_dropout : nullptr);
    x = nn::LayerNormForward(layer.ffn_ln, h2 + f, c ? &c->ffn_ln : nullptr);
    if (c) {
      c->ffn_input = std::move(h2);
      c->ffn_hidden = std::move(u);
    }
  }
  return x;
}

void CaptionModel::DecodeBackward(const std::vector<DecoderLayerCache>& caches,
                                  const Matrix& dhidden, CaptionModelParams* grad,
                                  Matrix* dembedded, Matrix* dfeatures) const {
  const int heads = config_.num_heads();
  Matrix dx = dhidden;
  for (size_t i = params_.layers.size(); i-- > 0;) {
    const auto& layer = params_.layers[i];
    auto& g = grad->layers[i];
    const auto& c = caches[i];

    Matrix dr3 = nn::LayerNormBackward(layer.ffn_ln, c.ffn_ln, dx, &g.ffn_ln);
    Matrix df = nn::DropoutBackward(dr3, c.ffn_dropout);
    Matrix dact = nn::LinearBackward(layer.ffn_out, nn::Gelu(c.ffn_hidden), df, &g.ffn_out);
    Matrix du = nn::GeluBackward(c.ffn_hidden, dact);
    Matrix dh2 = dr3 + nn::LinearBackward(layer.ffn_in, c.ffn_input, du, &g.ffn_in);

    Matrix dr2 = nn::LayerNormBackward(layer.cross_ln, c.cross_ln, dh2, &g.cross_ln);
    Matrix db = nn::DropoutBackward(dr2, c.cross_dropout);
    Matrix dq, dmem;
    nn::AttentionBackward(layer.cross_attention, c.cross_attention, db, heads,
                          &g.cross_attention, &dq, &dmem);
    *dfeatures += dmem;
    Matrix dh1 = dr2 + dq;

    Matrix dr1 = nn::LayerNormBackward(layer.self_ln, c.self_ln, dh1, &g.self_ln);
    Matrix da = nn::DropoutBackward(dr1, c.self_dropout);
    Matrix dself_q, dself_kv;
    nn::AttentionBackward(layer.self_attention, c.self_attention, da, heads,
                          &g.self_attention, &dself_q, &dself_kv);
    dx = dr1 + dself_q + dself_kv;
  }
  *dembedded = std::move(dx);
}

Matrix CaptionModel::HeadLogProbs(const Matrix& hidden) const {
  return nn::LogSoftmax(nn::LinearForward(params_.head, hidden));
}

double CaptionModel::CaptionNll(const Matrix& hidden, std::span<const int> targets, double scale,
                                CaptionModelParams* grad, Matrix* dhidden) const {
  if (static_cast<size_t>(hidden.cols()) != targets.size()) {
    throw std::invalid_argument("one hidden state per target token is required");
  }
  const Matrix log_probs = HeadLogProbs(hidden);
  double loss = 0.0;
  for (size_t t = 0; t < targets.size(); ++t) {
    loss -= log_probs(targets[t], static_cast<Eigen::Index>(t));
  }
  if (grad) {
    Matrix dlogits = log_probs.array().exp();
    for (size_t t = 0; t < targets.size(); ++t) {
      dlogits(targets[t], static_cast<Eigen::Index>(t)) -= 1.0;
    }
    dlogits *= scale;
    *dhidden = nn::LinearBackward(params_.head, hidden, dlogits, &grad->head);
  }
  return loss;
}

CaptionModel::StepOutput CaptionModel::DecodeStep(const Matrix& embedded,
                                                  const Matrix& features) const {
  const Matrix hidden = Decode(embedded, features);
  StepOutput out;
  out.hidden = hidden.col(hidden.cols() - 1);
  Vector logits = nn::LinearForward(params_.head, out.hidden);
  logits.array() -= logits.maxCoeff();
  out.distribution = logits.array().exp();
  out.distribution /= out.distribution.sum();
  return out;
}

size_t CaptionLength(std::span<const int> ids) {
  size_t n = 0;
  while (n < ids.size() && ids[n] != CaptionVocabulary::kPad) ++n;
  return n;
}

double CaptionLoss(const CaptionModel& model, std::span<const CaptionExample> batch) {
  if (batch.empty()) throw std::invalid_argument("empty caption batch");
  double total = 0.0;
  for (const auto& ex : batch) {
    const size_t n = CaptionLength(ex.ids);
    if (n < 2) throw std::invalid_argument("caption has no non-PAD target token");
    const std::span<const int> ids(ex.ids);
    const Matrix features = model.Encode(*ex.inputs);
    const Matrix hidden = model.Decode(model.Embed(ids.first(n - 1)), features);
    total += model.CaptionNll(hidden, ids.subspan(1, n - 1));
  }
  return total / static_cast<double>(batch.size());
}

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'A', 'P', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void SaveCheckpoint(const std::filesystem::path& path, const CaptionModel& model,
                    const CaptionVocabulary& caption_vocab,
                    const AttributeVocabulary& attribute_vocab) {
  // Tensors() needs mutable access for its pointers; the data is only read.
  auto& params = const_cast<CaptionModel&>(model).params();
  const auto tensors = params.Tensors();
  json table = json::array();
  for (const auto& t : tensors) table.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
  const std::string header = json{{"format_version", 1},
                                  {"config", model.config().ToJson()},
                                  {"caption_vocab", caption_vocab.ToJson()},
                                  {"attribute_vocab", attribute_vocab.ToJson()},
                                  {"tensors", table}}
                                 .dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint64_t header_size = header.size();
  out.write(reinterpret_cast<const char*>(&header_size), sizeof(header_size));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& t : tensors) {
    out.write(reinterpret_cast<const char*>(t.data),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  uint64_t header_size = 0;
  in.read(reinterpret_cast<char*>(&header_size), sizeof(header_size));
  std::string header(header_size, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path.string());
  const json doc = json::parse(header);

  auto config = CaptionModelConfig::FromJson(doc.at("config"));
  config.Validate();
  auto params = CaptionModelParams::Zeros(config);
  auto tensors = params.Tensors();
  const auto& table = doc.at("tensors");
  if (table.size() != tensors.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(table.size()) +
                             " tensors, config implies " + std::to_string(tensors.size()));
  }
  for (size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i];
    const auto name = table[i].at("name").get<std::string>();
    const auto shape = table[i].at("shape").get<std::vector<Eigen::Index>>();
    if (name != t.name || shape.size() != 2 || shape[0] != t.rows || shape[1] != t.cols) {
      throw std::runtime_error("checkpoint tensor " + name + " does not match expected " + t.name +
                               " of shape [" + std::to_string(t.rows) + ", " +
                               std::to_string(t.cols) + "]");
    }
    in.read(reinterpret_cast<char*>(t.data),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated data for tensor " + name);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("trailing bytes after tensor data in " + path.string());
  }

  Checkpoint ckpt{CaptionModel(config, std::move(params)),
                  CaptionVocabulary::FromJson(doc.at("caption_vocab")),
                  AttributeVocabulary::FromJson(doc.at("attribute_vocab"))};
  if (ckpt.caption_vocab.size() != static_cast<size_t>(config.vocab_size) ||
      ckpt.attribute_vocab.size() != static_cast<size_t>(config.num_attributes)) {
    throw std::runtime_error("checkpoint vocabulary sizes disagree with its config");
  }
  return ckpt;
}

}  // namespace dapcap
