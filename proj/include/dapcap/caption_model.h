#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dapcap/attribute_supervision.h"
#include "dapcap/data_io.h"
#include "dapcap/nn.h"
#include "dapcap/rng.h"
#include "json.hpp"

namespace dapcap {

using nn::Matrix;
using nn::Vector;

struct ModalitySpec {
  std::string name;
  int dim = 0;
  bool operator==(const ModalitySpec&) const = default;
};

struct CaptionModelConfig {
  int hidden_size = 512;
  int num_decoder_layers = 1;
  double attention_dropout = 0.1;
  double dropout = 0.5;
  int max_length = 30;  // T_max, counting BOS and EOS
  std::vector<ModalitySpec> modalities;
  int vocab_size = CaptionVocabulary::kNumSpecials;
  int num_attributes = 500;

  int num_heads() const { return hidden_size / nn::kHeadSize; }
  int ffn_size() const { return 4 * hidden_size; }

  // Throws std::invalid_argument on inconsistent values.
  void Validate() const;

  nlohmann::json ToJson() const;
  static CaptionModelConfig FromJson(const nlohmann::json& doc);
};

struct ModalityProjection {
  nn::Linear fc;
  nn::LayerNorm ln;
};

struct DecoderLayerParams {
  nn::Attention self_attention;
  nn::LayerNorm self_ln;
  nn::Attention cross_attention;
  nn::LayerNorm cross_ln;
  nn::Linear ffn_in;
  nn::Linear ffn_out;
  nn::LayerNorm ffn_ln;
};

// Named view of one parameter tensor.
struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  bool decay;  // false for biases and layer-norm parameters

  Eigen::Index size() const { return rows * cols; }
  std::span<double> values() const { return {data, static_cast<size_t>(size())}; }
};

struct CaptionModelParams {
  std::vector<ModalityProjection> projections;
  Matrix word_embeddings;      // (d_h, |V|)
  Matrix position_embeddings;  // (d_h, T_max)
  nn::LayerNorm embedding_ln;
  std::vector<DecoderLayerParams> layers;
  nn::Linear head;  // d_h -> |V|
  nn::Linear video_apnet;  // d_h -> K
  nn::Linear text_apnet;   // d_h -> K

  // All-zero parameters with the shapes implied by `config`.
  static CaptionModelParams Zeros(const CaptionModelConfig& config);

  // Stable order; identical across instances built from the same config.
  std::vector<TensorRef> Tensors();
  size_t NumParameters();
  void SetZero();
};

// Closed-form parameter count of one post-LN decoder layer of width d.
size_t DecoderLayerParameterCount(size_t d);

// Forward caches for one training sample.
struct EncoderCache {
  std::vector<Matrix> inputs;  // (d_m, N) per modality
  std::vector<nn::LayerNormCache> ln;
  Matrix dropout;
};

struct EmbeddingCache {
  std::vector<int> ids;
  nn::LayerNormCache ln;
  Matrix dropout;
};

struct DecoderLayerCache {
  nn::AttentionCache self_attention, cross_attention;
  nn::LayerNormCache self_ln, cross_ln, ffn_ln;
  Matrix self_dropout, cross_dropout, ffn_dropout;
  Matrix ffn_input, ffn_hidden;  // pre-activation hidden
};

class CaptionModel {
 public:
  CaptionModel() = default;
  // Truncated-normal (std 0.02) weights, zero biases, identity layer norms.
  CaptionModel(CaptionModelConfig config, uint64_t seed);
  CaptionModel(CaptionModelConfig config, CaptionModelParams params);

  const CaptionModelConfig& config() const { return config_; }
  const CaptionModelParams& params() const { return params_; }
  CaptionModelParams& params() { return params_; }

  // F: (d_h, M*N); modality blocks of N columns each, in config order.
  // Dropout applies only when rng != nullptr.
  Matrix Encode(const std::vector<Matrix>& inputs, Rng* rng = nullptr,
                EncoderCache* cache = nullptr) const;
  void EncodeBackward(const EncoderCache& cache, const Matrix& dfeatures,
                      CaptionModelParams* grad) const;

  // E: (d_h, t), column i = LN(W^w[:, ids[i]] + W^p[:, i]).
  Matrix Embed(std::span<const int> ids, Rng* rng = nullptr,
               EmbeddingCache* cache = nullptr) const;
  void EmbedBackward(const EmbeddingCache& cache, const Matrix& dembedded,
                     CaptionModelParams* grad) const;

  // Hidden states (d_h, t) of the causal decoder stack.
  Matrix Decode(const Matrix& embedded, const Matrix& features, Rng* rng = nullptr,
                std::vector<DecoderLayerCache>* caches = nullptr) const;
  void DecodeBackward(const std::vector<DecoderLayerCache>& caches, const Matrix& dhidden,
                      CaptionModelParams* grad, Matrix* dembedded, Matrix* dfeatures) const;

  // Log-probabilities over the vocabulary, one column per hidden state.
  Matrix HeadLogProbs(const Matrix& hidden) const;

  // -sum_t log p(targets[t] | hidden[:, t]). With `grad` set, accumulates
  // `scale` times the head gradient and writes scale * dL/dhidden.
  double CaptionNll(const Matrix& hidden, std::span<const int> targets, double scale = 0.0,
                    CaptionModelParams* grad = nullptr, Matrix* dhidden = nullptr) const;

  struct StepOutput {
    Vector hidden;         // h_t
    Vector distribution;   // softmax(Head(h_t))
  };
  // Uses the last column of `embedded` as the current position.
  StepOutput DecodeStep(const Matrix& embedded, const Matrix& features) const;

 private:
  CaptionModelConfig config_;
  CaptionModelParams params_;
};

// Converts (N, d_m) feature matrices, in config modality order, into the
// (d_m, N) model inputs. Throws on a missing modality or width mismatch.
std::vector<Matrix> PrepareInputs(const CaptionModelConfig& config, const VideoRecord& record);

// Number of leading non-PAD ids.
size_t CaptionLength(std::span<const int> ids);

struct CaptionExample {
  const std::vector<Matrix>* inputs;
  std::vector<int> ids;
};

// Batch L_cap: mean over samples of the per-sample token sums, in eval mode.
// Throws std::invalid_argument when a sample has no non-PAD target.
double CaptionLoss(const CaptionModel& model, std::span<const CaptionExample> batch);

struct Checkpoint {
  CaptionModel model;
  CaptionVocabulary caption_vocab;
  AttributeVocabulary attribute_vocab;
};

// Binary archive: magic, JSON header (config, vocabularies, tensor table
// with names and shapes), then raw little-endian float64 tensor data.
void SaveCheckpoint(const std::filesystem::path& path, const CaptionModel& model,
                    const CaptionVocabulary& caption_vocab,
                    const AttributeVocabulary& attribute_vocab);
// Throws std::runtime_error on any missing tensor or shape mismatch.
Checkpoint LoadCheckpoint(const std::filesystem::path& path);

}  // namespace dapcap
