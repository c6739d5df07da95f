#include "dapcap/dap_objectives.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dapcap {

size_t SampledFrameCount(size_t num_frames, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("sampling ratio must lie in (0, 1]");
  const auto n = static_cast<size_t>(std::ceil(static_cast<double>(num_frames) * ratio));
  return std::clamp<size_t>(n, 1, std::max<size_t>(num_frames, 1));
}

std::vector<int> DrawFrameSubset(size_t num_frames, double ratio, Rng& rng) {
  const size_t keep = SampledFrameCount(num_frames, ratio);
  std::vector<int> all(num_frames);
  std::iota(all.begin(), all.end(), 0);
  if (keep == num_frames) return all;
  // Partial Fisher-Yates: the first `keep` slots are a uniform subset.
  for (size_t i = 0; i < keep; ++i) {
    std::swap(all[i], all[i + rng.UniformInt(num_frames - i)]);
  }
  all.resize(keep);
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<int> DrawSparseSample(size_t num_frames, Rng& rng) {
  return DrawFrameSubset(num_frames, rng.UniformOpenClosed(), rng);
}

Matrix SparseSample(const Matrix& features, size_t num_modalities, std::span<const int> frames) {
  if (num_modalities == 0 || features.cols() % static_cast<Eigen::Index>(num_modalities) != 0) {
    throw std::invalid_argument("feature columns are not a whole number of modality blocks");
  }
  const Eigen::Index n = features.cols() / static_cast<Eigen::Index>(num_modalities);
  Matrix out(features.rows(), static_cast<Eigen::Index>(num_modalities * frames.size()));
  Eigen::Index col = 0;
  for (size_t m = 0; m < num_modalities; ++m) {
    for (int f : frames) {
      if (f < 0 || f >= n) throw std::out_of_range("frame index outside the video");
      out.col(col++) = features.col(static_cast<Eigen::Index>(m) * n + f);
    }
  }
  return out;
}

namespace {

// Scatters dL/dF' back into the full-width dF.
void ScatterSampleGrad(const Matrix& dsampled, size_t num_modalities,
                       std::span<const int> frames, Matrix* dfeatures) {
  const Eigen::Index n = dfeatures->cols() / static_cast<Eigen::Index>(num_modalities);
  Eigen::Index col = 0;
  for (size_t m = 0; m < num_modalities; ++m) {
    for (int f : frames) dfeatures->col(static_cast<Eigen::Index>(m) * n + f) += dsampled.col(col++);
  }
}

}  // namespace

double VapLoss(const CaptionModel& model, const Matrix& features, const MultiHotLabel& label,
               Rng* rng) {
  const size_t modalities = model.config().modalities.size();
  if (rng == nullptr) {
    return mil::AttributePredictionLoss(model.params().video_apnet, features, label).total;
  }
  const size_t frames = static_cast<size_t>(features.cols()) / modalities;
  const auto subset = DrawSparseSample(frames, *rng);
  return mil::AttributePredictionLoss(model.params().video_apnet,
                                      SparseSample(features, modalities, subset), label)
      .total;
}

double TapLoss(const CaptionModel& model, std::span<const int> caption_ids,
               const MultiHotLabel& label) {
  const size_t n = CaptionLength(caption_ids);
  if (n == 0) throw std::invalid_argument("caption has no tokens");
  return mil::AttributePredictionLoss(model.params().text_apnet,
                                      model.Embed(caption_ids.first(n)), label)
      .total;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  caption += o.caption;
  video_ap += o.video_ap;
  text_ap += o.text_ap;
  video_bce += o.video_bce;
  video_reg += o.video_reg;
  text_bce += o.text_bce;
  text_reg += o.text_reg;
  total += o.total;
  return *this;
}

LossBreakdown& LossBreakdown::operator/=(double d) {
  caption /= d;
  video_ap /= d;
  text_ap /= d;
  video_bce /= d;
  video_reg /= d;
  text_bce /= d;
  text_reg /= d;
  total /= d;
  return *this;
}

nlohmann::json LossBreakdown::ToJson() const {
  return {{"L", total},          {"L_cap", caption},    {"L_vap", video_ap},
          {"L_tap", text_ap},    {"L_bce", bce()},      {"L_reg", reg()},
          {"L_vap_bce", video_bce}, {"L_vap_reg", video_reg}, {"L_tap_bce", text_bce},
          {"L_tap_reg", text_reg}};
}

LossBreakdown TotalLoss(const CaptionModel& model, std::span<const TrainingExample> batch,
                        const LossOptions& options, Rng* dropout_rng,
                        CaptionModelParams* grad) {
  if (batch.empty()) throw std::invalid_argument("empty training batch");
  const size_t modalities = model.config().modalities.size();
  const double batch_size = static_cast<double>(batch.size());
  const auto valid = std::count_if(batch.begin(), batch.end(),
                                   [](const TrainingExample& ex) { return ex.label->k_pos > 0; });
  const double bce_norm = valid > 0 ? 1.0 / static_cast<double>(valid) : 0.0;
  const double lv = options.weights.lambda_video;
  const double lt = options.weights.lambda_text;

  LossBreakdown sum;
  for (const auto& ex : batch) {
    const std::span<const int> ids(ex.caption);
    const size_t n = CaptionLength(ids);
    if (n < 2) throw std::invalid_argument("caption has no non-PAD target token");

    EncoderCache enc_cache;
    EmbeddingCache emb_cache;
    std::vector<DecoderLayerCache> dec_caches;
    const Matrix features = model.Encode(*ex.inputs, dropout_rng, grad ? &enc_cache : nullptr);
    const Matrix embedded = model.Embed(ids.first(n), dropout_rng, grad ? &emb_cache : nullptr);
    const Matrix decoder_in = embedded.leftCols(static_cast<Eigen::Index>(n - 1));
    const Matrix hidden =
        model.Decode(decoder_in, features, dropout_rng, grad ? &dec_caches : nullptr);

    Matrix dhidden;
    const double cap_scale = options.caption_weight / batch_size;
    sum.caption += model.CaptionNll(hidden, ids.subspan(1, n - 1), cap_scale, grad, &dhidden);

    std::vector<int> all_frames;
    std::span<const int> frames = ex.frames;
    if (frames.empty()) {
      all_frames.resize(static_cast<size_t>(ex.inputs->front().cols()));
      std::iota(all_frames.begin(), all_frames.end(), 0);
      frames = all_frames;
    }
    const Matrix sampled = SparseSample(features, modalities, frames);
    const auto vap = mil::AttributePredictionLoss(model.params().video_apnet, sampled, *ex.label);
    const auto tap = mil::AttributePredictionLoss(model.params().text_apnet, embedded, *ex.label);
    sum.video_bce += vap.bce;
    sum.video_reg += vap.reg;
    sum.text_bce += tap.bce;
    sum.text_reg += tap.reg;

    if (!grad) continue;
    Matrix dfeatures = Matrix::Zero(features.rows(), features.cols());
    Matrix dembedded = Matrix::Zero(embedded.rows(), embedded.cols());
    if (options.caption_weight != 0.0) {
      Matrix ddecoder_in;
      model.DecodeBackward(dec_caches, dhidden, grad, &ddecoder_in, &dfeatures);
      dembedded.leftCols(ddecoder_in.cols()) += ddecoder_in;
    }
    if (lv != 0.0) {
      const Matrix dsampled = mil::AttributePredictionBackward(
          model.params().video_apnet, vap, *ex.label, lv * bce_norm, lv / batch_size,
          &grad->video_apnet);
      ScatterSampleGrad(dsampled, modalities, frames, &dfeatures);
    }
    if (lt != 0.0) {
      dembedded += mil::AttributePredictionBackward(model.params().text_apnet, tap, *ex.label,
                                                    lt * bce_norm, lt / batch_size,
                                                    &grad->text_apnet);
    }
    model.EncodeBackward(enc_cache, dfeatures, grad);
    model.EmbedBackward(emb_cache, dembedded, grad);
  }

  LossBreakdown out;
  out.caption = sum.caption / batch_size;
  out.video_bce = sum.video_bce * bce_norm;
  out.video_reg = sum.video_reg / batch_size;
  out.text_bce = sum.text_bce * bce_norm;
  out.text_reg = sum.text_reg / batch_size;
  out.video_ap = out.video_bce + out.video_reg;
  out.text_ap = out.text_bce + out.text_reg;
  out.total = options.caption_weight * out.caption + lv * out.video_ap + lt * out.text_ap;
  return out;
}

}  // namespace dapcap
