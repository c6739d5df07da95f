#pragma once

#include <span>
#include <vector>

#include "dapcap/attribute_supervision.h"
#include "dapcap/caption_model.h"
#include "dapcap/mil_attribute_head.h"
#include "dapcap/rng.h"
#include "json.hpp"

namespace dapcap {

struct DapWeights {
  double lambda_video = 1.0;  // λ1
  double lambda_text = 1.0;   // λ2
};

// N' = max(1, ceil(N * r)).
size_t SampledFrameCount(size_t num_frames, double ratio);

// N' distinct frame indices drawn uniformly without replacement, ascending.
std::vector<int> DrawFrameSubset(size_t num_frames, double ratio, Rng& rng);

// Keeps the columns of `frames` inside every modality block of F, preserving
// order. F has num_modalities blocks of equal width.
Matrix SparseSample(const Matrix& features, size_t num_modalities, std::span<const int> frames);

// Draws r uniformly on (0, 1] and a matching frame subset.
std::vector<int> DrawSparseSample(size_t num_frames, Rng& rng);

// L^V_ap on video features. With rng == nullptr (evaluation) the full F is
// used; otherwise a fresh r and frame subset are drawn.
double VapLoss(const CaptionModel& model, const Matrix& features, const MultiHotLabel& label,
               Rng* rng = nullptr);

// L^T_ap over the non-PAD token embeddings of an encoded caption.
double TapLoss(const CaptionModel& model, std::span<const int> caption_ids,
               const MultiHotLabel& label);

struct LossBreakdown {
  double caption = 0.0;   // L_cap
  double video_ap = 0.0;  // L^V_ap
  double text_ap = 0.0;   // L^T_ap
  double video_bce = 0.0, video_reg = 0.0;
  double text_bce = 0.0, text_reg = 0.0;
  double total = 0.0;     // L

  double bce() const { return video_bce + text_bce; }
  double reg() const { return video_reg + text_reg; }

  LossBreakdown& operator+=(const LossBreakdown& other);
  LossBreakdown& operator/=(double divisor);
  nlohmann::json ToJson() const;
};

struct TrainingExample {
  const std::vector<Matrix>* inputs = nullptr;  // (d_m, N) per modality
  std::vector<int> caption;                     // encoded, length T_max
  const MultiHotLabel* label = nullptr;
  std::vector<int> frames;  // VAP frame subset; empty means every frame
};

struct LossOptions {
  DapWeights weights;
  double caption_weight = 1.0;  // 0 isolates the attribute terms
};

// L = L_cap + λ1 L^V_ap + λ2 L^T_ap averaged over the batch: L_cap and L_reg
// are sample means, L_bce averages over samples with K_pos >= 1 only.
// `dropout_rng` enables dropout; `grad`, when given, accumulates dL/dθ.
LossBreakdown TotalLoss(const CaptionModel& model, std::span<const TrainingExample> batch,
                        const LossOptions& options, Rng* dropout_rng = nullptr,
                        CaptionModelParams* grad = nullptr);

}  // namespace dapcap
