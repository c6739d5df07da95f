#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dapcap/attribute_supervision.h"
#include "dapcap/caption_model.h"
#include "dapcap/data_io.h"
#include "json.hpp"

namespace dapcap {

using CaptionMap = std::map<std::string, std::string>;                  // video id -> caption
using ReferenceMap = std::map<std::string, std::vector<std::string>>;  // video id -> references

// Corpus BLEU-4: clipped 1..4-gram precisions with uniform weights and a
// brevity penalty against the closest reference length (shorter on ties).
// Result in [0, 1]. Throws std::invalid_argument on an empty candidate set or
// a candidate without references.
double Bleu4(const CaptionMap& candidates, const ReferenceMap& references);

// Mean over samples of the LCS F-measure (beta = 1.2), taking the best LCS
// precision and recall over each sample's references. Result in [0, 1].
double RougeL(const CaptionMap& candidates, const ReferenceMap& references);

// CIDEr-D: tf-idf n-gram (n = 1..4) cosine with clipping and a Gaussian
// length penalty (sigma = 6), averaged over n and references, times 10.
// idf comes from the reference corpus; one-video corpora log a warning.
double CiderD(const CaptionMap& candidates, const ReferenceMap& references);

struct DiversityMetrics {
  double novel_pct = 0.0;   // not among training captions
  double unique_pct = 0.0;  // distinct captions / all captions
  size_t vocab_used = 0;    // distinct words, excluding the unknown token
};

// Captions compare as token sequences after TokenizeCaption.
DiversityMetrics ComputeDiversity(const std::vector<std::string>& candidates,
                                  const std::vector<std::string>& train_captions);

// Average precision of one ranking: mean of precision@rank over the positives.
// `order` lists item indices best first.
double AveragePrecision(const std::vector<size_t>& order, const std::vector<bool>& positive);

// Mean over attributes with at least one positive of the AP of the videos
// ranked by predicted probability (ties broken by ascending video id).
// Throws std::invalid_argument when no attribute has a positive.
double AttributeMap(const std::vector<std::string>& video_ids, const std::vector<Vector>& scores,
                    const std::vector<MultiHotLabel>& labels);

struct MetricReport {
  // Quality metrics scaled by 100.
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  double meta_sum_partial = 0.0;  // BLEU-4 + ROUGE-L + CIDEr-D, no METEOR
  double novel_pct = 0.0;
  double unique_pct = 0.0;
  size_t vocab_used = 0;
  double attribute_map = 0.0;
  std::vector<std::pair<size_t, double>> map_curve;  // (frames, mAP)
  CaptionMap captions;

  nlohmann::json ToJson() const;
  std::string MapCurveCsv() const;
};

// Evenly spaced frame indices (centre of each of `count` equal segments);
// every frame when count >= num_frames.
std::vector<int> UniformFrameIndices(size_t num_frames, size_t count);

// Noisy-OR attribute probabilities from the video APNet on the given frames
// (all frames when empty), in eval mode.
Vector PredictVideoAttributes(const CaptionModel& model, const std::vector<Matrix>& inputs,
                              const std::vector<int>& frames = {});

struct EvaluateOptions {
  Split split = Split::kTest;
  size_t beam_size = 5;
  std::vector<size_t> map_frame_counts;
};

// Decodes the split, scores captions against its references, diversity
// against the manifest's training captions, and attribute mAP at full and
// subsampled frame counts.
MetricReport EvaluateRun(const Checkpoint& checkpoint, const std::vector<VideoRecord>& records,
                         const EvaluateOptions& options);

}  // namespace dapcap
