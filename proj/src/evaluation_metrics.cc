#include "dapcap/evaluation_metrics.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "dapcap/dap_objectives.h"
#include "dapcap/decoding.h"
#include "dapcap/mil_attribute_head.h"
#include "dapcap/training_engine.h"

namespace dapcap {

namespace {

constexpr int kMaxOrder = 4;
using NgramCounts = std::array<std::unordered_map<std::string, int>, kMaxOrder>;

NgramCounts CountNgrams(const Tokens& tokens) {
  NgramCounts counts;
  for (int n = 1; n <= kMaxOrder; ++n) {
    for (size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string key = tokens[i];
      for (int j = 1; j < n; ++j) key += " " + tokens[i + j];
      ++counts[n - 1][key];
    }
  }
  return counts;
}

void CheckInputs(const CaptionMap& candidates, const ReferenceMap& references) {
  if (candidates.empty()) throw std::invalid_argument("no candidate captions to score");
  for (const auto& [id, caption] : candidates) {
    auto it = references.find(id);
    if (it == references.end() || it->second.empty()) {
      throw std::invalid_argument("candidate " + id + " has no reference captions");
    }
  }
}

size_t LcsLength(const Tokens& a, const Tokens& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double Bleu4(const CaptionMap& candidates, const ReferenceMap& references) {
  CheckInputs(candidates, references);
  std::array<double, kMaxOrder> correct{}, total{};
  double candidate_length = 0.0, reference_length = 0.0;
  for (const auto& [id, caption] : candidates) {
    const Tokens hyp = TokenizeCaption(caption);
    const NgramCounts hyp_counts = CountNgrams(hyp);
    NgramCounts max_ref;
    size_t closest = 0;
    bool first = true;
    for (const auto& ref : references.at(id)) {
      const Tokens r = TokenizeCaption(ref);
      const auto diff = [&](size_t len) {
        return std::abs(static_cast<long>(len) - static_cast<long>(hyp.size()));
      };
      if (first || diff(r.size()) < diff(closest) ||
          (diff(r.size()) == diff(closest) && r.size() < closest)) {
        closest = r.size();
        first = false;
      }
      const NgramCounts rc = CountNgrams(r);
      for (int n = 0; n < kMaxOrder; ++n) {
        for (const auto& [g, c] : rc[n]) max_ref[n][g] = std::max(max_ref[n][g], c);
      }
    }
    for (int n = 0; n < kMaxOrder; ++n) {
      for (const auto& [g, c] : hyp_counts[n]) {
        auto it = max_ref[n].find(g);
        if (it != max_ref[n].end()) correct[n] += std::min(c, it->second);
      }
      total[n] += static_cast<double>(hyp.size() >= static_cast<size_t>(n + 1) ? hyp.size() - n : 0);
    }
    candidate_length += static_cast<double>(hyp.size());
    reference_length += static_cast<double>(closest);
  }
  double log_precision = 0.0;
  for (int n = 0; n < kMaxOrder; ++n) {
    if (correct[n] == 0.0 || total[n] == 0.0) return 0.0;
    log_precision += std::log(correct[n] / total[n]) / kMaxOrder;
  }
  const double brevity =
      candidate_length >= reference_length ? 1.0 : std::exp(1.0 - reference_length / candidate_length);
  return brevity * std::exp(log_precision);
}

double RougeL(const CaptionMap& candidates, const ReferenceMap& references) {
  CheckInputs(candidates, references);
  constexpr double kBeta = 1.2;
  double sum = 0.0;
  for (const auto& [id, caption] : candidates) {
    const Tokens hyp = TokenizeCaption(caption);
    double best_precision = 0.0, best_recall = 0.0;
    for (const auto& ref : references.at(id)) {
      const Tokens r = TokenizeCaption(ref);
      const auto lcs = static_cast<double>(LcsLength(hyp, r));
      if (!hyp.empty()) best_precision = std::max(best_precision, lcs / static_cast<double>(hyp.size()));
      if (!r.empty()) best_recall = std::max(best_recall, lcs / static_cast<double>(r.size()));
    }
    if (best_precision > 0.0 && best_recall > 0.0) {
      sum += (1.0 + kBeta * kBeta) * best_precision * best_recall /
             (best_recall + kBeta * kBeta * best_precision);
    }
  }
  return sum / static_cast<double>(candidates.size());
}

double CiderD(const CaptionMap& candidates, const ReferenceMap& references) {
  CheckInputs(candidates, references);
  constexpr double kSigma = 6.0;
  if (candidates.size() < 2) {
    std::cerr << "warning: CIDEr-D on a single video; idf is degenerate\n";
  }

  std::vector<NgramCounts> hyp_counts;
  std::vector<std::vector<NgramCounts>> ref_counts;
  std::unordered_map<std::string, double> document_frequency;
  for (const auto& [id, caption] : candidates) {
    hyp_counts.push_back(CountNgrams(TokenizeCaption(caption)));
    auto& refs = ref_counts.emplace_back();
    std::unordered_set<std::string> seen;
    for (const auto& ref : references.at(id)) {
      refs.push_back(CountNgrams(TokenizeCaption(ref)));
      for (const auto& order : refs.back()) {
        for (const auto& [g, c] : order) seen.insert(g);
      }
    }
    for (const auto& g : seen) document_frequency[g] += 1.0;
  }
  const double log_corpus = std::log(static_cast<double>(candidates.size()));

  struct TfIdf {
    std::array<std::unordered_map<std::string, double>, kMaxOrder> weights;
    std::array<double, kMaxOrder> norm{};
    double length = 0.0;  // bigram count
  };
  auto to_vector = [&](const NgramCounts& counts) {
    TfIdf v;
    for (int n = 0; n < kMaxOrder; ++n) {
      for (const auto& [g, tf] : counts[n]) {
        auto it = document_frequency.find(g);
        const double df = it == document_frequency.end() ? 0.0 : it->second;
        const double w = tf * (log_corpus - std::log(std::max(1.0, df)));
        v.weights[n][g] = w;
        v.norm[n] += w * w;
        if (n == 1) v.length += tf;
      }
      v.norm[n] = std::sqrt(v.norm[n]);
    }
    return v;
  };

  double total = 0.0;
  for (size_t i = 0; i < hyp_counts.size(); ++i) {
    const TfIdf hyp = to_vector(hyp_counts[i]);
    std::array<double, kMaxOrder> score{};
    for (const auto& rc : ref_counts[i]) {
      const TfIdf ref = to_vector(rc);
      const double delta = hyp.length - ref.length;
      const double penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
      for (int n = 0; n < kMaxOrder; ++n) {
        double dot = 0.0;
        for (const auto& [g, w] : hyp.weights[n]) {
          auto it = ref.weights[n].find(g);
          if (it != ref.weights[n].end()) dot += std::min(w, it->second) * it->second;
        }
        if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) dot /= hyp.norm[n] * ref.norm[n];
        score[n] += dot * penalty;
      }
    }
    const double mean = std::accumulate(score.begin(), score.end(), 0.0) / kMaxOrder;
    total += mean / static_cast<double>(ref_counts[i].size()) * 10.0;
  }
  return total / static_cast<double>(hyp_counts.size());
}

DiversityMetrics ComputeDiversity(const std::vector<std::string>& candidates,
                                  const std::vector<std::string>& train_captions) {
  DiversityMetrics out;
  if (candidates.empty()) return out;
  auto joined = [](const Tokens& t) {
    std::string s;
    for (const auto& w : t) s += w + " ";
    return s;
  };
  std::unordered_set<std::string> train;
  for (const auto& c : train_captions) train.insert(joined(TokenizeCaption(c)));
  const std::string unknown = TokenizeCaption(CaptionVocabulary().token(CaptionVocabulary::kUnk)).front();

  size_t novel = 0;
  std::set<std::string> distinct, words;
  for (const auto& c : candidates) {
    const Tokens t = TokenizeCaption(c);
    const std::string key = joined(t);
    if (!train.contains(key)) ++novel;
    distinct.insert(key);
    for (const auto& w : t) {
      if (w != unknown) words.insert(w);
    }
  }
  const double n = static_cast<double>(candidates.size());
  out.novel_pct = 100.0 * static_cast<double>(novel) / n;
  out.unique_pct = 100.0 * static_cast<double>(distinct.size()) / n;
  out.vocab_used = words.size();
  return out;
}

double AveragePrecision(const std::vector<size_t>& order, const std::vector<bool>& positive) {
  double hits = 0.0, sum = 0.0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    if (positive[order[rank]]) {
      hits += 1.0;
      sum += hits / static_cast<double>(rank + 1);
    }
  }
  return hits > 0.0 ? sum / hits : 0.0;
}

double AttributeMap(const std::vector<std::string>& video_ids, const std::vector<Vector>& scores,
                    const std::vector<MultiHotLabel>& labels) {
  if (video_ids.size() != scores.size() || scores.size() != labels.size()) {
    throw std::invalid_argument("attribute mAP inputs have different lengths");
  }
  if (scores.empty()) throw std::invalid_argument("attribute mAP needs at least one video");
  const auto num_attributes = static_cast<size_t>(scores.front().size());
  double sum = 0.0;
  size_t counted = 0;
  std::vector<size_t> order(scores.size());
  std::vector<bool> positive(scores.size());
  for (size_t k = 0; k < num_attributes; ++k) {
    bool any = false;
    for (size_t v = 0; v < labels.size(); ++v) {
      positive[v] = labels[v].bits.at(k) != 0;
      any = any || positive[v];
    }
    if (!any) continue;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      const double sa = scores[a](static_cast<Eigen::Index>(k));
      const double sb = scores[b](static_cast<Eigen::Index>(k));
      if (sa != sb) return sa > sb;
      return video_ids[a] < video_ids[b];
    });
    sum += AveragePrecision(order, positive);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("no attribute has a positive video");
  return sum / static_cast<double>(counted);
}

nlohmann::json MetricReport::ToJson() const {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [frames, value] : map_curve) curve.push_back({{"frames", frames}, {"mAP", value}});
  return {{"BLEU-4", bleu4},
          {"ROUGE-L", rouge_l},
          {"CIDEr-D", cider},
          {"Meta-Sum (no METEOR)", meta_sum_partial},
          {"Novel", novel_pct},
          {"Unique", unique_pct},
          {"Vocab", vocab_used},
          {"attribute_mAP", attribute_map},
          {"mAP_vs_frames", curve},
          {"captions", captions}};
}

std::string MetricReport::MapCurveCsv() const {
  std::ostringstream out;
  out << "frames,mAP\n";
  out.precision(10);
  for (const auto& [frames, value] : map_curve) out << frames << "," << value << "\n";
  return out.str();
}

std::vector<int> UniformFrameIndices(size_t num_frames, size_t count) {
  std::vector<int> idx;
  if (count == 0) throw std::invalid_argument("frame count must be >= 1");
  if (count >= num_frames) {
    idx.resize(num_frames);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
  for (size_t i = 0; i < count; ++i) {
    idx.push_back(static_cast<int>((2 * i + 1) * num_frames / (2 * count)));
  }
  return idx;
}

Vector PredictVideoAttributes(const CaptionModel& model, const std::vector<Matrix>& inputs,
                              const std::vector<int>& frames) {
  Matrix features = model.Encode(inputs);
  if (!frames.empty()) features = SparseSample(features, inputs.size(), frames);
  return mil::NoisyOr(mil::ApnetForward(model.params().video_apnet, features).probs);
}

MetricReport EvaluateRun(const Checkpoint& checkpoint, const std::vector<VideoRecord>& records,
                         const EvaluateOptions& options) {
  const CaptionModel& model = checkpoint.model;
  const PreparedDataset data = PrepareWithVocabularies(records, model, checkpoint.caption_vocab,
                                                       checkpoint.attribute_vocab);
  const auto videos = data.InSplit(options.split);
  if (videos.empty()) throw std::invalid_argument("split " + SplitName(options.split) + " is empty");

  MetricReport report;
  ReferenceMap references;
  std::vector<std::string> ids;
  std::vector<MultiHotLabel> labels;
  std::vector<Vector> full_scores;
  for (const auto* v : videos) {
    const Matrix features = model.Encode(v->inputs);
    const auto ids_out = BeamDecode(model, features, options.beam_size,
                                    static_cast<size_t>(model.config().max_length))
                             .best;
    report.captions[v->video_id] = DecodeCaption(ids_out, checkpoint.caption_vocab);
    references[v->video_id] = v->raw_captions;
    ids.push_back(v->video_id);
    labels.push_back(v->label);
    full_scores.push_back(PredictVideoAttributes(model, v->inputs));
  }
  report.bleu4 = 100.0 * Bleu4(report.captions, references);
  report.rouge_l = 100.0 * RougeL(report.captions, references);
  report.cider = 100.0 * CiderD(report.captions, references);
  report.meta_sum_partial = report.bleu4 + report.rouge_l + report.cider;

  std::vector<std::string> train_captions;
  for (const auto& r : records) {
    if (r.split == Split::kTrain) train_captions.insert(train_captions.end(), r.captions.begin(), r.captions.end());
  }
  std::vector<std::string> generated;
  for (const auto& [id, c] : report.captions) generated.push_back(c);
  const auto diversity = ComputeDiversity(generated, train_captions);
  report.novel_pct = diversity.novel_pct;
  report.unique_pct = diversity.unique_pct;
  report.vocab_used = diversity.vocab_used;

  report.attribute_map = AttributeMap(ids, full_scores, labels);
  for (size_t count : options.map_frame_counts) {
    std::vector<Vector> scores;
    for (const auto* v : videos) {
      const auto frames = UniformFrameIndices(static_cast<size_t>(v->inputs.front().cols()), count);
      scores.push_back(PredictVideoAttributes(model, v->inputs, frames));
    }
    report.map_curve.emplace_back(count, AttributeMap(ids, scores, labels));
  }
  return report;
}

}  // namespace dapcap
