#include "dapcap/decoding.h"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace dapcap {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double RankScore(const BeamHypothesis& h, bool length_normalize) {
  // Generated length excludes BOS.
  return length_normalize ? h.log_prob / static_cast<double>(h.ids.size() - 1) : h.log_prob;
}

}  // namespace

Vector NextTokenLogProbs(const CaptionModel& model, std::span<const int> prefix,
                         const Matrix& features) {
  const Matrix hidden = model.Decode(model.Embed(prefix), features);
  Vector lp = model.HeadLogProbs(hidden.rightCols(1));
  lp(CaptionVocabulary::kPad) = kNegInf;
  lp(CaptionVocabulary::kBos) = kNegInf;
  return lp;
}

std::vector<int> GreedyDecode(const CaptionModel& model, const Matrix& features,
                              size_t max_length) {
  std::vector<int> ids = {CaptionVocabulary::kBos};
  while (ids.size() < max_length) {
    const Vector lp = NextTokenLogProbs(model, ids, features);
    Eigen::Index best = 0;
    lp.maxCoeff(&best);  // first maximum, i.e. lowest id
    ids.push_back(static_cast<int>(best));
    if (best == CaptionVocabulary::kEos) break;
  }
  return ids;
}

BeamResult BeamDecode(const CaptionModel& model, const Matrix& features, size_t beam_size,
                      size_t max_length, bool length_normalize) {
  if (beam_size == 0) throw std::invalid_argument("beam_size must be >= 1");
  if (max_length < 2) throw std::invalid_argument("max_length must be >= 2");

  struct Candidate {
    double score;
    size_t parent;
    int token;
  };
  std::vector<BeamHypothesis> alive = {{{CaptionVocabulary::kBos}, 0.0, false}};
  std::vector<BeamHypothesis> pool;
  auto by_rank = [length_normalize](const BeamHypothesis& a, const BeamHypothesis& b) {
    return RankScore(a, length_normalize) > RankScore(b, length_normalize);
  };

  while (!alive.empty()) {
    std::vector<Candidate> candidates;
    for (size_t h = 0; h < alive.size(); ++h) {
      const Vector lp = NextTokenLogProbs(model, alive[h].ids, features);
      for (Eigen::Index t = 0; t < lp.size(); ++t) {
        if (lp(t) == kNegInf) continue;
        candidates.push_back({alive[h].log_prob + lp(t), h, static_cast<int>(t)});
      }
    }
    const size_t keep = std::min(beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<BeamHypothesis> next;
    for (size_t i = 0; i < keep; ++i) {
      const auto& c = candidates[i];
      BeamHypothesis h{alive[c.parent].ids, c.score, false};
      h.ids.push_back(c.token);
      h.finished = c.token == CaptionVocabulary::kEos || h.ids.size() >= max_length;
      (h.finished ? pool : next).push_back(std::move(h));
    }
    std::stable_sort(pool.begin(), pool.end(), by_rank);
    if (pool.size() > beam_size) pool.resize(beam_size);
    alive = std::move(next);

    // Raw scores only decrease with length, so a full pool that beats every
    // live hypothesis is final.
    if (!length_normalize && pool.size() == beam_size && !alive.empty()) {
      const double best_alive = alive.front().log_prob;
      if (best_alive < pool.back().log_prob) break;
    }
  }
  return {pool.front().ids, pool};
}

}  // namespace dapcap
