#pragma once

#include <span>
#include <vector>

#include "dapcap/caption_model.h"

namespace dapcap {

struct BeamHypothesis {
  std::vector<int> ids;  // starts with BOS
  double log_prob = 0.0;
  bool finished = false;  // last id is EOS or ids.size() == T_max
};

// Next-token log-probabilities after `prefix` (which starts with BOS). PAD and
// BOS are never generated and get -inf.
Vector NextTokenLogProbs(const CaptionModel& model, std::span<const int> prefix,
                         const Matrix& features);

// Argmax at each step (ties to the lowest id) until EOS or max_length ids.
std::vector<int> GreedyDecode(const CaptionModel& model, const Matrix& features,
                              size_t max_length);

struct BeamResult {
  std::vector<int> best;
  std::vector<BeamHypothesis> nbest;  // best first, at most beam_size
};

// Beam search over summed log-probabilities. Each step keeps the top
// beam_size expansions (ties: parent order, then token id); finished
// expansions retire into a pool of size beam_size.
BeamResult BeamDecode(const CaptionModel& model, const Matrix& features, size_t beam_size,
                      size_t max_length, bool length_normalize = false);

}  // namespace dapcap
