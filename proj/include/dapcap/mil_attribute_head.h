#pragma once

#include "dapcap/attribute_supervision.h"
#include "dapcap/nn.h"

// Multiple-instance attribute prediction: per-instance sigmoid scores from an
// affine APNet, noisy-OR merging over instances, K_pos-normalized BCE and the
// hinge regularizer that keeps instance scores conservative.
namespace dapcap::mil {

using nn::Matrix;
using nn::Vector;

inline constexpr double kProbabilityEps = 1e-7;

struct InstanceScores {
  Matrix x;       // (d_h, L) instances
  Matrix logits;  // (K, L)
  Matrix probs;   // P_raw, clamped to [eps, 1 - eps]
};

// Throws std::invalid_argument when there are no instances.
InstanceScores ApnetForward(const nn::Linear& apnet, const Matrix& x);
// dL/dx given dL/dP_raw; clamped cells pass no gradient.
Matrix ApnetBackward(const nn::Linear& apnet, const InstanceScores& scores,
                     const Matrix& dprobs, nn::Linear* grad);

// p_k = 1 - prod_l (1 - P_raw[k, l]), evaluated as 1 - exp(sum_l log1p(-P_raw[k, l])).
Vector NoisyOr(const Matrix& p_raw);
// dL/dP_raw given dL/dp.
Matrix NoisyOrBackward(const Matrix& p_raw, const Vector& p, const Vector& dp);

// -(1/K_pos) sum_k a_k log p_k + (1 - a_k) log(1 - p_k) with p clamped to
// [eps, 1 - eps]. Returns 0 (and zero gradient) when the label has no
// positives. `dp`, when given, receives dL/dp.
double BceLoss(const Vector& p, const MultiHotLabel& label, Vector* dp = nullptr);

// max(mean(P_raw) - K_pos/K, 0). `dp_raw`, when given, receives dL/dP_raw.
double RegLoss(const Matrix& p_raw, size_t k_pos, size_t k, Matrix* dp_raw = nullptr);

struct AttributeLoss {
  double bce = 0.0;
  double reg = 0.0;
  double total = 0.0;  // bce + reg
  bool has_positives = false;
  Vector merged;       // p
  InstanceScores scores;
};

AttributeLoss AttributePredictionLoss(const nn::Linear& apnet, const Matrix& x,
                                      const MultiHotLabel& label);

// Backpropagates bce_scale * L_bce + reg_scale * L_reg; returns dL/dx.
Matrix AttributePredictionBackward(const nn::Linear& apnet, const AttributeLoss& loss,
                                   const MultiHotLabel& label, double bce_scale,
                                   double reg_scale, nn::Linear* grad);

}  // namespace dapcap::mil
