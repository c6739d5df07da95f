#include "dapcap/mil_attribute_head.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dapcap::mil {

InstanceScores ApnetForward(const nn::Linear& apnet, const Matrix& x) {
  if (x.cols() == 0) throw std::invalid_argument("attribute prediction needs >= 1 instance");
  InstanceScores s;
  s.x = x;
  s.logits = nn::LinearForward(apnet, x);
  s.probs = s.logits.unaryExpr([](double z) {
    const double sig = 1.0 / (1.0 + std::exp(-z));
    return std::clamp(sig, kProbabilityEps, 1.0 - kProbabilityEps);
  });
  return s;
}

Matrix ApnetBackward(const nn::Linear& apnet, const InstanceScores& scores,
                     const Matrix& dprobs, nn::Linear* grad) {
  Matrix dlogits(dprobs.rows(), dprobs.cols());
  for (Eigen::Index j = 0; j < dprobs.cols(); ++j) {
    for (Eigen::Index i = 0; i < dprobs.rows(); ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-scores.logits(i, j)));
      const bool clamped = sig < kProbabilityEps || sig > 1.0 - kProbabilityEps;
      dlogits(i, j) = clamped ? 0.0 : dprobs(i, j) * sig * (1.0 - sig);
    }
  }
  return nn::LinearBackward(apnet, scores.x, dlogits, grad);
}

Vector NoisyOr(const Matrix& p_raw) {
  Vector p(p_raw.rows());
  for (Eigen::Index k = 0; k < p_raw.rows(); ++k) {
    double log_none = 0.0;
    for (Eigen::Index l = 0; l < p_raw.cols(); ++l) log_none += std::log1p(-p_raw(k, l));
    p(k) = -std::expm1(log_none);
  }
  return p;
}

Matrix NoisyOrBackward(const Matrix& p_raw, const Vector& p, const Vector& dp) {
  // dp_k/dP[k, l] = prod_{l' != l} (1 - P[k, l']) = (1 - p_k) / (1 - P[k, l]).
  Matrix d(p_raw.rows(), p_raw.cols());
  for (Eigen::Index k = 0; k < p_raw.rows(); ++k)
    for (Eigen::Index l = 0; l < p_raw.cols(); ++l)
      d(k, l) = dp(k) * (1.0 - p(k)) / (1.0 - p_raw(k, l));
  return d;
}

double BceLoss(const Vector& p, const MultiHotLabel& label, Vector* dp) {
  if (static_cast<size_t>(p.size()) != label.size()) {
    throw std::invalid_argument("probability and label lengths differ");
  }
  if (dp) *dp = Vector::Zero(p.size());
  if (label.k_pos == 0) return 0.0;
  const double norm = 1.0 / static_cast<double>(label.k_pos);
  double loss = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const bool clamped = p(k) < kProbabilityEps || p(k) > 1.0 - kProbabilityEps;
    const double q = std::clamp(p(k), kProbabilityEps, 1.0 - kProbabilityEps);
    if (label.bits[k]) {
      loss -= std::log(q);
      if (dp && !clamped) (*dp)(k) = -norm / q;
    } else {
      loss -= std::log1p(-q);
      if (dp && !clamped) (*dp)(k) = norm / (1.0 - q);
    }
  }
  return loss * norm;
}

double RegLoss(const Matrix& p_raw, size_t k_pos, size_t k, Matrix* dp_raw) {
  if (k == 0) throw std::invalid_argument("K must be >= 1");
  const double excess = p_raw.mean() - static_cast<double>(k_pos) / static_cast<double>(k);
  if (dp_raw) {
    *dp_raw = Matrix::Constant(p_raw.rows(), p_raw.cols(),
                               excess > 0.0 ? 1.0 / static_cast<double>(p_raw.size()) : 0.0);
  }
  return std::max(excess, 0.0);
}

AttributeLoss AttributePredictionLoss(const nn::Linear& apnet, const Matrix& x,
                                      const MultiHotLabel& label) {
  AttributeLoss out;
  out.scores = ApnetForward(apnet, x);
  out.merged = NoisyOr(out.scores.probs);
  out.has_positives = label.k_pos > 0;
  out.bce = BceLoss(out.merged, label);
  out.reg = RegLoss(out.scores.probs, label.k_pos, label.size());
  out.total = out.bce + out.reg;
  return out;
}

Matrix AttributePredictionBackward(const nn::Linear& apnet, const AttributeLoss& loss,
                                   const MultiHotLabel& label, double bce_scale,
                                   double reg_scale, nn::Linear* grad) {
  Vector dp;
  BceLoss(loss.merged, label, &dp);
  Matrix dprobs = NoisyOrBackward(loss.scores.probs, loss.merged, dp * bce_scale);
  Matrix dreg;
  RegLoss(loss.scores.probs, label.k_pos, label.size(), &dreg);
  dprobs += reg_scale * dreg;
  return ApnetBackward(apnet, loss.scores, dprobs, grad);
}

}  // namespace dapcap::mil
