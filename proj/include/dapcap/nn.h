#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dapcap/rng.h"

// Dense layers with explicit forward caches and hand-written backward passes.
// Activations are column-per-token: a (features x tokens) matrix.
// Backward functions accumulate parameter gradients into `grad`.
namespace dapcap::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr int kHeadSize = 64;

struct Linear {
  Matrix weight;  // (out, in)
  Vector bias;    // (out)

  static Linear Zeros(Eigen::Index in, Eigen::Index out) {
    return {Matrix::Zero(out, in), Vector::Zero(out)};
  }
};

struct LayerNorm {
  Vector gain;
  Vector bias;

  static LayerNorm Identity(Eigen::Index dim) {
    return {Vector::Ones(dim), Vector::Zero(dim)};
  }
};

struct Attention {
  Linear query, key, value, output;
};

Matrix LinearForward(const Linear& layer, const Matrix& x);
// Returns dL/dx.
Matrix LinearBackward(const Linear& layer, const Matrix& x, const Matrix& dy, Linear* grad);

struct LayerNormCache {
  Matrix normalized;          // (x - mean) / std, per column
  Eigen::RowVectorXd inv_std;
};

// Normalizes every column over the feature axis.
Matrix LayerNormForward(const LayerNorm& ln, const Matrix& x, LayerNormCache* cache);
Matrix LayerNormBackward(const LayerNorm& ln, const LayerNormCache& cache, const Matrix& dy,
                         LayerNorm* grad);

// Inverted dropout. With rng == nullptr or p == 0 returns x and clears mask.
Matrix Dropout(const Matrix& x, double p, Rng* rng, Matrix* mask);
Matrix DropoutBackward(const Matrix& dy, const Matrix& mask);

// Exact (erf) GELU.
Matrix Gelu(const Matrix& x);
Matrix GeluBackward(const Matrix& x, const Matrix& dy);

// Column-wise log-softmax.
Matrix LogSoftmax(const Matrix& logits);

struct AttentionCache {
  Matrix x, memory;
  Matrix q, k, v;
  std::vector<Matrix> probs;     // per head, (queries, keys)
  std::vector<Matrix> dropouts;  // per head mask, empty when disabled
  Matrix context;                // (d, queries), input of the output projection
};

// Multi-head scaled dot-product attention: queries from x, keys and values
// from memory. With `causal`, query i only sees keys j <= i.
Matrix AttentionForward(const Attention& attn, const Matrix& x, const Matrix& memory,
                        int num_heads, bool causal, double dropout, Rng* rng,
                        AttentionCache* cache);
// Writes dL/dx and dL/dmemory (for self-attention the caller sums both).
void AttentionBackward(const Attention& attn, const AttentionCache& cache, const Matrix& dout,
                       int num_heads, Attention* grad, Matrix* dx, Matrix* dmemory);

}  // namespace dapcap::nn
