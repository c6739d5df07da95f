#include "dapcap/nn.h"

#include <cmath>
#include <limits>
#include <numbers>

namespace dapcap::nn {

Matrix LinearForward(const Linear& layer, const Matrix& x) {
  Matrix y = layer.weight * x;
  y.colwise() += layer.bias;
  return y;
}

Matrix LinearBackward(const Linear& layer, const Matrix& x, const Matrix& dy, Linear* grad) {
  grad->weight.noalias() += dy * x.transpose();
  grad->bias += dy.rowwise().sum();
  return layer.weight.transpose() * dy;
}

Matrix LayerNormForward(const LayerNorm& ln, const Matrix& x, LayerNormCache* cache) {
  const double dim = static_cast<double>(x.rows());
  Eigen::RowVectorXd mean = x.colwise().sum() / dim;
  Matrix centered = x.rowwise() - mean;
  Eigen::RowVectorXd var = centered.array().square().colwise().sum() / dim;
  Eigen::RowVectorXd inv_std = (var.array() + kLayerNormEps).rsqrt();
  Matrix normalized = centered.array().rowwise() * inv_std.array();
  Matrix y = (normalized.array().colwise() * ln.gain.array()).matrix();
  y.colwise() += ln.bias;
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix LayerNormBackward(const LayerNorm& ln, const LayerNormCache& cache, const Matrix& dy,
                         LayerNorm* grad) {
  const Matrix& xhat = cache.normalized;
  grad->gain += (dy.array() * xhat.array()).rowwise().sum().matrix();
  grad->bias += dy.rowwise().sum();
  const double dim = static_cast<double>(dy.rows());
  Matrix dxhat = dy.array().colwise() * ln.gain.array();
  Eigen::RowVectorXd mean_dxhat = dxhat.colwise().sum() / dim;
  Eigen::RowVectorXd mean_dxhat_xhat = (dxhat.array() * xhat.array()).colwise().sum() / dim;
  Matrix dx = dxhat.rowwise() - mean_dxhat;
  dx -= (xhat.array().rowwise() * mean_dxhat_xhat.array()).matrix();
  return dx.array().rowwise() * cache.inv_std.array();
}

Matrix Dropout(const Matrix& x, double p, Rng* rng, Matrix* mask) {
  if (rng == nullptr || p <= 0.0) {
    if (mask) mask->resize(0, 0);
    return x;
  }
  const double keep_scale = 1.0 / (1.0 - p);
  Matrix m(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng->Bernoulli(p) ? 0.0 : keep_scale;
  Matrix y = x.cwiseProduct(m);
  if (mask) *mask = std::move(m);
  return y;
}

Matrix DropoutBackward(const Matrix& dy, const Matrix& mask) {
  if (mask.size() == 0) return dy;
  return dy.cwiseProduct(mask);
}

Matrix Gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2)); });
}

Matrix GeluBackward(const Matrix& x, const Matrix& dy) {
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix d = x.unaryExpr([inv_sqrt_2pi](double v) {
    return 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2)) +
           v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
  });
  return d.cwiseProduct(dy);
}

Matrix LogSoftmax(const Matrix& logits) {
  Eigen::RowVectorXd max = logits.colwise().maxCoeff();
  Matrix shifted = logits.rowwise() - max;
  Eigen::RowVectorXd log_sum = shifted.array().exp().colwise().sum().log();
  return shifted.rowwise() - log_sum;
}

Matrix AttentionForward(const Attention& attn, const Matrix& x, const Matrix& memory,
                        int num_heads, bool causal, double dropout, Rng* rng,
                        AttentionCache* cache) {
  const Eigen::Index queries = x.cols();
  const Eigen::Index keys = memory.cols();
  const Eigen::Index head = x.rows() / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head));

  Matrix q = LinearForward(attn.query, x);
  Matrix k = LinearForward(attn.key, memory);
  Matrix v = LinearForward(attn.value, memory);
  Matrix context(x.rows(), queries);
  std::vector<Matrix> probs(num_heads), masks(num_heads);

  for (int h = 0; h < num_heads; ++h) {
    const auto qh = q.middleRows(h * head, head);
    const auto kh = k.middleRows(h * head, head);
    const auto vh = v.middleRows(h * head, head);
    Matrix scores = (qh.transpose() * kh) * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < queries; ++i)
        for (Eigen::Index j = i + 1; j < keys; ++j)
          scores(i, j) = -std::numeric_limits<double>::infinity();
    }
    Eigen::VectorXd row_max = scores.rowwise().maxCoeff();
    Matrix p = (scores.colwise() - row_max).array().exp();
    p.array().colwise() /= p.rowwise().sum().array();
    Matrix dropped = Dropout(p, dropout, rng, &masks[h]);
    context.middleRows(h * head, head).noalias() = vh * dropped.transpose();
    probs[h] = std::move(p);
  }
  Matrix out = LinearForward(attn.output, context);
  if (cache) {
    cache->x = x;
    cache->memory = memory;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->dropouts = std::move(masks);
    cache->context = std::move(context);
  }
  return out;
}

void AttentionBackward(const Attention& attn, const AttentionCache& cache, const Matrix& dout,
                       int num_heads, Attention* grad, Matrix* dx, Matrix* dmemory) {
  const Eigen::Index head = cache.x.rows() / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head));

  Matrix dcontext = LinearBackward(attn.output, cache.context, dout, &grad->output);
  Matrix dq(cache.q.rows(), cache.q.cols());
  Matrix dk(cache.k.rows(), cache.k.cols());
  Matrix dv(cache.v.rows(), cache.v.cols());

  for (int h = 0; h < num_heads; ++h) {
    const auto qh = cache.q.middleRows(h * head, head);
    const auto kh = cache.k.middleRows(h * head, head);
    const auto vh = cache.v.middleRows(h * head, head);
    const Matrix& p = cache.probs[h];
    const Matrix& mask = cache.dropouts[h];
    const auto dctx = dcontext.middleRows(h * head, head);

    Matrix dropped = mask.size() ? Matrix(p.cwiseProduct(mask)) : p;
    dv.middleRows(h * head, head).noalias() = dctx * dropped;
    Matrix dp = DropoutBackward(dctx.transpose() * vh, mask);
    Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
    Matrix dscores = p.array() * (dp.colwise() - row_dot).array();
    dscores *= scale;
    dq.middleRows(h * head, head).noalias() = kh * dscores.transpose();
    dk.middleRows(h * head, head).noalias() = qh * dscores;
  }
  *dx = LinearBackward(attn.query, cache.x, dq, &grad->query);
  *dmemory = LinearBackward(attn.key, cache.memory, dk, &grad->key);
  *dmemory += LinearBackward(attn.value, cache.memory, dv, &grad->value);
}

}  // namespace dapcap::nn
