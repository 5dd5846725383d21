#include <cmath>
#include <stdexcept>

#include "narrowbert/model.hpp"

namespace narrowbert {

template <typename T>
Tensor<T> attention_core(const AttentionLayer<T>& layer, const Tensor<T>& xq,
                         std::size_t queries_per_row, const Tensor<T>& xkv,
                         std::size_t seq_len, std::size_t batch,
                         std::span<const std::uint8_t> key_valid,
                         std::size_t heads, T eps, AttentionCache<T>* cache) {
  const std::size_t d = xq.cols();
  if (xkv.cols() != d || xq.rows() != batch * queries_per_row ||
      xkv.rows() != batch * seq_len || key_valid.size() != batch * seq_len ||
      d % heads != 0) {
    throw ShapeError("attention_core: inconsistent shapes");
  }
  const std::size_t dh = d / heads;
  const std::size_t nq = queries_per_row;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> q = ops::linear(xq, layer.wq, layer.bq);
  Tensor<T> k = ops::linear(xkv, layer.wk, layer.bk);
  Tensor<T> v = ops::linear(xkv, layer.wv, layer.bv);
  Tensor<T> ctx({batch * nq, d});
  std::vector<T> probs;
  if (cache) probs.assign(batch * heads * nq * seq_len, T(0));

  const auto jobs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel
  {
    std::vector<T> kt(dh * seq_len), scores(seq_len), p(seq_len);
#pragma omp for schedule(static)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
      const std::size_t b = static_cast<std::size_t>(job) / heads;
      const std::size_t h = static_cast<std::size_t>(job) % heads;
      const std::size_t col = h * dh;
      const auto valid = key_valid.subspan(b * seq_len, seq_len);
      for (std::size_t j = 0; j < seq_len; ++j) {
        const T* kr = k.row(b * seq_len + j) + col;
        for (std::size_t c = 0; c < dh; ++c) kt[c * seq_len + j] = kr[c];
      }
      for (std::size_t i = 0; i < nq; ++i) {
        const T* qr = q.row(b * nq + i) + col;
        std::fill(scores.begin(), scores.end(), T(0));
        for (std::size_t c = 0; c < dh; ++c) {
          const T qc = qr[c];
          const T* ktr = kt.data() + c * seq_len;
          for (std::size_t j = 0; j < seq_len; ++j) scores[j] += qc * ktr[j];
        }
        for (std::size_t j = 0; j < seq_len; ++j) scores[j] *= scale;
        ops::softmax_row<T>(scores, valid, p);
        T* cr = ctx.row(b * nq + i) + col;
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!valid[j]) continue;
          const T pj = p[j];
          const T* vr = v.row(b * seq_len + j) + col;
          for (std::size_t c = 0; c < dh; ++c) cr[c] += pj * vr[c];
        }
        if (cache) {
          std::copy(p.begin(), p.end(),
                    probs.begin() + static_cast<std::ptrdiff_t>(
                                        ((b * heads + h) * nq + i) * seq_len));
        }
      }
    }
  }

  Tensor<T> z = ops::linear(ctx, layer.wo, layer.bo);
  {
    T* pz = z.data().data();
    const T* px = xq.data().data();
    for (std::size_t i = 0; i < z.size(); ++i) pz[i] = px[i] + pz[i];
  }
  Tensor<T> y = ops::layer_norm(z, layer.ln_gain, layer.ln_bias, eps,
                                cache ? &cache->ln : nullptr);
  if (cache) {
    cache->queries_per_row = nq;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->ctx = std::move(ctx);
    cache->probs = std::move(probs);
  }
  return y;
}

template <typename T>
void attention_core_backward(AttentionLayer<T>& layer,
                             const AttentionCache<T>& cache, std::size_t batch,
                             std::size_t seq_len,
                             std::span<const std::uint8_t> key_valid,
                             std::size_t heads, const Tensor<T>& dy,
                             Tensor<T>& dxq, Tensor<T>& dxkv) {
  const Tensor<T>& xq = *cache.xq;
  const Tensor<T>& xkv = *cache.xkv;
  const std::size_t d = xq.cols();
  const std::size_t dh = d / heads;
  const std::size_t nq = cache.queries_per_row;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> dz = ops::layer_norm_backward(cache.ln, layer.ln_gain,
                                          layer.ln_bias, dy);
  {
    T* pd = dxq.data().data();
    const T* pz = dz.data().data();
    for (std::size_t i = 0; i < dz.size(); ++i) pd[i] += pz[i];
  }
  Tensor<T> dctx(cache.ctx.shape());
  ops::linear_backward(cache.ctx, layer.wo, layer.bo, dz, &dctx);

  Tensor<T> dq(cache.q.shape());
  Tensor<T> dk(cache.k.shape());
  Tensor<T> dv(cache.v.shape());
  const auto jobs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel
  {
    std::vector<T> dp(seq_len), ds(seq_len);
#pragma omp for schedule(static)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
      const std::size_t b = static_cast<std::size_t>(job) / heads;
      const std::size_t h = static_cast<std::size_t>(job) % heads;
      const std::size_t col = h * dh;
      const auto valid = key_valid.subspan(b * seq_len, seq_len);
      for (std::size_t i = 0; i < nq; ++i) {
        const T* p = cache.probs.data() + ((b * heads + h) * nq + i) * seq_len;
        const T* gr = dctx.row(b * nq + i) + col;
        T sum = T(0);
        for (std::size_t j = 0; j < seq_len; ++j) {
          dp[j] = T(0);
          if (!valid[j]) continue;
          const T* vr = cache.v.row(b * seq_len + j) + col;
          T* dvr = dv.row(b * seq_len + j) + col;
          T acc = T(0);
          for (std::size_t c = 0; c < dh; ++c) {
            acc += gr[c] * vr[c];
            dvr[c] += p[j] * gr[c];
          }
          dp[j] = acc;
          sum += p[j] * acc;
        }
        const T* qr = cache.q.row(b * nq + i) + col;
        T* dqr = dq.row(b * nq + i) + col;
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!valid[j]) continue;
          const T g = p[j] * (dp[j] - sum) * scale;
          const T* kr = cache.k.row(b * seq_len + j) + col;
          T* dkr = dk.row(b * seq_len + j) + col;
          for (std::size_t c = 0; c < dh; ++c) {
            dqr[c] += g * kr[c];
            dkr[c] += g * qr[c];
          }
        }
      }
    }
  }
  ops::linear_backward(xq, layer.wq, layer.bq, dq, &dxq);
  ops::linear_backward(xkv, layer.wk, layer.bk, dk, &dxkv);
  ops::linear_backward(xkv, layer.wv, layer.bv, dv, &dxkv);
}

template <typename T>
Tensor<T> feedforward_core(const FeedforwardLayer<T>& layer,
                           const Tensor<T>& x, T eps,
                           FeedforwardCache<T>* cache) {
  Tensor<T> pre = ops::linear(x, layer.w1, layer.b1);
  Tensor<T> act = ops::gelu(pre);
  Tensor<T> z = ops::linear(act, layer.w2, layer.b2);
  {
    T* pz = z.data().data();
    const T* px = x.data().data();
    for (std::size_t i = 0; i < z.size(); ++i) pz[i] = px[i] + pz[i];
  }
  Tensor<T> y = ops::layer_norm(z, layer.ln_gain, layer.ln_bias, eps,
                                cache ? &cache->ln : nullptr);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <typename T>
Tensor<T> feedforward_core_backward(FeedforwardLayer<T>& layer,
                                    const FeedforwardCache<T>& cache,
                                    const Tensor<T>& dy) {
  Tensor<T> dz = ops::layer_norm_backward(cache.ln, layer.ln_gain,
                                          layer.ln_bias, dy);
  Tensor<T> dx = dz;
  Tensor<T> dact(cache.act.shape());
  ops::linear_backward(cache.act, layer.w2, layer.b2, dz, &dact);
  Tensor<T> dpre = ops::gelu_backward(cache.pre, dact);
  ops::linear_backward(cache.x, layer.w1, layer.b1, dpre, &dx);
  return dx;
}

#define NARROWBERT_INSTANTIATE_LAYERS(T)                                       \
  template Tensor<T> attention_core(                                           \
      const AttentionLayer<T>&, const Tensor<T>&, std::size_t,                 \
      const Tensor<T>&, std::size_t, std::size_t,                              \
      std::span<const std::uint8_t>, std::size_t, T, AttentionCache<T>*);      \
  template void attention_core_backward(                                       \
      AttentionLayer<T>&, const AttentionCache<T>&, std::size_t, std::size_t,  \
      std::span<const std::uint8_t>, std::size_t, const Tensor<T>&,            \
      Tensor<T>&, Tensor<T>&);                                                 \
  template Tensor<T> feedforward_core(const FeedforwardLayer<T>&,              \
                                      const Tensor<T>&, T,                     \
                                      FeedforwardCache<T>*);                   \
  template Tensor<T> feedforward_core_backward(                                \
      FeedforwardLayer<T>&, const FeedforwardCache<T>&, const Tensor<T>&);

NARROWBERT_INSTANTIATE_LAYERS(float)
NARROWBERT_INSTANTIATE_LAYERS(double)

#undef NARROWBERT_INSTANTIATE_LAYERS

}  // namespace narrowbert
