#include "narrowbert/reference.hpp"

#include <cmath>
#include <limits>

namespace narrowbert {

namespace {

template <typename T>
using Rows = std::vector<std::vector<T>>;

template <typename T>
std::vector<T> affine(const std::vector<T>& x, const Parameter<T>& w,
                      const Parameter<T>& b) {
  const std::size_t in = w.value.rows(), out = w.value.cols();
  std::vector<T> y(out);
  for (std::size_t j = 0; j < out; ++j) {
    T acc = T(0);
    for (std::size_t p = 0; p < in; ++p) acc += x[p] * w.value.at(p, j);
    y[j] = acc + b.value[j];
  }
  return y;
}

template <typename T>
std::vector<T> normalize(const std::vector<T>& x, const Parameter<T>& gain,
                         const Parameter<T>& bias, T eps) {
  const std::size_t d = x.size();
  const T dd = static_cast<T>(d);
  T sum = T(0);
  for (T v : x) sum += v;
  const T mean = sum / dd;
  T sq = T(0);
  for (T v : x) sq += (v - mean) * (v - mean);
  const T inv = T(1) / std::sqrt(sq / dd + eps);
  std::vector<T> y(d);
  for (std::size_t j = 0; j < d; ++j) {
    y[j] = ((x[j] - mean) * inv) * gain.value[j] + bias.value[j];
  }
  return y;
}

template <typename T>
Rows<T> attend(const AttentionLayer<T>& layer, const Rows<T>& queries,
               const Rows<T>& source, const std::uint8_t* valid,
               std::size_t heads, T eps) {
  const std::size_t l = source.size();
  const std::size_t d = queries.front().size();
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Rows<T> keys, values;
  for (const auto& s : source) {
    keys.push_back(affine(s, layer.wk, layer.bk));
    values.push_back(affine(s, layer.wv, layer.bv));
  }
  Rows<T> out;
  for (const auto& x : queries) {
    const std::vector<T> q = affine(x, layer.wq, layer.bq);
    std::vector<T> ctx(d, T(0));
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<T> w(l, T(0));
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < l; ++j) {
        if (!valid[j]) continue;
        T dot = T(0);
        for (std::size_t c = 0; c < dh; ++c) {
          dot += q[h * dh + c] * keys[j][h * dh + c];
        }
        w[j] = dot * scale;
        if (w[j] > mx) mx = w[j];
      }
      T total = T(0);
      for (std::size_t j = 0; j < l; ++j) {
        if (!valid[j]) continue;
        w[j] = std::exp(w[j] - mx);
        total += w[j];
      }
      for (std::size_t j = 0; j < l; ++j) {
        if (!valid[j]) continue;
        const T pj = w[j] / total;
        for (std::size_t c = 0; c < dh; ++c) {
          ctx[h * dh + c] += pj * values[j][h * dh + c];
        }
      }
    }
    const std::vector<T> o = affine(ctx, layer.wo, layer.bo);
    std::vector<T> z(d);
    for (std::size_t c = 0; c < d; ++c) z[c] = x[c] + o[c];
    out.push_back(normalize(z, layer.ln_gain, layer.ln_bias, eps));
  }
  return out;
}

template <typename T>
std::vector<T> mlp(const FeedforwardLayer<T>& layer, const std::vector<T>& x,
                   T eps) {
  std::vector<T> a = affine(x, layer.w1, layer.b1);
  for (auto& v : a) v = ops::gelu(v);
  const std::vector<T> o = affine(a, layer.w2, layer.b2);
  std::vector<T> z(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) z[c] = x[c] + o[c];
  return normalize(z, layer.ln_gain, layer.ln_bias, eps);
}

}  // namespace

template <typename T>
Tensor<T> reference_encode_all(const Encoder<T>& model, const Batch& batch,
                               bool freeze_at_marker) {
  const ModelDims& dims = model.dims();
  const std::size_t d = dims.hidden, l = batch.seq_len;
  const T eps = static_cast<T>(dims.ln_eps);
  const auto& emb = model.embeddings;
  Tensor<T> out({batch.batch_size * l, d});
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    const std::uint8_t* valid = batch.validity.data() + b * l;
    Rows<T> h;
    for (std::size_t pos = 0; pos < l; ++pos) {
      const auto id = static_cast<std::size_t>(batch.ids[b * l + pos]);
      std::vector<T> e(d);
      for (std::size_t c = 0; c < d; ++c) {
        e[c] = emb.token.value.at(id, c) + emb.position.value.at(pos, c);
      }
      h.push_back(normalize(e, emb.ln_gain, emb.ln_bias, eps));
    }
    bool frozen = false;
    Rows<T> kv;
    const auto& atoms = model.layout().atoms;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      switch (atoms[i].kind) {
        case AtomKind::Attention: {
          const auto& layer = model.attention[model.layer_of_atom(i)];
          h = attend(layer, h, frozen ? kv : h, valid, dims.heads, eps);
          break;
        }
        case AtomKind::Feedforward: {
          const auto& layer = model.feedforward[model.layer_of_atom(i)];
          for (auto& row : h) row = mlp(layer, row, eps);
          break;
        }
        case AtomKind::NarrowMarker:
          if (freeze_at_marker) {
            kv = h;
            frozen = true;
          }
          break;
      }
    }
    for (std::size_t pos = 0; pos < l; ++pos) {
      std::copy(h[pos].begin(), h[pos].end(), out.row(b * l + pos));
    }
  }
  return out;
}

template <typename T>
Tensor<T> reference_encode(const Encoder<T>& model, const Batch& batch,
                           Mode mode, bool freeze_at_marker) {
  const Tensor<T> all = reference_encode_all(model, batch, freeze_at_marker);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    if (mode == Mode::Classify) {
      rows.push_back(b * batch.seq_len);
      continue;
    }
    for (std::size_t p : batch.row_positions(b)) {
      rows.push_back(b * batch.seq_len + p);
    }
  }
  return ops::gather_rows(all, rows);
}

template Tensor<float> reference_encode_all(const Encoder<float>&,
                                            const Batch&, bool);
template Tensor<double> reference_encode_all(const Encoder<double>&,
                                             const Batch&, bool);
template Tensor<float> reference_encode(const Encoder<float>&, const Batch&,
                                        Mode, bool);
template Tensor<double> reference_encode(const Encoder<double>&, const Batch&,
                                         Mode, bool);

}  // namespace narrowbert
