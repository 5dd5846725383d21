#include "narrowbert/ops.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>

#include "narrowbert/kernels.hpp"

namespace narrowbert {

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace ops {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.cols() == b.rows(), "matmul inner dimensions differ: " +
                                    shape_to_string(a.shape()) + " * " +
                                    shape_to_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> c({m, n});
  kernels::parallel::matmul<T>(a.data(), b.data(), c.data(), m, k, n);
  return c;
}

template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b,
                     const Tensor<T>& dc, Tensor<T>* da, Tensor<T>* db) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k && dc.rows() == m && dc.cols() == n,
          "matmul_backward shape mismatch");
  if (da) {
    require(da->rows() == m && da->cols() == k, "matmul_backward dA shape");
    kernels::parallel::matmul_grad_a<T>(dc.data(), b.data(), da->data(), m, k,
                                        n);
  }
  if (db) {
    require(db->rows() == k && db->cols() == n, "matmul_backward dB shape");
    kernels::parallel::matmul_grad_b<T>(a.data(), dc.data(), db->data(), m, k,
                                        n);
  }
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Parameter<T>& weight,
                 const Parameter<T>& bias) {
  Tensor<T> y = matmul(x, weight.value);
  const std::size_t n = y.cols();
  require(bias.value.size() == n, "linear bias size mismatch");
  const T* pb = bias.value.data().data();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    T* yr = y.row(r);
    for (std::size_t j = 0; j < n; ++j) yr[j] += pb[j];
  }
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, Parameter<T>& weight,
                     Parameter<T>& bias, const Tensor<T>& dy, Tensor<T>* dx) {
  matmul_backward(x, weight.value, dy, dx, &weight.grad);
  const std::size_t n = dy.cols();
  T* gb = bias.grad.data().data();
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    const T* dr = dy.row(r);
    for (std::size_t j = 0; j < n; ++j) gb[j] += dr[j];
  }
}

template <typename T>
void softmax_row(std::span<const T> x, std::span<const std::uint8_t> valid,
                 std::span<T> y) {
  const std::size_t c = x.size();
  const bool masked = !valid.empty();
  T mx = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t j = 0; j < c; ++j) {
    if (masked && !valid[j]) continue;
    any = true;
    mx = std::max(mx, x[j]);
  }
  if (!any) throw std::invalid_argument("softmax row has no valid entries");
  T sum = T(0);
  for (std::size_t j = 0; j < c; ++j) {
    if (masked && !valid[j]) {
      y[j] = T(0);
      continue;
    }
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  for (std::size_t j = 0; j < c; ++j) {
    if (masked && !valid[j]) continue;
    y[j] = y[j] / sum;
  }
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x,
                       std::span<const std::uint8_t> validity) {
  const std::size_t r = x.rows(), c = x.cols();
  require(validity.empty() || validity.size() == r * c,
          "softmax mask size mismatch");
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    softmax_row<T>({x.row(i), c},
                   validity.empty() ? std::span<const std::uint8_t>{}
                                    : validity.subspan(i * c, c),
                   {y.row(i), c});
  }
  return y;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  require(y.same_shape(dy), "softmax backward shape mismatch");
  Tensor<T> dx(y.shape());
  const std::size_t c = y.cols();
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const T* yr = y.row(i);
    const T* gr = dy.row(i);
    T dot = T(0);
    for (std::size_t j = 0; j < c; ++j) dot += yr[j] * gr[j];
    T* xr = dx.row(i);
    for (std::size_t j = 0; j < c; ++j) xr[j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Parameter<T>& gain,
                     const Parameter<T>& bias, T eps,
                     LayerNormCache<T>* cache) {
  const std::size_t r = x.rows(), d = x.cols();
  require(gain.value.size() == d && bias.value.size() == d,
          "layer_norm parameter size mismatch");
  Tensor<T> y(x.shape());
  if (cache) {
    cache->xhat = Tensor<T>(x.shape());
    cache->inv_std.assign(r, T(0));
  }
  const T* g = gain.value.data().data();
  const T* b = bias.value.data().data();
  const T dd = static_cast<T>(d);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(r); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const T* xr = x.row(i);
    T sum = T(0);
    for (std::size_t j = 0; j < d; ++j) sum += xr[j];
    const T mean = sum / dd;
    T sq = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xr[j] - mean;
      sq += c * c;
    }
    const T inv = T(1) / std::sqrt(sq / dd + eps);
    T* yr = y.row(i);
    T* hr = cache ? cache->xhat.row(i) : nullptr;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (xr[j] - mean) * inv;
      if (hr) hr[j] = xh;
      yr[j] = xh * g[j] + b[j];
    }
    if (cache) cache->inv_std[i] = inv;
  }
  return y;
}

template <typename T>
Tensor<T> layer_norm_backward(const LayerNormCache<T>& cache,
                              Parameter<T>& gain, Parameter<T>& bias,
                              const Tensor<T>& dy) {
  const Tensor<T>& xhat = cache.xhat;
  require(xhat.same_shape(dy), "layer_norm backward shape mismatch");
  const std::size_t r = dy.rows(), d = dy.cols();
  const T* g = gain.value.data().data();
  T* gg = gain.grad.data().data();
  T* gb = bias.grad.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* dr = dy.row(i);
    const T* hr = xhat.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      gg[j] += dr[j] * hr[j];
      gb[j] += dr[j];
    }
  }
  Tensor<T> dx(dy.shape());
  const T dd = static_cast<T>(d);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(r); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const T* dr = dy.row(i);
    const T* hr = xhat.row(i);
    T sum_dh = T(0), sum_dh_h = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T dh = dr[j] * g[j];
      sum_dh += dh;
      sum_dh_h += dh * hr[j];
    }
    const T inv = cache.inv_std[i];
    T* xr = dx.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const T dh = dr[j] * g[j];
      xr[j] = inv / dd * (dd * dh - sum_dh - hr[j] * sum_dh_h);
    }
  }
  return dx;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* px = x.data().data();
  T* py = y.data().data();
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) py[i] = gelu(px[i]);
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require(x.same_shape(dy), "gelu backward shape mismatch");
  Tensor<T> dx(x.shape());
  const T* px = x.data().data();
  const T* pg = dy.data().data();
  T* pd = dx.data().data();
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) pd[i] = pg[i] * gelu_grad(px[i]);
  return dx;
}

template <typename T>
Tensor<T> embedding_lookup(const Parameter<T>& table,
                           std::span<const std::int32_t> ids) {
  const std::size_t v = table.value.rows(), d = table.value.cols();
  require(!ids.empty(), "embedding_lookup with no ids");
  Tensor<T> y({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(v));
    }
    std::copy_n(table.value.row(static_cast<std::size_t>(ids[i])), d,
                y.row(i));
  }
  return y;
}

template <typename T>
void embedding_backward(Parameter<T>& table,
                        std::span<const std::int32_t> ids,
                        const Tensor<T>& dy) {
  const std::size_t d = table.grad.cols();
  require(dy.rows() == ids.size() && dy.cols() == d,
          "embedding backward shape mismatch");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    T* gr = table.grad.row(static_cast<std::size_t>(ids[i]));
    const T* dr = dy.row(i);
    for (std::size_t j = 0; j < d; ++j) gr[j] += dr[j];
  }
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  require(!idx.empty(), "gather_rows with empty index list");
  const std::size_t d = x.cols();
  Tensor<T> y({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.rows()) {
      throw std::out_of_range("gather index " + std::to_string(idx[i]) +
                              " outside " + std::to_string(x.rows()) +
                              " rows");
    }
    std::copy_n(x.row(idx[i]), d, y.row(i));
  }
  return y;
}

template <typename T>
void gather_rows_backward(std::span<const std::size_t> idx,
                          const Tensor<T>& dy, Tensor<T>& dx) {
  require(dy.rows() == idx.size() && dy.cols() == dx.cols(),
          "gather backward shape mismatch");
  const std::size_t d = dx.cols();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= dx.rows()) throw std::out_of_range("scatter index");
    T* xr = dx.row(idx[i]);
    const T* dr = dy.row(i);
    for (std::size_t j = 0; j < d; ++j) xr[j] += dr[j];
  }
}

namespace {

template <typename T>
void check_labels(const Tensor<T>& logits,
                  std::span<const std::int32_t> labels) {
  require(labels.size() == logits.rows(), "label count != logit rows");
  for (std::int32_t l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= logits.cols()) {
      throw std::out_of_range("label " + std::to_string(l) +
                              " outside [0, " + std::to_string(logits.cols()) +
                              ")");
    }
  }
}

}  // namespace

template <typename T>
T cross_entropy_logits(const Tensor<T>& logits,
                       std::span<const std::int32_t> labels) {
  check_labels(logits, labels);
  const std::size_t c = logits.cols();
  T total = T(0);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const T* lr = logits.row(i);
    const T mx = *std::max_element(lr, lr + c);
    T sum = T(0);
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(lr[j] - mx);
    total += mx + std::log(sum) - lr[labels[i]];
  }
  return total / static_cast<T>(logits.rows());
}

template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits,
                                 std::span<const std::int32_t> labels,
                                 T scale) {
  check_labels(logits, labels);
  Tensor<T> dl = softmax_rows(logits);
  for (std::size_t i = 0; i < dl.rows(); ++i) {
    T* r = dl.row(i);
    r[labels[i]] -= T(1);
    for (std::size_t j = 0; j < dl.cols(); ++j) r[j] *= scale;
  }
  return dl;
}

#define NARROWBERT_INSTANTIATE_OPS(T)                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);               \
  template void matmul_backward(const Tensor<T>&, const Tensor<T>&,            \
                                const Tensor<T>&, Tensor<T>*, Tensor<T>*);     \
  template Tensor<T> linear(const Tensor<T>&, const Parameter<T>&,             \
                            const Parameter<T>&);                              \
  template void linear_backward(const Tensor<T>&, Parameter<T>&,               \
                                Parameter<T>&, const Tensor<T>&, Tensor<T>*);  \
  template void softmax_row(std::span<const T>,                                \
                            std::span<const std::uint8_t>, std::span<T>);      \
  template Tensor<T> softmax_rows(const Tensor<T>&,                            \
                                  std::span<const std::uint8_t>);              \
  template Tensor<T> softmax_rows_backward(const Tensor<T>&,                   \
                                           const Tensor<T>&);                  \
  template Tensor<T> layer_norm(const Tensor<T>&, const Parameter<T>&,         \
                                const Parameter<T>&, T, LayerNormCache<T>*);   \
  template Tensor<T> layer_norm_backward(const LayerNormCache<T>&,             \
                                         Parameter<T>&, Parameter<T>&,         \
                                         const Tensor<T>&);                    \
  template Tensor<T> gelu(const Tensor<T>&);                                   \
  template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> embedding_lookup(const Parameter<T>&,                     \
                                      std::span<const std::int32_t>);          \
  template void embedding_backward(Parameter<T>&,                              \
                                   std::span<const std::int32_t>,              \
                                   const Tensor<T>&);                          \
  template Tensor<T> gather_rows(const Tensor<T>&,                             \
                                 std::span<const std::size_t>);                \
  template void gather_rows_backward(std::span<const std::size_t>,             \
                                     const Tensor<T>&, Tensor<T>&);            \
  template T cross_entropy_logits(const Tensor<T>&,                            \
                                  std::span<const std::int32_t>);              \
  template Tensor<T> cross_entropy_backward(                                   \
      const Tensor<T>&, std::span<const std::int32_t>, T);

NARROWBERT_INSTANTIATE_OPS(float)
NARROWBERT_INSTANTIATE_OPS(double)

#undef NARROWBERT_INSTANTIATE_OPS

}  // namespace ops
}  // namespace narrowbert
