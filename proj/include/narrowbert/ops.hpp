#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "narrowbert/tensor.hpp"

// Forward primitives with hand-written reverse-mode counterparts. Every
// backward ACCUMULATES into the gradient it is given (parameters and inputs
// alike), so calling it twice over two halves of a batch sums the same
// per-row terms in the same order as one call over the whole batch.

namespace narrowbert::ops {

// tanh approximation.
template <typename T>
inline T gelu(T x) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kBeta = T(0.044715);
  const T inner = kAlpha * (x + kBeta * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
inline T gelu_grad(T x) {
  constexpr T kAlpha = T(0.7978845608028654);
  constexpr T kBeta = T(0.044715);
  const T inner = kAlpha * (x + kBeta * x * x * x);
  const T th = std::tanh(inner);
  const T dinner = kAlpha * (T(1) + T(3) * kBeta * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * dinner;
}

// Matrix product over the 2-D (rows x cols) views of a and b.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// da += dc * b^T ; db += a^T * dc. Either output may be null.
template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b,
                     const Tensor<T>& dc, Tensor<T>* da, Tensor<T>* db);

// y = x * W + bias, W is [in x out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Parameter<T>& weight,
                 const Parameter<T>& bias);

template <typename T>
void linear_backward(const Tensor<T>& x, Parameter<T>& weight,
                     Parameter<T>& bias, const Tensor<T>& dy, Tensor<T>* dx);

// Stable masked softmax of one row. `valid` may be empty (all valid).
// Throws if a mask is given and no entry is valid.
template <typename T>
void softmax_row(std::span<const T> x, std::span<const std::uint8_t> valid,
                 std::span<T> y);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x,
                       std::span<const std::uint8_t> validity = {});

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy);

template <typename T>
struct LayerNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Parameter<T>& gain,
                     const Parameter<T>& bias, T eps,
                     LayerNormCache<T>* cache = nullptr);

// Returns dx; accumulates dgain/dbias.
template <typename T>
Tensor<T> layer_norm_backward(const LayerNormCache<T>& cache,
                              Parameter<T>& gain, Parameter<T>& bias,
                              const Tensor<T>& dy);

template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy);

// Rows of `table` selected by ids, shape [ids.size() x D].
template <typename T>
Tensor<T> embedding_lookup(const Parameter<T>& table,
                           std::span<const std::int32_t> ids);

template <typename T>
void embedding_backward(Parameter<T>& table,
                        std::span<const std::int32_t> ids, const Tensor<T>& dy);

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx);

// Scatter-add dy rows back into dx at idx.
template <typename T>
void gather_rows_backward(std::span<const std::size_t> idx,
                          const Tensor<T>& dy, Tensor<T>& dx);

// Mean cross-entropy over rows.
template <typename T>
T cross_entropy_logits(const Tensor<T>& logits,
                       std::span<const std::int32_t> labels);

// (softmax(logits) - onehot(labels)) * scale. scale = 1/R for the mean loss.
template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits,
                                 std::span<const std::int32_t> labels,
                                 T scale);

}  // namespace narrowbert::ops
