#pragma once

#include <cstddef>
#include <span>

// Dense matrix kernels in two flavours with identical per-element summation
// order: `serial` is the plain triple loop kept as the reference, `parallel`
// splits independent output rows across OpenMP threads. Both produce
// bit-identical results for any thread count.
//
// All matrices are row-major. Shapes: A is m x k, B is k x n, C is m x n.

namespace narrowbert::kernels {

namespace serial {

// C = A * B (overwrites C).
template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c,
            std::size_t m, std::size_t k, std::size_t n);

// dA += dC * B^T
template <typename T>
void matmul_grad_a(std::span<const T> dc, std::span<const T> b,
                   std::span<T> da, std::size_t m, std::size_t k,
                   std::size_t n);

// dB += A^T * dC, accumulated row by row of A in ascending order.
template <typename T>
void matmul_grad_b(std::span<const T> a, std::span<const T> dc,
                   std::span<T> db, std::size_t m, std::size_t k,
                   std::size_t n);

}  // namespace serial

namespace parallel {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c,
            std::size_t m, std::size_t k, std::size_t n);

template <typename T>
void matmul_grad_a(std::span<const T> dc, std::span<const T> b,
                   std::span<T> da, std::size_t m, std::size_t k,
                   std::size_t n);

template <typename T>
void matmul_grad_b(std::span<const T> a, std::span<const T> dc,
                   std::span<T> db, std::size_t m, std::size_t k,
                   std::size_t n);

}  // namespace parallel

// Thread control for the parallel kernels. `resolve_threads(0)` consults the
// NARROWBERT_THREADS environment variable, then the OpenMP default.
void set_threads(int n);
int threads();
int resolve_threads(int requested);

}  // namespace narrowbert::kernels
