#include "narrowbert/kernels.hpp"

#include <omp.h>

#include <cstdlib>
#include <string>
#include <vector>

namespace narrowbert::kernels {

namespace serial {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <typename T>
void matmul_grad_a(std::span<const T> dc, std::span<const T> b,
                   std::span<T> da, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * b[p * n + j];
      da[i * k + p] += acc;
    }
  }
}

template <typename T>
void matmul_grad_b(std::span<const T> a, std::span<const T> dc,
                   std::span<T> db, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = db[p * n + j];
      for (std::size_t i = 0; i < m; ++i) acc += a[i * k + p] * dc[i * n + j];
      db[p * n + j] = acc;
    }
  }
}

}  // namespace serial

namespace parallel {

// i-k-j order: the j loop vectorizes, and each C[i][j] still sums over p in
// ascending order starting from zero, matching the serial kernel.
template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c,
            std::size_t m, std::size_t k, std::size_t n) {
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* crow = pc + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    const T* arow = pa + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_grad_a(std::span<const T> dc, std::span<const T> b,
                   std::span<T> da, std::size_t m, std::size_t k,
                   std::size_t n) {
  std::vector<T> bt(k * n);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  const T* pdc = dc.data();
  const T* pbt = bt.data();
  T* pda = da.data();
#pragma omp parallel
  {
    std::vector<T> acc(k);
#pragma omp for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      std::fill(acc.begin(), acc.end(), T(0));
      const T* dcrow = pdc + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T g = dcrow[j];
        const T* btrow = pbt + j * k;
        for (std::size_t p = 0; p < k; ++p) acc[p] += g * btrow[p];
      }
      T* darow = pda + i * k;
      for (std::size_t p = 0; p < k; ++p) darow[p] += acc[p];
    }
  }
}

template <typename T>
void matmul_grad_b(std::span<const T> a, std::span<const T> dc,
                   std::span<T> db, std::size_t m, std::size_t k,
                   std::size_t n) {
  const T* pa = a.data();
  const T* pdc = dc.data();
  T* pdb = db.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(k); ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    T* dbrow = pdb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = pa[i * k + p];
      const T* dcrow = pdc + i * n;
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
    }
  }
}

}  // namespace parallel

void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

int threads() { return omp_get_max_threads(); }

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("NARROWBERT_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
  }
  return omp_get_max_threads();
}

#define NARROWBERT_INSTANTIATE_KERNELS(T)                                      \
  template void serial::matmul<T>(std::span<const T>, std::span<const T>,      \
                                  std::span<T>, std::size_t, std::size_t,      \
                                  std::size_t);                                \
  template void serial::matmul_grad_a<T>(std::span<const T>,                   \
                                         std::span<const T>, std::span<T>,     \
                                         std::size_t, std::size_t,             \
                                         std::size_t);                         \
  template void serial::matmul_grad_b<T>(std::span<const T>,                   \
                                         std::span<const T>, std::span<T>,     \
                                         std::size_t, std::size_t,             \
                                         std::size_t);                         \
  template void parallel::matmul<T>(std::span<const T>, std::span<const T>,    \
                                    std::span<T>, std::size_t, std::size_t,    \
                                    std::size_t);                              \
  template void parallel::matmul_grad_a<T>(std::span<const T>,                 \
                                           std::span<const T>, std::span<T>,   \
                                           std::size_t, std::size_t,           \
                                           std::size_t);                       \
  template void parallel::matmul_grad_b<T>(std::span<const T>,                 \
                                           std::span<const T>, std::span<T>,   \
                                           std::size_t, std::size_t,           \
                                           std::size_t);

NARROWBERT_INSTANTIATE_KERNELS(float)
NARROWBERT_INSTANTIATE_KERNELS(double)

#undef NARROWBERT_INSTANTIATE_KERNELS

}  // namespace narrowbert::kernels
