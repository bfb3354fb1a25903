#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dime::kernels {

// Runtime thread cap for the parallel kernels. 0 means "use the OpenMP
// default", 1 forces serial execution everywhere.
void set_max_threads(int n);
int max_threads();

// Number of threads a kernel with `flops` worth of work would actually use.
int threads_for(std::int64_t flops);

// Work below this many flops is not worth a parallel region.
inline constexpr std::int64_t kParallelGrainFlops = 1 << 16;

// Dense row-major matrix products. Every element of C accumulates its
// contraction index in ascending order in both the serial and the parallel
// variants, so for any thread count the parallel results are bitwise
// identical to the serial reference (verified in tests). The *_serial
// variants are the references; the unsuffixed versions dispatch.

// C[m x n] = A[m x k] * B[k x n]
template <class T>
void matmul_nn_serial(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] = T(0);
    const T* ai = a + static_cast<std::int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      T av = ai[p];
      const T* bp = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x n] = A[m x k] * B[n x k]^T
template <class T>
void matmul_nt_serial(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::int64_t>(i) * k;
    T* ci = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + static_cast<std::int64_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
}

// C[k x n] = A[m x k]^T * B[m x n]
template <class T>
void matmul_tn_serial(const T* a, const T* b, T* c, int m, int k, int n) {
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(k) * n; ++i) c[i] = T(0);
  for (int p = 0; p < m; ++p) {
    const T* ap = a + static_cast<std::int64_t>(p) * k;
    const T* bp = b + static_cast<std::int64_t>(p) * n;
    for (int i = 0; i < k; ++i) {
      T av = ap[i];
      T* ci = c + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class T>
void matmul_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  std::int64_t flops = 2ll * m * k * n;
  int nt = threads_for(flops);
  if (nt <= 1) {
    matmul_nn_serial(a, b, c, m, k, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt)
#endif
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] = T(0);
    const T* ai = a + static_cast<std::int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      T av = ai[p];
      const T* bp = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  std::int64_t flops = 2ll * m * k * n;
  int nt = threads_for(flops);
  if (nt <= 1) {
    matmul_nt_serial(a, b, c, m, k, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt)
#endif
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::int64_t>(i) * k;
    T* ci = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + static_cast<std::int64_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = acc;
    }
  }
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  std::int64_t flops = 2ll * m * k * n;
  int nt = threads_for(flops);
  if (nt <= 1) {
    matmul_tn_serial(a, b, c, m, k, n);
    return;
  }
  // Parallel over rows of C; each C[i][j] still sums p = 0..m-1 in order.
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt)
#endif
  for (int i = 0; i < k; ++i) {
    T* ci = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] = T(0);
    for (int p = 0; p < m; ++p) {
      T av = a[static_cast<std::int64_t>(p) * k + i];
      const T* bp = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace dime::kernels
