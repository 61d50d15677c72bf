#include "ntk/kernels.hpp"

#include <vector>

namespace ntk::kernels {

namespace {

inline void matmul_row(const double* a, const double* b, double* c, std::int64_t i,
                       std::int64_t k, std::int64_t n) {
  double* ci = c + i * n;
  for (std::int64_t j = 0; j < n; ++j) ci[j] = 0.0;
  const double* ai = a + i * k;
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const double aik = ai[kk];
    const double* bk = b + kk * n;
    for (std::int64_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
  }
}

inline void matmul_tn_row(const double* a, const double* b, double* c, std::int64_t kk,
                          std::int64_t m, std::int64_t k, std::int64_t n) {
  double* ck = c + kk * n;
  for (std::int64_t j = 0; j < n; ++j) ck[j] = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    const double aik = a[i * k + kk];
    const double* bi = b + i * n;
    for (std::int64_t j = 0; j < n; ++j) ck[j] += aik * bi[j];
  }
}

inline void matmul_nt_row(const double* a, const double* b, double* c, std::int64_t i,
                          std::int64_t k, std::int64_t n) {
  const double* ai = a + i * k;
  double* ci = c + i * n;
  for (std::int64_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double acc = 0.0;
    for (std::int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
    ci[j] = acc;
  }
}

inline std::int64_t chunk_count(std::int64_t n) { return (n + kReduceChunk - 1) / kReduceChunk; }

inline double chunk_sum(const double* x, std::int64_t begin, std::int64_t end) {
  double acc = 0.0;
  for (std::int64_t i = begin; i < end; ++i) acc += x[i];
  return acc;
}

inline double chunk_sum_sq_dev(const double* x, double mean, std::int64_t begin,
                               std::int64_t end) {
  double acc = 0.0;
  for (std::int64_t i = begin; i < end; ++i) {
    double d = x[i] - mean;
    acc += d * d;
  }
  return acc;
}

}  // namespace

void matmul_serial(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n);
}

void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n);
}

void matmul_tn_serial(const double* a, const double* b, double* c, std::int64_t m,
                      std::int64_t k, std::int64_t n) {
  for (std::int64_t kk = 0; kk < k; ++kk) matmul_tn_row(a, b, c, kk, m, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t kk = 0; kk < k; ++kk) matmul_tn_row(a, b, c, kk, m, k, n);
}

void matmul_nt_serial(const double* a, const double* b, double* c, std::int64_t m,
                      std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) matmul_nt_row(a, b, c, i, k, n);
}

void matmul_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) matmul_nt_row(a, b, c, i, k, n);
}

double sum_serial(std::span<const double> x) {
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  const std::int64_t chunks = chunk_count(n);
  double acc = 0.0;
  for (std::int64_t ci = 0; ci < chunks; ++ci) {
    std::int64_t begin = ci * kReduceChunk;
    acc += chunk_sum(x.data(), begin, std::min(begin + kReduceChunk, n));
  }
  return acc;
}

double sum(std::span<const double> x) {
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  const std::int64_t chunks = chunk_count(n);
  if (chunks <= 1) return chunk_sum(x.data(), 0, n);
  std::vector<double> partial(static_cast<std::size_t>(chunks));
#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < chunks; ++ci) {
    std::int64_t begin = ci * kReduceChunk;
    partial[static_cast<std::size_t>(ci)] =
        chunk_sum(x.data(), begin, std::min(begin + kReduceChunk, n));
  }
  double acc = 0.0;
  for (double p : partial) acc += p;
  return acc;
}

double sum_sq_dev_serial(std::span<const double> x, double mean) {
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  const std::int64_t chunks = chunk_count(n);
  double acc = 0.0;
  for (std::int64_t ci = 0; ci < chunks; ++ci) {
    std::int64_t begin = ci * kReduceChunk;
    acc += chunk_sum_sq_dev(x.data(), mean, begin, std::min(begin + kReduceChunk, n));
  }
  return acc;
}

double sum_sq_dev(std::span<const double> x, double mean) {
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  const std::int64_t chunks = chunk_count(n);
  if (chunks <= 1) return chunk_sum_sq_dev(x.data(), mean, 0, n);
  std::vector<double> partial(static_cast<std::size_t>(chunks));
#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < chunks; ++ci) {
    std::int64_t begin = ci * kReduceChunk;
    partial[static_cast<std::size_t>(ci)] =
        chunk_sum_sq_dev(x.data(), mean, begin, std::min(begin + kReduceChunk, n));
  }
  double acc = 0.0;
  for (double p : partial) acc += p;
  return acc;
}

void axpy_serial(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
  const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace ntk::kernels
