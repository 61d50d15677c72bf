#pragma once

#include <cstdint>
#include <span>

// Data-parallel inner loops. Every kernel has a serial reference (_serial
// suffix) and an OpenMP version with the same name; the two are bit-identical
// because parallel variants never change accumulation order: each output
// element is produced by exactly one thread with the serial inner-loop order,
// and reductions sum fixed-size chunk partials in index order regardless of
// thread count. tests/test_kernels.cpp checks bit-equality, tools/bench
// compares throughput.
namespace ntk::kernels {

inline constexpr std::int64_t kReduceChunk = 4096;

// C[m,n] = sum_k A[m,k] * B[k,n]
void matmul_serial(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n);
void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n);

// C[k,n] = sum_m A[m,k] * B[m,n]  (A transposed)
void matmul_tn_serial(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                      std::int64_t n);
void matmul_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n);

// C[m,n] = sum_k A[m,k] * B[n,k]  (B transposed)
void matmul_nt_serial(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                      std::int64_t n);
void matmul_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n);

double sum_serial(std::span<const double> x);
double sum(std::span<const double> x);

// sum of (x_i - mean)^2, the second pass of a two-pass variance.
double sum_sq_dev_serial(std::span<const double> x, double mean);
double sum_sq_dev(std::span<const double> x, double mean);

// y += a * x
void axpy_serial(double a, std::span<const double> x, std::span<double> y);
void axpy(double a, std::span<const double> x, std::span<double> y);

}  // namespace ntk::kernels
