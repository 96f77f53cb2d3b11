// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

// Data-parallel inner loops used by the encoders, the flat index, and the
// optimizers. Every kernel has a scalar reference implementation and,
// on x86-64, an AVX2+FMA variant; the active set is selected at runtime.
// All arithmetic is double precision.
namespace kivqa::kernels {

enum class Backend { Auto, Scalar, Avx2 };

// True if this process can execute the AVX2 variants.
bool avx2_supported();

// Selects the kernel set. Auto picks AVX2 when supported, else scalar.
// Requesting Avx2 on a machine without it throws. The KIVQA_KERNELS
// environment variable ("auto" | "scalar" | "avx2") sets the initial choice.
void set_backend(Backend b);
Backend active_backend();
std::string backend_name(Backend b);

// sum_i a[i] * b[i]
double dot(const double* a, const double* b, std::size_t n);

// y[i] += alpha * x[i]
void axpy(std::size_t n, double alpha, const double* x, double* y);

// x[i] *= alpha
void scale(std::size_t n, double alpha, double* x);

double sum(const double* a, std::size_t n);

// max over a[0..n), n >= 1
double max_value(const double* a, std::size_t n);

// Row-major GEMM family. Shapes:
//   matmul_nn: C(m,n)  = A(m,k) * B(k,n)
//   matmul_nt: C(m,n)  = A(m,k) * B(n,k)^T
//   matmul_tn: C(m,n)  = A(k,m)^T * B(k,n)
// With acc=true the product is added into C instead of overwriting it.
void matmul_nn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc = false);
void matmul_nt(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc = false);
void matmul_tn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc = false);

// Reference (scalar-only) entry points, exposed so tests can compare the
// dispatched kernels against them regardless of the active backend.
namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(std::size_t n, double alpha, const double* x, double* y);
void scale(std::size_t n, double alpha, double* x);
double sum(const double* a, std::size_t n);
double max_value(const double* a, std::size_t n);
void matmul_nn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc);
void matmul_nt(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc);
void matmul_tn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(std::size_t n, double alpha, const double* x, double* y);
void scale(std::size_t n, double alpha, double* x);
double sum(const double* a, std::size_t n);
double max_value(const double* a, std::size_t n);
void matmul_nn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc);
void matmul_nt(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc);
void matmul_tn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc);
}  // namespace avx2
#endif

}  // namespace kivqa::kernels
