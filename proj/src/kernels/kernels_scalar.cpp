// SPDX-License-Identifier: Apache-2.0
//
// Reference kernels. Plain loops, no reassociation tricks: this is the
// ground truth the SIMD variants are equivalence-tested against.

#include "kivqa/kernels.hpp"

namespace kivqa::kernels::scalar {

double dot(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(std::size_t n, double alpha, double* x) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

double sum(const double* a, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    return acc;
}

double max_value(const double* a, std::size_t n) {
    double m = a[0];
    for (std::size_t i = 1; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

void matmul_nn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = C + i * n;
        if (!acc)
            for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (std::size_t l = 0; l < k; ++l) {
            const double a = A[i * k + l];
            const double* bl = B + l * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += a * bl[j];
        }
    }
}

void matmul_nt(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = A + i * k;
        double* ci = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = dot(ai, B + j * k, k);
            ci[j] = acc ? ci[j] + d : d;
        }
    }
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    if (!acc)
        for (std::size_t i = 0; i < m * n; ++i) C[i] = 0.0;
    for (std::size_t l = 0; l < k; ++l) {
        const double* al = A + l * m;
        const double* bl = B + l * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double a = al[i];
            double* ci = C + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += a * bl[j];
        }
    }
}

}  // namespace kivqa::kernels::scalar
