// SPDX-License-Identifier: Apache-2.0

#include "kivqa/kernels.hpp"

#include <cstdlib>
#include <cstring>

#include "kivqa/errors.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <cpuid.h>
#endif

namespace kivqa::kernels {

bool avx2_supported() {
#if defined(__x86_64__) || defined(_M_X64)
    unsigned eax, ebx, ecx, edx;
    // AVX2: leaf 7 subleaf 0, EBX bit 5. FMA: leaf 1, ECX bit 12.
    if (!__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) return false;
    const bool avx2 = (ebx & (1u << 5)) != 0;
    if (!__get_cpuid(1, &eax, &ebx, &ecx, &edx)) return false;
    const bool fma = (ecx & (1u << 12)) != 0;
    return avx2 && fma;
#else
    return false;
#endif
}

namespace {

struct KernelTable {
    double (*dot)(const double*, const double*, std::size_t);
    void (*axpy)(std::size_t, double, const double*, double*);
    void (*scale)(std::size_t, double, double*);
    double (*sum)(const double*, std::size_t);
    double (*max_value)(const double*, std::size_t);
    void (*matmul_nn)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
    void (*matmul_nt)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
    void (*matmul_tn)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
};

constexpr KernelTable kScalarTable = {
    scalar::dot, scalar::axpy, scalar::scale, scalar::sum, scalar::max_value,
    scalar::matmul_nn, scalar::matmul_nt, scalar::matmul_tn,
};

#if defined(__x86_64__) || defined(_M_X64)
constexpr KernelTable kAvx2Table = {
    avx2::dot, avx2::axpy, avx2::scale, avx2::sum, avx2::max_value,
    avx2::matmul_nn, avx2::matmul_nt, avx2::matmul_tn,
};
#endif

struct Dispatch {
    const KernelTable* table;
    Backend backend;

    Dispatch() {
        Backend want = Backend::Auto;
        if (const char* env = std::getenv("KIVQA_KERNELS")) {
            if (std::strcmp(env, "scalar") == 0) want = Backend::Scalar;
            else if (std::strcmp(env, "avx2") == 0) want = Backend::Avx2;
        }
        apply(want);
    }

    void apply(Backend want) {
        if (want == Backend::Auto)
            want = avx2_supported() ? Backend::Avx2 : Backend::Scalar;
        if (want == Backend::Avx2) {
#if defined(__x86_64__) || defined(_M_X64)
            if (!avx2_supported())
                throw ConfigError("kernels: AVX2 backend requested but the CPU does not support AVX2+FMA");
            table = &kAvx2Table;
#else
            throw ConfigError("kernels: AVX2 backend requested on a non-x86-64 build");
#endif
        } else {
            table = &kScalarTable;
        }
        backend = want;
    }
};

Dispatch& dispatch() {
    static Dispatch d;
    return d;
}

}  // namespace

void set_backend(Backend b) { dispatch().apply(b); }

Backend active_backend() { return dispatch().backend; }

std::string backend_name(Backend b) {
    switch (b) {
        case Backend::Scalar: return "scalar";
        case Backend::Avx2: return "avx2";
        default: return "auto";
    }
}

double dot(const double* a, const double* b, std::size_t n) { return dispatch().table->dot(a, b, n); }
void axpy(std::size_t n, double alpha, const double* x, double* y) { dispatch().table->axpy(n, alpha, x, y); }
void scale(std::size_t n, double alpha, double* x) { dispatch().table->scale(n, alpha, x); }
double sum(const double* a, std::size_t n) { return dispatch().table->sum(a, n); }
double max_value(const double* a, std::size_t n) { return dispatch().table->max_value(a, n); }

void matmul_nn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    dispatch().table->matmul_nn(m, k, n, A, B, C, acc);
}
void matmul_nt(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    dispatch().table->matmul_nt(m, k, n, A, B, C, acc);
}
void matmul_tn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    dispatch().table->matmul_tn(m, k, n, A, B, C, acc);
}

}  // namespace kivqa::kernels
