// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <array>
#include <vector>

#include "kivqa/kernels.hpp"
#include "kivqa/matrix.hpp"

using namespace kivqa;
namespace ker = kivqa::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.gaussian();
    return v;
}

// naive triple loop, written independently of the kernel implementations
void naive_mm(std::size_t m, std::size_t k, std::size_t n, const double* A, const double* B,
              double* C, bool bt, bool at) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t l = 0; l < k; ++l) {
                const double a = at ? A[l * m + i] : A[i * k + l];
                const double b = bt ? B[j * k + l] : B[l * n + j];
                s += a * b;
            }
            C[i * n + j] = s;
        }
}

bool close(double a, double b, double tol = 1e-10) {
    const double scale = std::max({std::abs(a), std::abs(b), 1.0});
    return std::abs(a - b) <= tol * scale;
}

}  // namespace

TEST_CASE("scalar matmul variants match the naive oracle") {
    Rng rng(11);
    const std::array<std::size_t, 3> shapes[] = {{1, 1, 1}, {3, 5, 4}, {7, 13, 9}, {16, 64, 16}};
    for (auto [m, k, n] : shapes) {
        auto A = random_vec(rng, m * k);
        auto B = random_vec(rng, k * n);
        std::vector<double> C1(m * n), C2(m * n);
        ker::scalar::matmul_nn(m, k, n, A.data(), B.data(), C1.data(), false);
        naive_mm(m, k, n, A.data(), B.data(), C2.data(), false, false);
        for (std::size_t i = 0; i < m * n; ++i) REQUIRE(close(C1[i], C2[i]));

        auto Bt = random_vec(rng, n * k);
        ker::scalar::matmul_nt(m, k, n, A.data(), Bt.data(), C1.data(), false);
        naive_mm(m, k, n, A.data(), Bt.data(), C2.data(), true, false);
        for (std::size_t i = 0; i < m * n; ++i) REQUIRE(close(C1[i], C2[i]));

        auto At = random_vec(rng, k * m);
        ker::scalar::matmul_tn(m, k, n, At.data(), B.data(), C1.data(), false);
        naive_mm(m, k, n, At.data(), B.data(), C2.data(), false, true);
        for (std::size_t i = 0; i < m * n; ++i) REQUIRE(close(C1[i], C2[i]));
    }
}

TEST_CASE("accumulating matmul adds onto C") {
    Rng rng(3);
    const std::size_t m = 4, k = 6, n = 5;
    auto A = random_vec(rng, m * k);
    auto B = random_vec(rng, k * n);
    auto base = random_vec(rng, m * n);
    auto C = base;
    ker::matmul_nn(m, k, n, A.data(), B.data(), C.data(), true);
    std::vector<double> P(m * n);
    naive_mm(m, k, n, A.data(), B.data(), P.data(), false, false);
    for (std::size_t i = 0; i < m * n; ++i) REQUIRE(close(C[i], base[i] + P[i]));
}

TEST_CASE("dot/axpy/scale/sum/max hand cases") {
    const double a[] = {1.0, 2.0, 3.0};
    const double b[] = {4.0, -5.0, 6.0};
    CHECK(ker::dot(a, b, 3) == doctest::Approx(12.0));
    double y[] = {1.0, 1.0, 1.0};
    ker::axpy(3, 2.0, a, y);
    CHECK(y[0] == doctest::Approx(3.0));
    CHECK(y[2] == doctest::Approx(7.0));
    ker::scale(3, 0.5, y);
    CHECK(y[1] == doctest::Approx(2.5));
    CHECK(ker::sum(a, 3) == doctest::Approx(6.0));
    CHECK(ker::max_value(b, 3) == doctest::Approx(6.0));
}

#if defined(__x86_64__) || defined(_M_X64)
TEST_CASE("avx2 kernels match scalar reference on awkward lengths") {
    if (!ker::avx2_supported()) {
        MESSAGE("AVX2 not available; skipping equivalence checks");
        return;
    }
    Rng rng(42);
    for (std::size_t n : {1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 63, 64, 100, 257}) {
        auto x = random_vec(rng, n);
        auto yv = random_vec(rng, n);

        CHECK(close(ker::avx2::dot(x.data(), yv.data(), n), ker::scalar::dot(x.data(), yv.data(), n)));
        CHECK(close(ker::avx2::sum(x.data(), n), ker::scalar::sum(x.data(), n)));
        CHECK(ker::avx2::max_value(x.data(), n) == ker::scalar::max_value(x.data(), n));

        auto y1 = yv, y2 = yv;
        ker::avx2::axpy(n, 1.7, x.data(), y1.data());
        ker::scalar::axpy(n, 1.7, x.data(), y2.data());
        for (std::size_t i = 0; i < n; ++i) CHECK(close(y1[i], y2[i]));

        auto s1 = x, s2 = x;
        ker::avx2::scale(n, -0.3, s1.data());
        ker::scalar::scale(n, -0.3, s2.data());
        for (std::size_t i = 0; i < n; ++i) CHECK(close(s1[i], s2[i]));
    }

    const std::array<std::size_t, 3> shapes[] = {{2, 3, 2}, {5, 9, 7}, {16, 65, 33}};
    for (auto [m, k, n] : shapes) {
        auto A = random_vec(rng, m * k);
        auto B = random_vec(rng, k * n);
        auto Bt = random_vec(rng, n * k);
        auto At = random_vec(rng, k * m);
        std::vector<double> C1(m * n), C2(m * n);

        ker::avx2::matmul_nn(m, k, n, A.data(), B.data(), C1.data(), false);
        ker::scalar::matmul_nn(m, k, n, A.data(), B.data(), C2.data(), false);
        for (std::size_t i = 0; i < m * n; ++i) CHECK(close(C1[i], C2[i]));

        ker::avx2::matmul_nt(m, k, n, A.data(), Bt.data(), C1.data(), false);
        ker::scalar::matmul_nt(m, k, n, A.data(), Bt.data(), C2.data(), false);
        for (std::size_t i = 0; i < m * n; ++i) CHECK(close(C1[i], C2[i]));

        ker::avx2::matmul_tn(m, k, n, At.data(), B.data(), C1.data(), false);
        ker::scalar::matmul_tn(m, k, n, At.data(), B.data(), C2.data(), false);
        for (std::size_t i = 0; i < m * n; ++i) CHECK(close(C1[i], C2[i]));
    }
}

TEST_CASE("backend selection is explicit and reversible") {
    const auto original = ker::active_backend();
    ker::set_backend(ker::Backend::Scalar);
    CHECK(ker::active_backend() == ker::Backend::Scalar);
    CHECK(ker::backend_name(ker::active_backend()) == "scalar");
    if (ker::avx2_supported()) {
        ker::set_backend(ker::Backend::Avx2);
        CHECK(ker::active_backend() == ker::Backend::Avx2);
    }
    ker::set_backend(ker::Backend::Auto);
    CHECK(ker::active_backend() != ker::Backend::Auto);  // resolves to a concrete set
    ker::set_backend(original);
}
#endif
