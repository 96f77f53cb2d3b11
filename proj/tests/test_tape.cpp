// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <array>
#include <vector>

#include "kivqa/tape.hpp"

using namespace kivqa;
using namespace kivqa::autodiff;

namespace {

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    Mat m(r, c);
    fill_gaussian(m, rng, scale);
    return m;
}

// Builds the loss once to harvest the analytic gradient of params[which],
// then re-evaluates from scratch for central differences.
template <typename BuildLoss>
void check_op_gradient(std::vector<Mat>& params, int which, BuildLoss build, double tol = 1e-5) {
    Mat analytic;
    {
        Tape t;
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(t.input(p, true));
        Var loss = build(t, vars);
        t.backward(loss);
        analytic = t.grad(vars[which]);
    }
    auto eval = [&]() {
        Tape t;
        std::vector<Var> vars;
        for (auto& p : params) vars.push_back(t.input(p, false));
        Var loss = build(t, vars);
        return t.val(loss).at(0, 0);
    };
    auto res = gradient_check(params[which], analytic, eval);
    CAPTURE(res.worst_analytic);
    CAPTURE(res.worst_numeric);
    CHECK(res.max_rel_err < tol);
}

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
    Tape t;
    Mat A(1, 2);
    A.a = {1.0, 2.0};
    Mat B(1, 2);
    B.a = {3.0, -1.0};
    Var a = t.input(A), b = t.input(B);
    Var s = t.matmul_nt(a, b);
    CHECK(t.val(s).at(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("every tape op passes a central-difference gradient check") {
    for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(seed);
        {
            // matmul chain with bias add, gelu, scale
            std::vector<Mat> ps = {random_mat(rng, 3, 4), random_mat(rng, 4, 5), random_mat(rng, 1, 5)};
            for (int which : {0, 1, 2}) {
                check_op_gradient(ps, which, [](Tape& t, std::vector<Var>& v) {
                    Var h = t.matmul(v[0], v[1]);
                    h = t.add_rowvec(h, v[2]);
                    h = t.gelu(h);
                    h = t.scale(h, 0.7);
                    return t.sum_all(h);
                });
            }
        }
        {
            // matmul_nt + mul + softmax + column slice
            std::vector<Mat> ps = {random_mat(rng, 3, 6), random_mat(rng, 4, 6), random_mat(rng, 3, 4)};
            for (int which : {0, 1, 2}) {
                check_op_gradient(ps, which, [](Tape& t, std::vector<Var>& v) {
                    Var s = t.matmul_nt(v[0], v[1]);
                    s = t.mul(s, v[2]);
                    s = t.softmax_rows(s);
                    Var picked = t.cols(s, 1, 3);
                    return t.sum_all(t.gelu(picked));
                });
            }
        }
        {
            std::vector<Mat> ps = {random_mat(rng, 4, 8), random_mat(rng, 1, 8), random_mat(rng, 1, 8)};
            for (int which : {0, 1, 2}) {
                check_op_gradient(ps, which, [](Tape& t, std::vector<Var>& v) {
                    Var h = t.layer_norm(v[0], v[1], v[2]);
                    return t.sum_all(t.gelu(h));
                });
            }
        }
        {
            // gather + row/col concat + slicing + cross entropy
            std::vector<Mat> ps = {random_mat(rng, 6, 5), random_mat(rng, 2, 5)};
            std::vector<int> ids = {0, 3, 3, 5};
            std::vector<int> targets = {1, 0, 4, 2, 3, 1};
            check_op_gradient(ps, 0, [&](Tape& t, std::vector<Var>& v) {
                Var g = t.gather_rows(v[0], ids);
                std::array<Var, 2> parts{g, v[1]};
                Var all = t.concat_rows(parts);
                Var left = t.cols(all, 0, 3);
                Var right = t.cols(all, 3, 5);
                std::array<Var, 2> cparts{right, left};
                Var swapped = t.concat_cols(cparts);
                return t.cross_entropy_rows(swapped, targets);
            });
        }
        {
            Mat p(3, 4);
            Rng prng(seed + 100);
            for (int r = 0; r < 3; ++r) {
                double z = 0.0;
                for (int c = 0; c < 4; ++c) {
                    p.at(r, c) = prng.uniform() + 0.1;
                    z += p.at(r, c);
                }
                for (int c = 0; c < 4; ++c) p.at(r, c) /= z;
            }
            std::vector<Mat> ps = {random_mat(rng, 3, 4)};
            check_op_gradient(ps, 0, [&](Tape& t, std::vector<Var>& v) {
                return t.soft_cross_entropy(v[0], p);
            });
        }
        {
            std::vector<Mat> ps = {random_mat(rng, 2, 3), random_mat(rng, 2, 3)};
            Mat c = random_mat(rng, 2, 3);
            for (int which : {0, 1}) {
                check_op_gradient(ps, which, [&](Tape& t, std::vector<Var>& v) {
                    return t.sum_all(t.gelu(t.add_const(t.add(v[0], v[1]), c)));
                });
            }
        }
        {
            std::vector<Mat> ps = {random_mat(rng, 5, 3)};
            check_op_gradient(ps, 0, [](Tape& t, std::vector<Var>& v) {
                Var mid = t.rows(v[0], 1, 4);
                return t.sum_all(t.gelu(mid));
            });
        }
    }
}

TEST_CASE("gather accumulates gradient for repeated ids") {
    Tape t;
    Mat table(3, 2);
    table.a = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
    Var v = t.input(table, true);
    Var g = t.gather_rows(v, {1, 1, 1});
    Var loss = t.sum_all(g);
    t.backward(loss);
    CHECK(t.grad(v).at(1, 0) == doctest::Approx(3.0));
    CHECK(t.grad(v).at(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("cross_entropy_rows equals uniform log V on all-zero logits") {
    Tape t;
    Var logits = t.input(Mat(2, 7), true);
    Var loss = t.cross_entropy_rows(logits, {3, 6});
    CHECK(t.val(loss).at(0, 0) == doctest::Approx(2.0 * std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar loss and double invocation") {
    Tape t;
    Var x = t.input(Mat(2, 2), true);
    CHECK_THROWS_AS(t.backward(x), ContractError);
    Tape t2;
    Var y = t2.input(Mat(1, 1), true);
    Var s = t2.sum_all(y);
    t2.backward(s);
    CHECK_THROWS_AS(t2.backward(s), ContractError);
}
