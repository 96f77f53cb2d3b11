// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "kivqa/matrix.hpp"

namespace kivqa::autodiff {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over Mat values. A tape is built per forward pass and
// backward() is called at most once; gradients accumulate into the grad
// buffers of every node with needs_grad set.
class Tape {
  public:
    Var input(Mat v, bool needs_grad = false);
    Var constant(Mat v) { return input(std::move(v), false); }

    const Mat& val(Var x) const;
    Mat& grad(Var x);
    bool needs_grad(Var x) const;
    std::size_t size() const { return nodes_.size(); }

    // C = A * B
    Var matmul(Var a, Var b);
    // C = A * B^T  (B given row-major as (n x k))
    Var matmul_nt(Var a, Var b);
    Var add(Var a, Var b);
    // out[r,:] = a[r,:] + bias[0,:]
    Var add_rowvec(Var a, Var bias);
    // out = a + c, c a plain constant (e.g. an additive attention mask)
    Var add_const(Var a, const Mat& c);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var gelu(Var a);
    // per-row normalization followed by elementwise gain/bias (both 1 x cols)
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
    Var softmax_rows(Var a);
    Var rows(Var a, int r0, int r1);
    Var cols(Var a, int c0, int c1);
    Var concat_rows(std::span<const Var> parts);
    Var concat_cols(std::span<const Var> parts);
    // out row i = table row ids[i]; repeated ids accumulate gradient
    Var gather_rows(Var table, const std::vector<int>& ids);
    // 1x1: sum_r [ logsumexp(logits[r,:]) - logits[r, targets[r]] ]
    Var cross_entropy_rows(Var logits, const std::vector<int>& targets);
    // 1x1: sum_r -sum_j P[r,j] * log softmax(logits[r,:])_j ; P rows sum to 1
    Var soft_cross_entropy(Var logits, const Mat& target_probs);
    Var sum_all(Var a);

    void backward(Var loss);

  private:
    struct Node {
        Mat val;
        Mat grad;
        bool needs = false;
        std::function<void(Tape&)> back;
    };

    Var make(Mat val, bool needs, std::function<void(Tape&)> back);
    std::vector<Node> nodes_;
    // id of the node whose back() is currently running; closures read their
    // upstream gradient through it
    int cur_out_ = -1;
    bool backward_done_ = false;
};

// Central-difference gradient check helper shared by the test suites.
// f evaluates the scalar loss from scratch; returns max relative error over
// the watched parameter entries, comparing f's analytic gradient (supplied
// by the caller) against (f(x+eps)-f(x-eps)) / (2 eps).
struct GradCheckResult {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

GradCheckResult gradient_check(Mat& param, const Mat& analytic_grad,
                               const std::function<double()>& eval_loss,
                               double eps = 1e-4, int max_entries = 64,
                               std::uint64_t probe_seed = 1234);

}  // namespace kivqa::autodiff
