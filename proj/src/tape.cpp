// SPDX-License-Identifier: Apache-2.0

#include "kivqa/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "kivqa/kernels.hpp"

namespace kivqa::autodiff {

namespace ker = kivqa::kernels;

Var Tape::make(Mat val, bool needs, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(val);
    n.needs = needs;
    if (needs) {
        n.grad = Mat(n.val.rows, n.val.cols);
        n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Mat v, bool needs_grad) { return make(std::move(v), needs_grad, nullptr); }

const Mat& Tape::val(Var x) const {
    KIVQA_CHECK(x.valid() && x.id < static_cast<int>(nodes_.size()), "tape: bad var id");
    return nodes_[x.id].val;
}

Mat& Tape::grad(Var x) {
    KIVQA_CHECK(x.valid() && nodes_[x.id].needs, "tape: grad requested for a non-grad node");
    return nodes_[x.id].grad;
}

bool Tape::needs_grad(Var x) const { return x.valid() && nodes_[x.id].needs; }

Var Tape::matmul(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    KIVQA_CHECK(A.cols == B.rows, "matmul: inner dims ", A.cols, " vs ", B.rows);
    Mat C(A.rows, B.cols);
    ker::matmul_nn(A.rows, A.cols, B.cols, A.data(), B.data(), C.data());
    const bool needs = needs_grad(a) || needs_grad(b);
    return make(std::move(C), needs, [a, b](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        const Mat& A = t.val(a);
        const Mat& B = t.val(b);
        if (t.needs_grad(a))
            ker::matmul_nt(u.rows, u.cols, A.cols, u.data(), B.data(), t.grad(a).data(), true);
        if (t.needs_grad(b))
            ker::matmul_tn(B.rows, A.rows, B.cols, A.data(), u.data(), t.grad(b).data(), true);
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    KIVQA_CHECK(A.cols == B.cols, "matmul_nt: inner dims ", A.cols, " vs ", B.cols);
    Mat C(A.rows, B.rows);
    ker::matmul_nt(A.rows, A.cols, B.rows, A.data(), B.data(), C.data());
    const bool needs = needs_grad(a) || needs_grad(b);
    return make(std::move(C), needs, [a, b](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        const Mat& A = t.val(a);
        const Mat& B = t.val(b);
        if (t.needs_grad(a))
            ker::matmul_nn(u.rows, u.cols, B.cols, u.data(), B.data(), t.grad(a).data(), true);
        if (t.needs_grad(b))
            ker::matmul_tn(B.rows, A.rows, B.cols, u.data(), A.data(), t.grad(b).data(), true);
    });
}

Var Tape::add(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    KIVQA_CHECK(A.same_shape(B), "add: shape mismatch");
    Mat C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C.a[i] += B.a[i];
    const bool needs = needs_grad(a) || needs_grad(b);
    return make(std::move(C), needs, [a, b](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        if (t.needs_grad(a)) ker::axpy(u.size(), 1.0, u.data(), t.grad(a).data());
        if (t.needs_grad(b)) ker::axpy(u.size(), 1.0, u.data(), t.grad(b).data());
    });
}

Var Tape::add_rowvec(Var a, Var bias) {
    const Mat& A = val(a);
    const Mat& B = val(bias);
    KIVQA_CHECK(B.rows == 1 && B.cols == A.cols, "add_rowvec: bias shape");
    Mat C = A;
    for (int r = 0; r < C.rows; ++r) ker::axpy(C.cols, 1.0, B.data(), C.row(r));
    const bool needs = needs_grad(a) || needs_grad(bias);
    return make(std::move(C), needs, [a, bias](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        if (t.needs_grad(a)) ker::axpy(u.size(), 1.0, u.data(), t.grad(a).data());
        if (t.needs_grad(bias)) {
            Mat& g = t.grad(bias);
            for (int r = 0; r < u.rows; ++r) ker::axpy(u.cols, 1.0, u.row(r), g.data());
        }
    });
}

Var Tape::add_const(Var a, const Mat& c) {
    const Mat& A = val(a);
    KIVQA_CHECK(A.same_shape(c), "add_const: shape mismatch");
    Mat C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C.a[i] += c.a[i];
    return make(std::move(C), needs_grad(a), [a](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        if (t.needs_grad(a)) ker::axpy(u.size(), 1.0, u.data(), t.grad(a).data());
    });
}

Var Tape::mul(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    KIVQA_CHECK(A.same_shape(B), "mul: shape mismatch");
    Mat C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C.a[i] *= B.a[i];
    const bool needs = needs_grad(a) || needs_grad(b);
    return make(std::move(C), needs, [a, b](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        const Mat& A = t.val(a);
        const Mat& B = t.val(b);
        if (t.needs_grad(a)) {
            Mat& g = t.grad(a);
            for (std::size_t i = 0; i < u.size(); ++i) g.a[i] += u.a[i] * B.a[i];
        }
        if (t.needs_grad(b)) {
            Mat& g = t.grad(b);
            for (std::size_t i = 0; i < u.size(); ++i) g.a[i] += u.a[i] * A.a[i];
        }
    });
}

Var Tape::scale(Var a, double s) {
    Mat C = val(a);
    ker::scale(C.size(), s, C.data());
    return make(std::move(C), needs_grad(a), [a, s](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        if (t.needs_grad(a)) ker::axpy(u.size(), s, u.data(), t.grad(a).data());
    });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
inline double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
inline double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }
}  // namespace

Var Tape::gelu(Var a) {
    const Mat& A = val(a);
    Mat C(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i) C.a[i] = A.a[i] * norm_cdf(A.a[i]);
    return make(std::move(C), needs_grad(a), [a](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        const Mat& A = t.val(a);
        Mat& g = t.grad(a);
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double x = A.a[i];
            g.a[i] += u.a[i] * (norm_cdf(x) + x * norm_pdf(x));
        }
    });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Mat& X = val(x);
    const Mat& G = val(gain);
    const Mat& B = val(bias);
    KIVQA_CHECK(G.rows == 1 && G.cols == X.cols && B.rows == 1 && B.cols == X.cols,
                "layer_norm: gain/bias shape");
    const int n = X.cols;
    Mat out(X.rows, n);
    auto xhat = std::make_shared<Mat>(X.rows, n);
    auto inv_sigma = std::make_shared<std::vector<double>>(X.rows);
    for (int r = 0; r < X.rows; ++r) {
        const double* xr = X.row(r);
        const double mu = ker::sum(xr, n) / n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = xr[j] - mu;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[r] = is;
        double* hr = xhat->row(r);
        double* or_ = out.row(r);
        for (int j = 0; j < n; ++j) {
            hr[j] = (xr[j] - mu) * is;
            or_[j] = hr[j] * G.a[j] + B.a[j];
        }
    }
    const bool needs = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
    return make(std::move(out), needs, [x, gain, bias, xhat, inv_sigma](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        const Mat& G = t.val(gain);
        const int n = u.cols;
        if (t.needs_grad(bias)) {
            Mat& gb = t.grad(bias);
            for (int r = 0; r < u.rows; ++r) ker::axpy(n, 1.0, u.row(r), gb.data());
        }
        if (t.needs_grad(gain)) {
            Mat& gg = t.grad(gain);
            for (int r = 0; r < u.rows; ++r) {
                const double* ur = u.row(r);
                const double* hr = xhat->row(r);
                for (int j = 0; j < n; ++j) gg.a[j] += ur[j] * hr[j];
            }
        }
        if (t.needs_grad(x)) {
            Mat& gx = t.grad(x);
            for (int r = 0; r < u.rows; ++r) {
                const double* ur = u.row(r);
                const double* hr = xhat->row(r);
                const double is = (*inv_sigma)[r];
                double mean_v = 0.0, mean_vh = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double v = ur[j] * G.a[j];
                    mean_v += v;
                    mean_vh += v * hr[j];
                }
                mean_v /= n;
                mean_vh /= n;
                double* gr = gx.row(r);
                for (int j = 0; j < n; ++j) {
                    const double v = ur[j] * G.a[j];
                    gr[j] += is * (v - mean_v - hr[j] * mean_vh);
                }
            }
        }
    });
}

Var Tape::softmax_rows(Var a) {
    const Mat& A = val(a);
    Mat C(A.rows, A.cols);
    for (int r = 0; r < A.rows; ++r) {
        const double* xr = A.row(r);
        double* yr = C.row(r);
        const double m = ker::max_value(xr, A.cols);
        double z = 0.0;
        for (int j = 0; j < A.cols; ++j) {
            yr[j] = std::exp(xr[j] - m);
            z += yr[j];
        }
        ker::scale(A.cols, 1.0 / z, yr);
    }
    Var out = make(std::move(C), needs_grad(a), nullptr);
    if (needs_grad(a)) {
        nodes_[out.id].back = [a, out](Tape& t) {
            const Mat& u = t.nodes_[t.cur_out_].grad;
            const Mat& Y = t.val(out);
            Mat& g = t.grad(a);
            for (int r = 0; r < u.rows; ++r) {
                const double* ur = u.row(r);
                const double* yr = Y.row(r);
                const double s = ker::dot(ur, yr, u.cols);
                double* gr = g.row(r);
                for (int j = 0; j < u.cols; ++j) gr[j] += (ur[j] - s) * yr[j];
            }
        };
    }
    return out;
}

Var Tape::rows(Var a, int r0, int r1) {
    const Mat& A = val(a);
    KIVQA_CHECK(0 <= r0 && r0 < r1 && r1 <= A.rows, "rows: bad slice [", r0, ",", r1, ")");
    Mat C(r1 - r0, A.cols);
    std::copy(A.row(r0), A.row(r0) + C.size(), C.data());
    return make(std::move(C), needs_grad(a), [a, r0](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        if (t.needs_grad(a))
            ker::axpy(u.size(), 1.0, u.data(), t.grad(a).row(r0));
    });
}

Var Tape::cols(Var a, int c0, int c1) {
    const Mat& A = val(a);
    KIVQA_CHECK(0 <= c0 && c0 < c1 && c1 <= A.cols, "cols: bad slice [", c0, ",", c1, ")");
    Mat C(A.rows, c1 - c0);
    for (int r = 0; r < A.rows; ++r)
        std::copy(A.row(r) + c0, A.row(r) + c1, C.row(r));
    return make(std::move(C), needs_grad(a), [a, c0](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        if (!t.needs_grad(a)) return;
        Mat& g = t.grad(a);
        for (int r = 0; r < u.rows; ++r)
            ker::axpy(u.cols, 1.0, u.row(r), g.row(r) + c0);
    });
}

Var Tape::concat_rows(std::span<const Var> parts) {
    KIVQA_CHECK(!parts.empty(), "concat_rows: empty");
    int total = 0;
    const int c = val(parts[0]).cols;
    bool needs = false;
    for (Var p : parts) {
        KIVQA_CHECK(val(p).cols == c, "concat_rows: column mismatch");
        total += val(p).rows;
        needs = needs || needs_grad(p);
    }
    Mat C(total, c);
    int r = 0;
    for (Var p : parts) {
        const Mat& P = val(p);
        std::copy(P.data(), P.data() + P.size(), C.row(r));
        r += P.rows;
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return make(std::move(C), needs, [ps](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        int r = 0;
        for (Var p : ps) {
            const Mat& P = t.val(p);
            if (t.needs_grad(p))
                ker::axpy(P.size(), 1.0, u.row(r), t.grad(p).data());
            r += P.rows;
        }
    });
}

Var Tape::concat_cols(std::span<const Var> parts) {
    KIVQA_CHECK(!parts.empty(), "concat_cols: empty");
    const int r = val(parts[0]).rows;
    int total = 0;
    bool needs = false;
    for (Var p : parts) {
        KIVQA_CHECK(val(p).rows == r, "concat_cols: row mismatch");
        total += val(p).cols;
        needs = needs || needs_grad(p);
    }
    Mat C(r, total);
    int c = 0;
    for (Var p : parts) {
        const Mat& P = val(p);
        for (int i = 0; i < r; ++i)
            std::copy(P.row(i), P.row(i) + P.cols, C.row(i) + c);
        c += P.cols;
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return make(std::move(C), needs, [ps](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        int c = 0;
        for (Var p : ps) {
            const Mat& P = t.val(p);
            if (t.needs_grad(p)) {
                Mat& g = t.grad(p);
                for (int i = 0; i < u.rows; ++i)
                    ker::axpy(P.cols, 1.0, u.row(i) + c, g.row(i));
            }
            c += P.cols;
        }
    });
}

Var Tape::gather_rows(Var table, const std::vector<int>& ids) {
    const Mat& T = val(table);
    Mat C(static_cast<int>(ids.size()), T.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        KIVQA_CHECK(ids[i] >= 0 && ids[i] < T.rows, "gather_rows: id ", ids[i], " out of range");
        std::copy(T.row(ids[i]), T.row(ids[i]) + T.cols, C.row(static_cast<int>(i)));
    }
    return make(std::move(C), needs_grad(table), [table, ids](Tape& t) {
        const Mat& u = t.nodes_[t.cur_out_].grad;
        if (!t.needs_grad(table)) return;
        Mat& g = t.grad(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
            ker::axpy(u.cols, 1.0, u.row(static_cast<int>(i)), g.row(ids[i]));
    });
}

namespace {
// log softmax helper returning probs; logits row in, probs row out, returns logsumexp
double row_softmax(const double* x, int n, double* probs) {
    const double m = ker::max_value(x, n);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
        probs[j] = std::exp(x[j] - m);
        z += probs[j];
    }
    ker::scale(n, 1.0 / z, probs);
    return m + std::log(z);
}
}  // namespace

Var Tape::cross_entropy_rows(Var logits, const std::vector<int>& targets) {
    const Mat& L = val(logits);
    KIVQA_CHECK(static_cast<int>(targets.size()) == L.rows, "cross_entropy_rows: target count");
    auto probs = std::make_shared<Mat>(L.rows, L.cols);
    double loss = 0.0;
    for (int r = 0; r < L.rows; ++r) {
        KIVQA_CHECK(targets[r] >= 0 && targets[r] < L.cols, "cross_entropy_rows: target id");
        const double lse = row_softmax(L.row(r), L.cols, probs->row(r));
        loss += lse - L.at(r, targets[r]);
    }
    Mat out(1, 1);
    out.at(0, 0) = loss;
    return make(std::move(out), needs_grad(logits), [logits, targets, probs](Tape& t) {
        const double u = t.nodes_[t.cur_out_].grad.at(0, 0);
        if (!t.needs_grad(logits)) return;
        Mat& g = t.grad(logits);
        for (int r = 0; r < g.rows; ++r) {
            ker::axpy(g.cols, u, probs->row(r), g.row(r));
            g.at(r, targets[r]) -= u;
        }
    });
}

Var Tape::soft_cross_entropy(Var logits, const Mat& target_probs) {
    const Mat& L = val(logits);
    KIVQA_CHECK(L.same_shape(target_probs), "soft_cross_entropy: shape mismatch");
    auto probs = std::make_shared<Mat>(L.rows, L.cols);
    auto tp = std::make_shared<Mat>(target_probs);
    double loss = 0.0;
    for (int r = 0; r < L.rows; ++r) {
        const double lse = row_softmax(L.row(r), L.cols, probs->row(r));
        const double psum = ker::sum(tp->row(r), L.cols);
        loss += psum * lse - ker::dot(tp->row(r), L.row(r), L.cols);
    }
    Mat out(1, 1);
    out.at(0, 0) = loss;
    return make(std::move(out), needs_grad(logits), [logits, probs, tp](Tape& t) {
        const double u = t.nodes_[t.cur_out_].grad.at(0, 0);
        if (!t.needs_grad(logits)) return;
        Mat& g = t.grad(logits);
        for (int r = 0; r < g.rows; ++r) {
            const double psum = ker::sum(tp->row(r), g.cols);
            const double* pr = probs->row(r);
            const double* tr = tp->row(r);
            double* gr = g.row(r);
            for (int j = 0; j < g.cols; ++j) gr[j] += u * (psum * pr[j] - tr[j]);
        }
    });
}

Var Tape::sum_all(Var a) {
    const Mat& A = val(a);
    Mat out(1, 1);
    out.at(0, 0) = ker::sum(A.data(), A.size());
    return make(std::move(out), needs_grad(a), [a](Tape& t) {
        const double u = t.nodes_[t.cur_out_].grad.at(0, 0);
        if (!t.needs_grad(a)) return;
        Mat& g = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) g.a[i] += u;
    });
}

void Tape::backward(Var loss) {
    KIVQA_CHECK(!backward_done_, "tape: backward called twice");
    KIVQA_CHECK(loss.valid() && loss.id < static_cast<int>(nodes_.size()), "tape: bad loss var");
    const Mat& lv = nodes_[loss.id].val;
    KIVQA_CHECK(lv.rows == 1 && lv.cols == 1, "tape: loss must be scalar");
    KIVQA_CHECK(nodes_[loss.id].needs, "tape: loss does not depend on any grad input");
    backward_done_ = true;
    nodes_[loss.id].grad.at(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        if (nodes_[i].needs && nodes_[i].back) {
            cur_out_ = i;
            nodes_[i].back(*this);
        }
    }
}

GradCheckResult gradient_check(Mat& param, const Mat& analytic_grad,
                               const std::function<double()>& eval_loss,
                               double eps, int max_entries, std::uint64_t probe_seed) {
    KIVQA_CHECK(param.same_shape(analytic_grad), "gradient_check: shape mismatch");
    GradCheckResult res;
    const std::size_t n = param.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (static_cast<int>(n) > max_entries) {
        Rng rng(probe_seed);
        rng.shuffle(idx);
        idx.resize(max_entries);
    }
    for (std::size_t i : idx) {
        const double save = param.a[i];
        param.a[i] = save + eps;
        const double lp = eval_loss();
        param.a[i] = save - eps;
        const double lm = eval_loss();
        param.a[i] = save;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double analytic = analytic_grad.a[i];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        const double rel = std::abs(numeric - analytic) / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_analytic = analytic;
            res.worst_numeric = numeric;
        }
    }
    return res;
}

}  // namespace kivqa::autodiff
