// SPDX-License-Identifier: Apache-2.0

#include "kivqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "kivqa/kernels.hpp"

namespace kivqa {

using autodiff::Tape;
using autodiff::Var;

// ---------------------------------------------------------------------------
// candidates
// ---------------------------------------------------------------------------

std::vector<CandidateSet> build_candidates(std::span<const CandidateSet> seeds) {
    KIVQA_CHECK(!seeds.empty(), "build_candidates: empty batch");
    std::vector<CandidateSet> out;
    out.reserve(seeds.size());
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const CandidateSet& own = seeds[i];
        CandidateSet c;
        c.query_index = own.query_index;
        c.positive_id = own.positive_id;
        std::set<std::string> taken;
        auto push = [&](const std::string& id) {
            if (id == own.positive_id) return;  // own positive can never be a negative
            if (taken.insert(id).second) c.negative_ids.push_back(id);
        };
        for (const auto& id : own.negative_ids) push(id);
        for (std::size_t j = 0; j < seeds.size(); ++j) {
            if (j == i) continue;
            push(seeds[j].positive_id);
            for (const auto& id : seeds[j].negative_ids) push(id);
        }
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

double contrastive_loss(double pos_score, std::span<const double> neg_scores) {
    double m = pos_score;
    for (double s : neg_scores) {
        KIVQA_CHECK(std::isfinite(s), "contrastive_loss: non-finite negative score");
        m = std::max(m, s);
    }
    KIVQA_CHECK(std::isfinite(pos_score), "contrastive_loss: non-finite positive score");
    double z = std::exp(pos_score - m);
    for (double s : neg_scores) z += std::exp(s - m);
    return std::log(z) + m - pos_score;
}

namespace {
// log-softmax into out; returns nothing. n >= 1.
void log_softmax(std::span<const double> x, double temperature, std::vector<double>& out) {
    const double inv_t = 1.0 / temperature;
    out.resize(x.size());
    double m = x[0] * inv_t;
    for (double v : x) m = std::max(m, v * inv_t);
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv_t - m;
        z += std::exp(out[i]);
    }
    const double lz = std::log(z);
    for (double& v : out) v -= lz;
}
}  // namespace

double kd_loss(std::span<const double> teacher_scores, std::span<const double> student_scores,
               double temperature) {
    KIVQA_CHECK(teacher_scores.size() == student_scores.size() && !teacher_scores.empty(),
                "kd_loss: lists must be non-empty and aligned (", teacher_scores.size(), " vs ",
                student_scores.size(), ")");
    std::vector<double> lt, ls;
    log_softmax(teacher_scores, temperature, lt);
    log_softmax(student_scores, temperature, ls);
    double kl = 0.0;
    for (std::size_t i = 0; i < lt.size(); ++i) kl += std::exp(lt[i]) * (lt[i] - ls[i]);
    return std::max(0.0, kl);  // guard the sign against rounding on the equality case
}

// ---------------------------------------------------------------------------
// optimizer, schedule
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Mat*> params, const AdamConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Mat* p : params_) {
        m_.emplace_back(p->rows, p->cols);
        v_.emplace_back(p->rows, p->cols);
    }
}

void Adam::step(const std::vector<const Mat*>& grads, double lr_factor) {
    KIVQA_CHECK(grads.size() == params_.size(), "adam: gradient/parameter count mismatch");
    ++t_;
    const double lr = cfg_.lr * lr_factor;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Mat& p = *params_[i];
        const Mat& g = *grads[i];
        KIVQA_CHECK(p.same_shape(g), "adam: gradient shape mismatch at tensor ", i);
        Mat& m = m_[i];
        Mat& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m.a[j] = cfg_.beta1 * m.a[j] + (1.0 - cfg_.beta1) * g.a[j];
            v.a[j] = cfg_.beta2 * v.a[j] + (1.0 - cfg_.beta2) * g.a[j] * g.a[j];
            const double mhat = m.a[j] / bc1;
            const double vhat = v.a[j] / bc2;
            double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
            if (cfg_.weight_decay > 0.0) upd += cfg_.weight_decay * p.a[j];
            p.a[j] -= lr * upd;
        }
    }
}

double clip_global_norm(const std::vector<Mat*>& grads, double max_norm) {
    double sq = 0.0;
    for (const Mat* g : grads) sq += kernels::dot(g->data(), g->data(), g->size());
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Mat* g : grads) kernels::scale(g->size(), s, g->data());
    }
    return norm;
}

double LinearSchedule::factor(int step) const {
    if (total_steps <= 0) return 1.0;
    if (warmup_steps > 0 && step < warmup_steps)
        return static_cast<double>(step + 1) / warmup_steps;
    if (total_steps <= warmup_steps) return 1.0;
    const double rest = static_cast<double>(total_steps - step) / (total_steps - warmup_steps);
    return std::max(0.0, rest);
}

// ---------------------------------------------------------------------------
// log sink
// ---------------------------------------------------------------------------

struct TrainLog::Impl {
    std::ofstream out;
};

TrainLog::TrainLog(const std::string& path) : impl_(new Impl) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    impl_->out.open(path, std::ios::binary);
    if (!impl_->out) throw DataError(cat("cannot open metrics log ", path));
}

TrainLog::~TrainLog() = default;

void TrainLog::line(const std::string& json_text) {
    impl_->out << json_text << '\n';
    impl_->out.flush();
}

// ---------------------------------------------------------------------------
// encoding plumbing
// ---------------------------------------------------------------------------

TextSequence query_text_input(const QueryRecord& record, EncodingPath path,
                              const CaptionStore* captions, const Vocab& vocab,
                              int max_input_tokens) {
    if (path == EncodingPath::T) {
        KIVQA_CHECK(captions != nullptr, "T-path query encoding needs a caption store");
        return build_unimodal_query_input(record, *captions, vocab, max_input_tokens);
    }
    return truncate_to(vocab.encode(record.question), max_input_tokens);
}

namespace {

const VisualInput& query_visual(const QueryRecord& record, const VisualStore* visuals) {
    KIVQA_CHECK(visuals != nullptr, "MM-path query encoding needs a visual store");
    auto it = visuals->find(record.image_id);
    if (it == visuals->end())
        throw DataError(cat("no visual features for image ", record.image_id, " (query ",
                            record.query_id, ")"));
    return it->second;
}

struct BoundEncoder {
    EncoderParams* params;
    EncoderVars vars;
    std::vector<Mat*> mats;
    std::vector<Var> var_list;
};

BoundEncoder bind_encoder(Tape& tape, EncoderParams& params, bool trainable) {
    BoundEncoder b;
    b.params = &params;
    b.vars = register_encoder(tape, params, trainable);
    for_each_tensor(params.w, params.multimodal(), [&](const char*, Mat& m) { b.mats.push_back(&m); });
    for_each_tensor(b.vars, params.multimodal(), [&](const char*, Var& v) { b.var_list.push_back(v); });
    return b;
}

// Query/passage inputs for one path, encoded on the caller's tape.
Var encode_query_on_tape(Tape& tape, const BoundEncoder& enc, const QueryRecord& record,
                         const RetrievalStores& stores) {
    const EncoderParams& p = *enc.params;
    const TextSequence seq =
        query_text_input(record, p.path, stores.captions, p.vocab, p.cfg.max_input_tokens);
    const VisualInput* vis = p.multimodal() ? &query_visual(record, stores.visuals) : nullptr;
    return encode_on_tape(tape, enc.vars, p, seq, vis);
}

Var encode_passage_on_tape(Tape& tape, const BoundEncoder& enc, const Passage& passage) {
    const EncoderParams& p = *enc.params;
    if (p.multimodal()) {
        auto [seq, vis] = pemir_inputs(passage, p.vocab, p.cfg);
        return encode_on_tape(tape, enc.vars, p, seq, &vis);
    }
    TextSequence seq = truncate_to(p.vocab.encode(passage.text), p.cfg.max_input_tokens);
    return encode_on_tape(tape, enc.vars, p, seq, nullptr);
}

std::vector<double> embed_query(const EncoderParams& params, const QueryRecord& record,
                                const RetrievalStores& stores) {
    const TextSequence seq =
        query_text_input(record, params.path, stores.captions, params.vocab, params.cfg.max_input_tokens);
    if (params.multimodal())
        return encode_multimodal_path(params, seq, query_visual(record, stores.visuals)).embedding;
    return encode_text_path(params, seq).embedding;
}

std::vector<double> embed_passage(const EncoderParams& params, const Passage& passage) {
    if (params.multimodal()) {
        auto [seq, vis] = pemir_inputs(passage, params.vocab, params.cfg);
        return encode_multimodal_path(params, seq, vis).embedding;
    }
    TextSequence seq = truncate_to(params.vocab.encode(passage.text), params.cfg.max_input_tokens);
    return encode_text_path(params, seq).embedding;
}

}  // namespace

RetrievalJudgedRun evaluate_retrieval(const std::vector<const EncoderParams*>& paths,
                                      const std::vector<QueryRecord>& queries,
                                      const RetrievalStores& stores, int k) {
    KIVQA_CHECK(!paths.empty(), "evaluate_retrieval: need at least one encoder");
    KIVQA_CHECK(k >= 1, "evaluate_retrieval: k must be >= 1");
    const PassageStore& passages = *stores.passages;
    const std::size_t n = passages.size();

    // passage matrix per path
    std::vector<std::vector<std::vector<double>>> pass_emb(paths.size());
    for (std::size_t pi = 0; pi < paths.size(); ++pi) {
        pass_emb[pi].resize(n);
        for (std::size_t d = 0; d < n; ++d) pass_emb[pi][d] = embed_passage(*paths[pi], passages.at(d));
    }

    RetrievalJudgedRun run;
    run.reserve(queries.size());
    std::vector<double> scores(n);
    for (const auto& q : queries) {
        std::fill(scores.begin(), scores.end(), 0.0);
        for (std::size_t pi = 0; pi < paths.size(); ++pi) {
            const auto qe = embed_query(*paths[pi], q, stores);
            for (std::size_t d = 0; d < n; ++d)
                scores[d] += kernels::dot(qe.data(), pass_emb[pi][d].data(), qe.size());
        }
        std::vector<std::size_t> order(n);
        for (std::size_t d = 0; d < n; ++d) order[d] = d;
        const std::size_t depth = std::min<std::size_t>(k, n);
        std::partial_sort(order.begin(), order.begin() + depth, order.end(),
                          [&](std::size_t a, std::size_t b) {
                              if (scores[a] != scores[b]) return scores[a] > scores[b];
                              return passages.at(a).passage_id < passages.at(b).passage_id;
                          });
        JudgedQuery jq;
        for (std::size_t r = 0; r < depth; ++r) jq.ranked.push_back(passages.at(order[r]).passage_id);
        jq.relevant.insert(q.relevant_passage_ids.begin(), q.relevant_passage_ids.end());
        run.push_back(std::move(jq));
    }
    return run;
}

double validation_mrr5(const std::vector<const EncoderParams*>& paths,
                       const std::vector<QueryRecord>& queries, const RetrievalStores& stores) {
    return mrr_at_k(evaluate_retrieval(paths, queries, stores, 5), 5);
}

// ---------------------------------------------------------------------------
// contrastive training
// ---------------------------------------------------------------------------

namespace {

CandidateSet seed_for(const std::vector<QueryRecord>& records, std::size_t idx) {
    const QueryRecord& r = records[idx];
    KIVQA_CHECK(!r.relevant_passage_ids.empty(), "query ", r.query_id, " has no relevant passage");
    CandidateSet s;
    s.query_index = static_cast<int>(idx);
    s.positive_id = r.relevant_passage_ids.front();  // ids kept sorted by ingestion
    s.negative_ids = r.hard_negative_ids;
    return s;
}

std::string json_num(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

struct BatchPassages {
    std::vector<std::string> uniq;     // first-occurrence order
    std::map<std::string, int> pos_of;
};

BatchPassages intern_batch_passages(const std::vector<CandidateSet>& cands) {
    BatchPassages bp;
    auto intern = [&](const std::string& id) {
        if (bp.pos_of.emplace(id, static_cast<int>(bp.uniq.size())).second) bp.uniq.push_back(id);
    };
    for (const auto& c : cands) {
        intern(c.positive_id);
        for (const auto& id : c.negative_ids) intern(id);
    }
    return bp;
}

struct BatchForward {
    Var mean_loss;
    double min_score = 0.0, max_score = 0.0;
};

// Shared forward pass: encodes the batch once per path and returns the mean
// loss node. make_query_loss turns one query's per-path score rows into its
// loss contribution.
template <typename MakeQueryLoss>
BatchForward batch_forward(Tape& tape, std::vector<BoundEncoder>& encs,
                           const std::vector<QueryRecord>& records,
                           const std::vector<std::size_t>& batch_idx,
                           const std::vector<CandidateSet>& cands, const RetrievalStores& stores,
                           const BatchPassages& bp, MakeQueryLoss make_query_loss) {
    const PassageStore& passages = *stores.passages;
    const std::vector<std::string>& uniq = bp.uniq;
    const std::map<std::string, int>& pos_of = bp.pos_of;

    BatchForward out;
    std::vector<std::vector<Var>> passage_nodes(encs.size());
    std::vector<std::vector<Var>> query_nodes(encs.size());
    for (std::size_t pi = 0; pi < encs.size(); ++pi) {
        passage_nodes[pi].reserve(uniq.size());
        for (const auto& id : uniq)
            passage_nodes[pi].push_back(encode_passage_on_tape(tape, encs[pi], passages.by_id(id)));
        query_nodes[pi].reserve(batch_idx.size());
        for (std::size_t bi : batch_idx)
            query_nodes[pi].push_back(encode_query_on_tape(tape, encs[pi], records[bi], stores));
    }

    bool have_range = false;
    Var total;
    for (std::size_t qi = 0; qi < cands.size(); ++qi) {
        const CandidateSet& c = cands[qi];
        std::vector<int> cand_rows;
        cand_rows.push_back(pos_of.at(c.positive_id));
        for (const auto& id : c.negative_ids) cand_rows.push_back(pos_of.at(id));

        std::vector<Var> score_rows(encs.size());
        for (std::size_t pi = 0; pi < encs.size(); ++pi) {
            std::vector<Var> stack;
            stack.reserve(cand_rows.size());
            for (int row : cand_rows) stack.push_back(passage_nodes[pi][row]);
            Var cand_mat = tape.concat_rows(stack);
            score_rows[pi] = tape.matmul_nt(query_nodes[pi][qi], cand_mat);
        }
        Var scores = score_rows[0];
        for (std::size_t pi = 1; pi < encs.size(); ++pi) scores = tape.add(scores, score_rows[pi]);

        const Mat& sv = tape.val(scores);
        for (std::size_t j = 0; j < sv.size(); ++j) {
            if (!have_range) {
                out.min_score = out.max_score = sv.a[j];
                have_range = true;
            } else {
                out.min_score = std::min(out.min_score, sv.a[j]);
                out.max_score = std::max(out.max_score, sv.a[j]);
            }
        }

        Var q_loss = make_query_loss(tape, qi, scores);
        total = (qi == 0) ? q_loss : tape.add(total, q_loss);
    }
    out.mean_loss = tape.scale(total, 1.0 / static_cast<double>(cands.size()));
    return out;
}

struct OptimState {
    std::vector<Mat*> all_mats;
    Adam adam;
    LinearSchedule schedule;
    double grad_clip;
};

void optimizer_step(Tape& tape, std::vector<BoundEncoder>& encs, OptimState& opt, int step) {
    std::vector<Mat*> grad_ptrs;
    for (auto& enc : encs)
        for (Var v : enc.var_list) grad_ptrs.push_back(&tape.grad(v));
    clip_global_norm(grad_ptrs, opt.grad_clip);
    std::vector<const Mat*> grads(grad_ptrs.begin(), grad_ptrs.end());
    opt.adam.step(grads, opt.schedule.factor(step));
}

}  // namespace

IsolatedResult train_contrastive(std::vector<EncoderParams*> paths,
                                 const std::vector<QueryRecord>& train_records,
                                 const std::vector<QueryRecord>& val_records,
                                 const RetrievalStores& stores, const RetrieverTrainConfig& cfg,
                                 TrainLog* log) {
    KIVQA_CHECK(!paths.empty(), "train_contrastive: need at least one path");
    KIVQA_CHECK(!train_records.empty(), "train_contrastive: empty training split");
    const std::size_t n = train_records.size();
    const int batches_per_epoch = static_cast<int>((n + cfg.batch_size - 1) / cfg.batch_size);
    const int total_steps = batches_per_epoch * cfg.epochs;

    std::vector<Mat*> all_mats;
    for (EncoderParams* p : paths)
        for_each_tensor(p->w, p->multimodal(), [&](const char*, Mat& m) { all_mats.push_back(&m); });

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    OptimState opt{all_mats,
                   Adam(all_mats, acfg),
                   LinearSchedule{static_cast<int>(total_steps * cfg.warmup_fraction), total_steps},
                   cfg.grad_clip};

    std::vector<const EncoderParams*> cpaths(paths.begin(), paths.end());
    IsolatedResult result;
    result.params = *paths.front();
    result.best_val_mrr5 = -1.0;

    const std::string phase =
        paths.size() == 1 ? "isolated_" + path_name(paths[0]->path) : "joint_dual";

    Rng order_rng(cfg.seed);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        for (int b = 0; b < batches_per_epoch; ++b, ++step) {
            const std::size_t lo = static_cast<std::size_t>(b) * cfg.batch_size;
            const std::size_t hi = std::min(n, lo + cfg.batch_size);
            std::vector<std::size_t> batch_idx(order.begin() + lo, order.begin() + hi);

            std::vector<CandidateSet> seeds;
            for (std::size_t bi : batch_idx) seeds.push_back(seed_for(train_records, bi));
            auto cands = build_candidates(seeds);
            auto bp = intern_batch_passages(cands);

            Tape tape;
            std::vector<BoundEncoder> encs;
            for (EncoderParams* p : paths) encs.push_back(bind_encoder(tape, *p, true));

            auto fwd = batch_forward(tape, encs, train_records, batch_idx, cands, stores, bp,
                                     [](Tape& t, std::size_t, Var scores) {
                                         return t.cross_entropy_rows(scores, {0});
                                     });
            const double loss = tape.val(fwd.mean_loss).at(0, 0);
            if (!std::isfinite(loss))
                throw NumericError(cat(phase, ": non-finite loss at epoch ", epoch, " batch ", b,
                                       "; batch score range [", fwd.min_score, ", ", fwd.max_score,
                                       "]"));
            result.loss_trajectory.push_back(loss);
            tape.backward(fwd.mean_loss);
            optimizer_step(tape, encs, opt, step);
            if (log)
                log->line(cat("{\"phase\":\"", phase, "\",\"epoch\":", epoch, ",\"step\":", step,
                              ",\"loss\":", json_num(loss), "}"));
        }
        const double val = val_records.empty() ? 0.0 : validation_mrr5(cpaths, val_records, stores);
        result.val_mrr5_per_epoch.push_back(val);
        if (log)
            log->line(cat("{\"phase\":\"", phase, "\",\"epoch\":", epoch, ",\"step\":", step,
                          ",\"val_mrr5\":", json_num(val), "}"));
        if (val > result.best_val_mrr5) {
            result.best_val_mrr5 = val;
            result.params = *paths.front();
        }
    }
    if (val_records.empty()) result.params = *paths.front();
    return result;
}

IsolatedResult train_isolated(EncoderParams& params, const std::vector<QueryRecord>& train_records,
                              const std::vector<QueryRecord>& val_records,
                              const RetrievalStores& stores, const RetrieverTrainConfig& cfg,
                              TrainLog* log) {
    return train_contrastive({&params}, train_records, val_records, stores, cfg, log);
}

// ---------------------------------------------------------------------------
// iterative knowledge distillation
// ---------------------------------------------------------------------------

namespace {

Mat softmax_probs(const std::vector<double>& scores, double temperature) {
    std::vector<double> ls;
    log_softmax(scores, temperature, ls);
    Mat p(1, static_cast<int>(ls.size()));
    for (std::size_t i = 0; i < ls.size(); ++i) p.a[i] = std::exp(ls[i]);
    return p;
}

double entropy_of(const Mat& probs) {
    double h = 0.0;
    for (double p : probs.a)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

}  // namespace

DistillationState run_iterative_distillation(const EncoderParams& ckpt_T,
                                             const EncoderParams& ckpt_MM,
                                             const std::vector<QueryRecord>& train_records,
                                             const std::vector<QueryRecord>& val_records,
                                             const RetrievalStores& stores,
                                             const RetrieverTrainConfig& train_cfg,
                                             const DistillConfig& distill_cfg, TrainLog* log) {
    KIVQA_CHECK(ckpt_T.path == EncodingPath::T && ckpt_MM.path == EncodingPath::MM,
                "distillation: checkpoints must be the T and MM paths");
    DistillationState state;
    state.best_T = ckpt_T;
    state.best_MM = ckpt_MM;
    state.best_val_T = validation_mrr5({&ckpt_T}, val_records, stores);
    state.best_val_MM = validation_mrr5({&ckpt_MM}, val_records, stores);

    // the stronger validation encoder teaches first; ties go to the T path
    state.teacher_path = state.best_val_T >= state.best_val_MM ? EncodingPath::T : EncodingPath::MM;
    state.student_path = state.teacher_path == EncodingPath::T ? EncodingPath::MM : EncodingPath::T;
    if (log)
        log->line(cat("{\"phase\":\"distill\",\"round\":-1,\"val_mrr5_T\":", json_num(state.best_val_T),
                      ",\"val_mrr5_MM\":", json_num(state.best_val_MM), ",\"teacher\":\"",
                      path_name(state.teacher_path), "\"}"));
    if (distill_cfg.max_rounds == 0) return state;

    EncoderParams cur_T = ckpt_T;
    EncoderParams cur_MM = ckpt_MM;
    const double floor_T = state.best_val_T * distill_cfg.divergence_floor;
    const double floor_MM = state.best_val_MM * distill_cfg.divergence_floor;

    const std::size_t n = train_records.size();
    const int batches_per_round = static_cast<int>((n + train_cfg.batch_size - 1) / train_cfg.batch_size);
    const int eval_stride =
        std::max(1, batches_per_round / std::max(1, distill_cfg.evals_per_round));

    int stale_rounds = 0;
    int global_step = 0;
    Rng order_rng(train_cfg.seed ^ 0x9d15ull);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (int round = 0; round < distill_cfg.max_rounds; ++round) {
        EncodingPath teacher_path =
            (round == 0) ? state.teacher_path
                         : (state.history.back().teacher == EncodingPath::T ? EncodingPath::MM
                                                                            : EncodingPath::T);
        const EncodingPath student_path =
            teacher_path == EncodingPath::T ? EncodingPath::MM : EncodingPath::T;
        EncoderParams& teacher = teacher_path == EncodingPath::T ? cur_T : cur_MM;
        EncoderParams& student = student_path == EncodingPath::T ? cur_T : cur_MM;
        const double floor = student_path == EncodingPath::T ? floor_T : floor_MM;

        std::vector<Mat*> student_mats;
        for_each_tensor(student.w, student.multimodal(),
                        [&](const char*, Mat& m) { student_mats.push_back(&m); });
        AdamConfig acfg;
        acfg.lr = train_cfg.lr;
        OptimState opt{student_mats,
                       Adam(student_mats, acfg),
                       LinearSchedule{static_cast<int>(batches_per_round * train_cfg.warmup_fraction),
                                      batches_per_round},
                       train_cfg.grad_clip};

        EncoderParams round_best = student;
        double round_best_val = validation_mrr5({&student}, val_records, stores);
        bool aborted = false;

        order_rng.shuffle(order);
        for (int b = 0; b < batches_per_round; ++b, ++global_step) {
            const std::size_t lo = static_cast<std::size_t>(b) * train_cfg.batch_size;
            const std::size_t hi = std::min(n, lo + train_cfg.batch_size);
            std::vector<std::size_t> batch_idx(order.begin() + lo, order.begin() + hi);

            std::vector<CandidateSet> seeds;
            for (std::size_t bi : batch_idx) seeds.push_back(seed_for(train_records, bi));
            auto cands = build_candidates(seeds);
            auto bp = intern_batch_passages(cands);

            // frozen-teacher listwise targets on the student's candidate sets;
            // each unique batch passage is embedded once
            std::vector<std::vector<double>> teacher_pass(bp.uniq.size());
            for (std::size_t u = 0; u < bp.uniq.size(); ++u)
                teacher_pass[u] = embed_passage(teacher, stores.passages->by_id(bp.uniq[u]));
            std::vector<Mat> targets(cands.size());
            double entropy_sum = 0.0;
            for (std::size_t qi = 0; qi < cands.size(); ++qi) {
                const auto tq = embed_query(teacher, train_records[batch_idx[qi]], stores);
                auto dot_with = [&](const std::string& id) {
                    const auto& pe = teacher_pass[bp.pos_of.at(id)];
                    return kernels::dot(tq.data(), pe.data(), tq.size());
                };
                std::vector<double> ts;
                ts.reserve(1 + cands[qi].negative_ids.size());
                ts.push_back(dot_with(cands[qi].positive_id));
                for (const auto& id : cands[qi].negative_ids) ts.push_back(dot_with(id));
                cands[qi].scores.assign(ts.begin() + 1, ts.end());
                targets[qi] = softmax_probs(ts, distill_cfg.temperature);
                entropy_sum += entropy_of(targets[qi]);
            }

            Tape tape;
            std::vector<BoundEncoder> encs;
            encs.push_back(bind_encoder(tape, student, true));

            auto fwd = batch_forward(
                tape, encs, train_records, batch_idx, cands, stores, bp,
                [&](Tape& t, std::size_t qi, Var scores) {
                    Var scaled = distill_cfg.temperature == 1.0
                                     ? scores
                                     : t.scale(scores, 1.0 / distill_cfg.temperature);
                    Var loss = t.soft_cross_entropy(scaled, targets[qi]);
                    if (distill_cfg.mixed_contrastive_weight > 0.0) {
                        Var ce = t.cross_entropy_rows(scores, {0});
                        loss = t.add(loss, t.scale(ce, distill_cfg.mixed_contrastive_weight));
                    }
                    return loss;
                });
            // reported loss is the true mean KL (subtract the teacher entropy)
            const double loss =
                tape.val(fwd.mean_loss).at(0, 0) - entropy_sum / static_cast<double>(cands.size());
            if (!std::isfinite(loss))
                throw NumericError(cat("distill round ", round, ": non-finite loss at batch ", b,
                                       "; score range [", fwd.min_score, ", ", fwd.max_score, "]"));
            tape.backward(fwd.mean_loss);
            optimizer_step(tape, encs, opt, b);
            if (log)
                log->line(cat("{\"phase\":\"distill\",\"round\":", round, ",\"step\":", global_step,
                              ",\"student\":\"", path_name(student_path), "\",\"loss\":",
                              json_num(loss), "}"));

            const bool at_eval = ((b + 1) % eval_stride == 0) || (b + 1 == batches_per_round);
            if (!at_eval) continue;
            const double val = validation_mrr5({&student}, val_records, stores);
            if (log)
                log->line(cat("{\"phase\":\"distill\",\"round\":", round, ",\"step\":", global_step,
                              ",\"student\":\"", path_name(student_path), "\",\"val_mrr5\":",
                              json_num(val), "}"));
            if (val < floor) {
                student = round_best;  // divergence guard: abort round, keep prior best
                aborted = true;
                break;
            }
            if (val > round_best_val) {
                round_best_val = val;
                round_best = student;
            } else {
                student = round_best;  // early stop this round on the validation signal
                break;
            }
        }
        if (!aborted) student = round_best;

        double& best_val_slot = student_path == EncodingPath::T ? state.best_val_T : state.best_val_MM;
        EncoderParams& best_slot = student_path == EncodingPath::T ? state.best_T : state.best_MM;
        bool improved = false;
        if (round_best_val > best_val_slot) {
            best_val_slot = round_best_val;
            best_slot = round_best;
            improved = true;
        }
        state.history.push_back({round, teacher_path,
                                 student_path == EncodingPath::T ? round_best_val : state.best_val_T,
                                 student_path == EncodingPath::MM ? round_best_val : state.best_val_MM,
                                 aborted});
        state.round = round + 1;
        state.teacher_path = student_path;  // roles swap for the next round
        state.student_path = teacher_path;

        stale_rounds = improved ? 0 : stale_rounds + 1;
        if (stale_rounds >= distill_cfg.patience) break;
    }
    return state;
}

}  // namespace kivqa
