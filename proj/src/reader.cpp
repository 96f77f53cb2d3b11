// SPDX-License-Identifier: Apache-2.0

#include "kivqa/reader.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "kivqa/binio.hpp"
#include "kivqa/kernels.hpp"

namespace kivqa {

using autodiff::Tape;
using autodiff::Var;

void ReaderConfig::validate() const {
    if (width <= 0 || heads <= 0 || width % heads != 0)
        throw ConfigError(cat("reader width ", width, " must be a positive multiple of heads ", heads));
    if (enc_blocks <= 0 || dec_blocks <= 0 || num_regions <= 0 || feature_dim <= 0 ||
        max_text_tokens <= 0 || max_output_tokens <= 0 || beam <= 0 || n_passages < 0)
        throw ConfigError("reader config: sizes must be positive (n_passages may be 0)");
}

namespace {

EncoderConfig reader_encoder_config(const ReaderConfig& cfg) {
    EncoderConfig e;
    e.width = cfg.width;
    e.heads = cfg.heads;
    e.blocks = cfg.enc_blocks;
    e.out_dim = cfg.width;  // unused; the reader never pools
    e.max_input_tokens = cfg.max_text_tokens;
    e.num_regions = cfg.num_regions;
    e.feature_dim = cfg.feature_dim;
    return e;
}

template <typename F>
void visit_reader_tensors(ReaderParams& p, F&& fn) {
    for_each_tensor(p.enc, /*multimodal=*/true, /*include_pool=*/false, fn);
    for_each_decoder_tensor(p.dec, fn);
}

}  // namespace

ReaderParams ReaderParams::init(const ReaderConfig& cfg, const Vocab& vocab, std::uint64_t seed) {
    cfg.validate();
    ReaderParams p;
    p.cfg = cfg;
    p.vocab = vocab;
    const int w = cfg.width;

    p.enc.tok_emb = Mat(vocab.size(), w);
    p.enc.pos_emb = Mat(cfg.max_text_tokens + 1, w);
    p.enc.region_pos_emb = Mat(cfg.num_regions, w);
    p.enc.vis_proj_w = Mat(cfg.feature_dim + 4, w);
    p.enc.vis_proj_b = Mat(1, w);
    p.enc.blocks.resize(cfg.enc_blocks);
    for (auto& b : p.enc.blocks) {
        b.ln1_g = Mat(1, w);
        b.ln1_b = Mat(1, w);
        b.wq = Mat(w, w);
        b.bq = Mat(1, w);
        b.wk = Mat(w, w);
        b.bk = Mat(1, w);
        b.wv = Mat(w, w);
        b.bv = Mat(1, w);
        b.wo = Mat(w, w);
        b.bo = Mat(1, w);
        b.ln2_g = Mat(1, w);
        b.ln2_b = Mat(1, w);
        b.w1 = Mat(w, 4 * w);
        b.b1 = Mat(1, 4 * w);
        b.w2 = Mat(4 * w, w);
        b.b2 = Mat(1, w);
    }
    p.enc.final_ln_g = Mat(1, w);
    p.enc.final_ln_b = Mat(1, w);

    p.dec.pos_emb = Mat(cfg.max_output_tokens + 1, w);
    p.dec.blocks.resize(cfg.dec_blocks);
    for (auto& b : p.dec.blocks) {
        b.ln1_g = Mat(1, w);
        b.ln1_b = Mat(1, w);
        b.wq = Mat(w, w);
        b.bq = Mat(1, w);
        b.wk = Mat(w, w);
        b.bk = Mat(1, w);
        b.wv = Mat(w, w);
        b.bv = Mat(1, w);
        b.wo = Mat(w, w);
        b.bo = Mat(1, w);
        b.lnx_g = Mat(1, w);
        b.lnx_b = Mat(1, w);
        b.xwq = Mat(w, w);
        b.xbq = Mat(1, w);
        b.xwk = Mat(w, w);
        b.xbk = Mat(1, w);
        b.xwv = Mat(w, w);
        b.xbv = Mat(1, w);
        b.xwo = Mat(w, w);
        b.xbo = Mat(1, w);
        b.ln2_g = Mat(1, w);
        b.ln2_b = Mat(1, w);
        b.w1 = Mat(w, 4 * w);
        b.b1 = Mat(1, 4 * w);
        b.w2 = Mat(4 * w, w);
        b.b2 = Mat(1, w);
    }
    p.dec.final_ln_g = Mat(1, w);
    p.dec.final_ln_b = Mat(1, w);

    Rng rng(seed);
    visit_reader_tensors(p, [&](const char* name, Mat& m) {
        const std::string n(name);
        const bool gain = n.ends_with("ln1_g") || n.ends_with("ln2_g") || n.ends_with("lnx_g") ||
                          n.ends_with("final_ln_g");
        if (gain) {
            m.fill(1.0);
        } else if (m.rows == 1) {
            m.fill(0.0);
        } else {
            fill_gaussian(m, rng, 0.02);
        }
    });
    return p;
}

std::vector<std::pair<std::string, Mat*>> ReaderParams::tensors() {
    std::vector<std::pair<std::string, Mat*>> out;
    visit_reader_tensors(*this, [&](const char* name, Mat& m) { out.emplace_back(name, &m); });
    return out;
}

namespace {
constexpr char kReaderMagic[4] = {'K', 'V', 'R', 'D'};
constexpr std::uint32_t kReaderVersion = 1;
}  // namespace

void ReaderParams::save(const std::string& file) const {
    std::filesystem::create_directories(std::filesystem::path(file).parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError(cat("cannot write reader checkpoint ", file));
    binio::put_bytes(out, kReaderMagic, 4);
    binio::put_u32(out, kReaderVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.width));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.heads));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.enc_blocks));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.dec_blocks));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.num_regions));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.feature_dim));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.max_text_tokens));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.max_output_tokens));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.beam));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.n_passages));
    binio::put_string(out, cfg.template_text);
    binio::put_u64(out, static_cast<std::uint64_t>(vocab.size()));
    for (const auto& tok : vocab.tokens()) binio::put_string(out, tok);
    auto ts = const_cast<ReaderParams*>(this)->tensors();
    binio::put_u32(out, static_cast<std::uint32_t>(ts.size()));
    for (const auto& [name, mat] : ts) {
        binio::put_string(out, name);
        binio::put_mat(out, *mat);
    }
    if (!out) throw DataError(cat("write failure on reader checkpoint ", file));
}

ReaderParams ReaderParams::load(const std::string& file) {
    binio::Reader rd(file);
    rd.expect_magic(kReaderMagic);
    const auto version = rd.u32("version");
    if (version != kReaderVersion)
        throw DataError(cat(file, ": unsupported reader checkpoint version ", version));
    ReaderConfig cfg;
    cfg.width = static_cast<int>(rd.u32("width"));
    cfg.heads = static_cast<int>(rd.u32("heads"));
    cfg.enc_blocks = static_cast<int>(rd.u32("enc_blocks"));
    cfg.dec_blocks = static_cast<int>(rd.u32("dec_blocks"));
    cfg.num_regions = static_cast<int>(rd.u32("num_regions"));
    cfg.feature_dim = static_cast<int>(rd.u32("feature_dim"));
    cfg.max_text_tokens = static_cast<int>(rd.u32("max_text_tokens"));
    cfg.max_output_tokens = static_cast<int>(rd.u32("max_output_tokens"));
    cfg.beam = static_cast<int>(rd.u32("beam"));
    cfg.n_passages = static_cast<int>(rd.u32("n_passages"));
    cfg.template_text = rd.str("template");
    const auto vocab_count = rd.u64("vocab size");
    std::vector<std::string> toks;
    toks.reserve(vocab_count);
    for (std::uint64_t i = 0; i < vocab_count; ++i) toks.push_back(rd.str("vocab token"));
    ReaderParams p = ReaderParams::init(cfg, Vocab::from_tokens(std::move(toks)), 0);
    auto ts = p.tensors();
    const auto count = rd.u32("tensor count");
    if (count != ts.size())
        throw DataError(cat(file, ": reader checkpoint has ", count, " tensors, expected ", ts.size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = rd.str("tensor name");
        Mat m = rd.mat(name.c_str());
        if (name != ts[i].first)
            throw DataError(cat(file, ": tensor ", i, " is '", name, "', expected '", ts[i].first, "'"));
        if (!m.same_shape(*ts[i].second))
            throw DataError(cat(file, ": tensor ", name, " has shape ", m.rows, "x", m.cols));
        *ts[i].second = std::move(m);
    }
    return p;
}

// ---------------------------------------------------------------------------
// fusion assembly and encoding
// ---------------------------------------------------------------------------

std::vector<TripletInput> assemble_fusion_inputs(const QueryRecord& record,
                                                 const VisualStore& visuals,
                                                 const std::vector<std::string>& passage_texts,
                                                 const Vocab& vocab, const ReaderConfig& cfg) {
    auto vit = visuals.find(record.image_id);
    if (vit == visuals.end())
        throw DataError(cat("no visual features for image ", record.image_id, " (query ",
                            record.query_id, ")"));
    const VisualInput& visual = vit->second;
    const std::vector<int> question_ids = vocab.encode(record.question);

    auto build_text = [&](const std::string* passage) {
        std::vector<int> ids;
        ids.push_back(Special::kQuestionMarker);
        ids.insert(ids.end(), question_ids.begin(), question_ids.end());
        if (passage) {
            ids.push_back(Special::kContextMarker);
            const auto pid = vocab.encode(*passage);
            ids.insert(ids.end(), pid.begin(), pid.end());
        }
        return truncate_to(std::move(ids), cfg.max_text_tokens);
    };

    std::vector<TripletInput> out;
    if (passage_texts.empty()) {
        out.push_back({build_text(nullptr), visual});
        return out;
    }
    out.reserve(passage_texts.size());
    for (const auto& text : passage_texts) out.push_back({build_text(&text), visual});
    return out;
}

ReaderVars register_reader(Tape& tape, ReaderParams& params, bool trainable) {
    ReaderVars vars;
    vars.enc.blocks.resize(params.enc.blocks.size());
    vars.dec.blocks.resize(params.dec.blocks.size());
    std::vector<Var*> slots;
    for_each_tensor(vars.enc, true, false, [&](const char*, Var& v) { slots.push_back(&v); });
    for_each_decoder_tensor(vars.dec, [&](const char*, Var& v) { slots.push_back(&v); });
    std::vector<Mat*> mats;
    visit_reader_tensors(params, [&](const char*, Mat& m) { mats.push_back(&m); });
    KIVQA_CHECK(slots.size() == mats.size(), "register_reader: tensor enumeration drift");
    for (std::size_t i = 0; i < mats.size(); ++i) *slots[i] = tape.input(*mats[i], trainable);
    return vars;
}

int FusionBatch::total_length() const {
    int total = 0;
    for (int l : lengths) total += l;
    return total;
}

FusionBatch fuse_encode(Tape& tape, const ReaderVars& vars, const ReaderParams& params,
                        const std::vector<TripletInput>& inputs) {
    KIVQA_CHECK(!inputs.empty(), "fuse_encode: at least one triplet required");
    const EncoderConfig ecfg = reader_encoder_config(params.cfg);
    FusionBatch fb;
    std::vector<Var> states;
    states.reserve(inputs.size());
    for (const auto& in : inputs) {
        Var s = encode_states_on_tape(tape, vars.enc, ecfg, params.vocab, true, in.text, &in.visual);
        fb.lengths.push_back(tape.val(s).rows);
        states.push_back(s);
    }
    fb.context = states.size() == 1 ? states[0] : tape.concat_rows(states);
    return fb;
}

// ---------------------------------------------------------------------------
// decoder
// ---------------------------------------------------------------------------

namespace {

Mat causal_mask(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m.at(i, j) = -1e30;
    return m;
}

Var decoder_mlp(Tape& t, Var x, const DecoderTensors<Var>::Block& b) {
    Var h = t.gelu(t.add_rowvec(t.matmul(x, b.w1), b.b1));
    return t.add_rowvec(t.matmul(h, b.w2), b.b2);
}

// Returns K x vocab logits for the teacher-forced input ids (BOS-prefixed).
Var decoder_logits(Tape& t, const ReaderVars& vars, const ReaderParams& params, Var context,
                   const std::vector<int>& input_ids) {
    const int k = static_cast<int>(input_ids.size());
    KIVQA_CHECK(k >= 1 && k <= params.cfg.max_output_tokens + 1,
                "decoder: input length ", k, " outside [1, ", params.cfg.max_output_tokens + 1, "]");
    std::vector<int> pos_ids(input_ids.size());
    for (std::size_t i = 0; i < pos_ids.size(); ++i) pos_ids[i] = static_cast<int>(i);
    Var x = t.add(t.gather_rows(vars.enc.tok_emb, input_ids),
                  t.gather_rows(vars.dec.pos_emb, pos_ids));
    const Mat mask = causal_mask(k);
    for (const auto& b : vars.dec.blocks) {
        Var n1 = t.layer_norm(x, b.ln1_g, b.ln1_b);
        x = t.add(x, attention(t, n1, n1, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                               params.cfg.heads, &mask));
        Var nx = t.layer_norm(x, b.lnx_g, b.lnx_b);
        x = t.add(x, attention(t, nx, context, b.xwq, b.xbq, b.xwk, b.xbk, b.xwv, b.xbv, b.xwo,
                               b.xbo, params.cfg.heads, nullptr));
        Var n2 = t.layer_norm(x, b.ln2_g, b.ln2_b);
        x = t.add(x, decoder_mlp(t, n2, b));
    }
    x = t.layer_norm(x, vars.dec.final_ln_g, vars.dec.final_ln_b);
    // logits tied to the token embedding table
    return t.matmul_nt(x, vars.enc.tok_emb);
}

}  // namespace

Var reader_loss_on_tape(Tape& tape, const ReaderVars& vars, const ReaderParams& params,
                        const FusionBatch& fusion, const std::vector<int>& target_ids) {
    KIVQA_CHECK(!target_ids.empty(), "reader loss: empty target");
    KIVQA_CHECK(static_cast<int>(target_ids.size()) <= params.cfg.max_output_tokens,
                "reader loss: target of ", target_ids.size(), " tokens exceeds the cap of ",
                params.cfg.max_output_tokens);
    std::vector<int> input_ids;
    input_ids.push_back(Special::kBos);
    input_ids.insert(input_ids.end(), target_ids.begin(), target_ids.end() - 1);
    Var logits = decoder_logits(tape, vars, params, fusion.context, input_ids);
    return tape.cross_entropy_rows(logits, target_ids);
}

double reader_loss(ReaderParams& params, const std::vector<TripletInput>& inputs,
                   const std::vector<int>& target_ids) {
    Tape tape;
    ReaderVars vars = register_reader(tape, params, false);
    FusionBatch fusion = fuse_encode(tape, vars, params, inputs);
    Var loss = reader_loss_on_tape(tape, vars, params, fusion, target_ids);
    return tape.val(loss).at(0, 0);
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

namespace {

std::vector<double> log_softmax_row(const double* logits, int n) {
    std::vector<double> out(n);
    double m = logits[0];
    for (int i = 1; i < n; ++i) m = std::max(m, logits[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(logits[i] - m);
    const double lz = std::log(z) + m;
    for (int i = 0; i < n; ++i) out[i] = logits[i] - lz;
    return out;
}

struct Beam {
    std::vector<int> ids;
    double logp = 0.0;
    bool done = false;

    double normalized() const {
        return ids.empty() ? logp : logp / static_cast<double>(ids.size());
    }
};

}  // namespace

ReaderOutput generate(const ReaderParams& params, const std::vector<TripletInput>& inputs,
                      int beam_width) {
    const int width = beam_width > 0 ? beam_width : params.cfg.beam;
    const int cap = params.cfg.max_output_tokens;

    Tape tape;
    ReaderVars vars = register_reader(tape, const_cast<ReaderParams&>(params), false);
    FusionBatch fusion = fuse_encode(tape, vars, params, inputs);

    auto last_row_logprobs = [&](const std::vector<int>& prefix) {
        std::vector<int> input_ids;
        input_ids.push_back(Special::kBos);
        input_ids.insert(input_ids.end(), prefix.begin(), prefix.end());
        Var logits = decoder_logits(tape, vars, params, fusion.context, input_ids);
        const Mat& lv = tape.val(logits);
        return log_softmax_row(lv.row(lv.rows - 1), lv.cols);
    };

    std::vector<Beam> live{Beam{}};
    std::vector<Beam> done;
    for (int step = 0; step < cap && !live.empty(); ++step) {
        struct Cand {
            double logp;
            int beam;
            int token;
        };
        std::vector<Cand> cands;
        for (std::size_t b = 0; b < live.size(); ++b) {
            const auto lp = last_row_logprobs(live[b].ids);
            // per-beam top `width` candidates are enough for a global top cut
            std::vector<int> toks(lp.size());
            for (std::size_t i = 0; i < lp.size(); ++i) toks[i] = static_cast<int>(i);
            const std::size_t keep = std::min<std::size_t>(width, toks.size());
            std::partial_sort(toks.begin(), toks.begin() + keep, toks.end(), [&](int a, int c) {
                if (lp[a] != lp[c]) return lp[a] > lp[c];
                return a < c;
            });
            for (std::size_t i = 0; i < keep; ++i)
                cands.push_back({live[b].logp + lp[toks[i]], static_cast<int>(b), toks[i]});
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            if (a.token != b.token) return a.token < b.token;
            return a.beam < b.beam;
        });
        std::vector<Beam> next;
        int taken = 0;
        for (const Cand& c : cands) {
            if (taken >= width) break;
            ++taken;
            Beam nb = live[c.beam];
            nb.ids.push_back(c.token);
            nb.logp = c.logp;
            if (c.token == Special::kEos) {
                nb.done = true;
                done.push_back(std::move(nb));
            } else {
                next.push_back(std::move(nb));
            }
        }
        live = std::move(next);
    }
    for (auto& b : live) done.push_back(std::move(b));  // cap reached
    KIVQA_CHECK(!done.empty(), "generate: no hypotheses produced");
    const Beam* best = &done[0];
    for (const auto& b : done) {
        if (b.normalized() > best->normalized() ||
            (b.normalized() == best->normalized() && b.ids < best->ids))
            best = &b;
    }
    ReaderOutput out;
    out.token_ids = best->ids;
    if (!out.token_ids.empty() && out.token_ids.back() == Special::kEos) out.token_ids.pop_back();
    out.answer = params.vocab.decode_words(out.token_ids);
    out.log_prob = best->logp;
    out.score = best->normalized();
    return out;
}

std::vector<double> first_token_logits(const ReaderParams& params,
                                       const std::vector<TripletInput>& inputs) {
    Tape tape;
    ReaderVars vars = register_reader(tape, const_cast<ReaderParams&>(params), false);
    FusionBatch fusion = fuse_encode(tape, vars, params, inputs);
    Var logits = decoder_logits(tape, vars, params, fusion.context, {Special::kBos});
    const Mat& lv = tape.val(logits);
    return std::vector<double>(lv.row(0), lv.row(0) + lv.cols);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

std::string training_answer(const QueryRecord& record) {
    KIVQA_CHECK(!record.answers.empty(), "training_answer: record ", record.query_id,
                " has no answers");
    std::map<std::string, int> counts;
    for (const auto& a : record.answers) ++counts[a];
    const std::string* best = nullptr;
    int best_count = 0;
    for (const auto& [ans, c] : counts) {
        if (c > best_count) {  // map order makes ties lexicographic
            best = &ans;
            best_count = c;
        }
    }
    return *best;
}

std::vector<int> answer_target_ids(const std::string& answer, const Vocab& vocab,
                                   int max_output_tokens) {
    std::vector<int> ids = vocab.encode(answer);
    if (static_cast<int>(ids.size()) > max_output_tokens - 1) ids.resize(max_output_tokens - 1);
    ids.push_back(Special::kEos);
    return ids;
}

namespace {

std::vector<std::string> support_texts(const QueryRecord& record,
                                       const std::map<std::string, std::vector<std::string>>& support,
                                       const PassageStore& passages) {
    std::vector<std::string> texts;
    auto it = support.find(record.query_id);
    if (it == support.end()) return texts;
    texts.reserve(it->second.size());
    for (const auto& pid : it->second) texts.push_back(passages.by_id(pid).text);
    return texts;
}

}  // namespace

double reader_exact_match(const ReaderParams& params, const std::vector<QueryRecord>& records,
                          const std::map<std::string, std::vector<std::string>>& support,
                          const PassageStore& passages, const VisualStore& visuals) {
    KIVQA_CHECK(!records.empty(), "reader_exact_match: empty record set");
    std::vector<AnswerJudgment> judgments;
    judgments.reserve(records.size());
    for (const auto& r : records) {
        const auto inputs = assemble_fusion_inputs(r, visuals, support_texts(r, support, passages),
                                                   params.vocab, params.cfg);
        judgments.push_back({generate(params, inputs).answer, r.answers});
    }
    return exact_match(judgments);
}

ReaderTrainResult train_reader(ReaderParams params, const std::vector<QueryRecord>& train_records,
                               const std::vector<QueryRecord>& val_records,
                               const std::map<std::string, std::vector<std::string>>& support,
                               const PassageStore& passages, const VisualStore& visuals,
                               const ReaderTrainConfig& cfg, TrainLog* log) {
    KIVQA_CHECK(!train_records.empty(), "train_reader: empty training split");

    std::vector<Mat*> mats;
    visit_reader_tensors(params, [&](const char*, Mat& m) { mats.push_back(&m); });
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    Adam adam(mats, acfg);
    LinearSchedule schedule{cfg.warmup_steps, cfg.max_steps};

    std::vector<Mat> grad_accum;
    grad_accum.reserve(mats.size());
    for (Mat* m : mats) grad_accum.emplace_back(m->rows, m->cols);

    ReaderTrainResult result;
    result.params = params;
    result.best_val_em = -1.0;

    Rng order_rng(cfg.seed);
    std::vector<std::size_t> order(train_records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    std::size_t cursor = 0;

    auto next_example = [&]() -> const QueryRecord& {
        if (cursor == order.size()) {
            order_rng.shuffle(order);
            cursor = 0;
        }
        return train_records[order[cursor++]];
    };

    auto evaluate = [&](int step) {
        const double em = val_records.empty()
                              ? 0.0
                              : reader_exact_match(params, val_records, support, passages, visuals);
        if (log)
            log->line(cat("{\"phase\":\"reader\",\"step\":", step, ",\"val_em\":", em, "}"));
        if (em > result.best_val_em) {
            result.best_val_em = em;
            result.best_step = step;
            result.params = params;
        }
        return em;
    };

    for (int step = 0; step < cfg.max_steps; ++step) {
        for (auto& g : grad_accum) g.fill(0.0);
        double loss_sum = 0.0;
        for (int a = 0; a < cfg.accum_steps; ++a) {
            const QueryRecord& rec = next_example();
            const auto inputs = assemble_fusion_inputs(rec, visuals,
                                                       support_texts(rec, support, passages),
                                                       params.vocab, params.cfg);
            const auto target = answer_target_ids(training_answer(rec), params.vocab,
                                                  params.cfg.max_output_tokens);
            Tape tape;
            ReaderVars vars = register_reader(tape, params, true);
            FusionBatch fusion = fuse_encode(tape, vars, params, inputs);
            Var loss = reader_loss_on_tape(tape, vars, params, fusion, target);
            const double lv = tape.val(loss).at(0, 0);
            if (!std::isfinite(lv))
                throw NumericError(cat("reader training: non-finite loss at step ", step,
                                       " (query ", rec.query_id, ")"));
            loss_sum += lv;
            tape.backward(loss);
            std::vector<Var> var_list;
            for_each_tensor(vars.enc, true, false, [&](const char*, Var& v) { var_list.push_back(v); });
            for_each_decoder_tensor(vars.dec, [&](const char*, Var& v) { var_list.push_back(v); });
            for (std::size_t i = 0; i < var_list.size(); ++i) {
                const Mat& g = tape.grad(var_list[i]);
                kernels::axpy(g.size(), 1.0, g.data(), grad_accum[i].data());
            }
        }
        std::vector<Mat*> gptrs;
        for (auto& g : grad_accum) {
            kernels::scale(g.size(), 1.0 / cfg.accum_steps, g.data());
            gptrs.push_back(&g);
        }
        clip_global_norm(gptrs, cfg.grad_clip);
        std::vector<const Mat*> grads(gptrs.begin(), gptrs.end());
        adam.step(grads, schedule.factor(step));
        const double mean_loss = loss_sum / cfg.accum_steps;
        result.loss_trajectory.push_back(mean_loss);
        if (log)
            log->line(cat("{\"phase\":\"reader\",\"step\":", step, ",\"loss\":", mean_loss, "}"));

        if ((step + 1) % cfg.checkpoint_every == 0) {
            const double em = evaluate(step + 1);
            if (em >= 1.0) return result;  // validation is perfect; later steps cannot improve it
        }
    }
    evaluate(cfg.max_steps);
    return result;
}

}  // namespace kivqa
