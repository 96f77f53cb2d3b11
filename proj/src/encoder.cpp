// SPDX-License-Identifier: Apache-2.0

#include "kivqa/encoder.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "kivqa/binio.hpp"
#include "kivqa/kernels.hpp"

namespace kivqa {

using autodiff::Tape;
using autodiff::Var;

std::string path_name(EncodingPath p) { return p == EncodingPath::T ? "T" : "MM"; }

double score(const EncoderOutput& q, const EncoderOutput& p) {
    KIVQA_CHECK(q.path == p.path, "score: path mismatch (", path_name(q.path), " vs ",
                path_name(p.path), ")");
    KIVQA_CHECK(q.dim() == p.dim(), "score: dimension mismatch (", q.dim(), " vs ", p.dim(), ")");
    return kernels::dot(q.embedding.data(), p.embedding.data(), q.embedding.size());
}

void EncoderConfig::validate() const {
    if (width <= 0 || heads <= 0 || width % heads != 0)
        throw ConfigError(cat("encoder width ", width, " must be a positive multiple of heads ", heads));
    if (blocks <= 0 || out_dim <= 0 || max_input_tokens <= 0 || num_regions <= 0 || feature_dim <= 0)
        throw ConfigError("encoder config: all sizes must be positive");
}

EncoderParams EncoderParams::init(EncodingPath path, const EncoderConfig& cfg, const Vocab& vocab,
                                  std::uint64_t seed) {
    cfg.validate();
    EncoderParams p;
    p.path = path;
    p.cfg = cfg;
    p.vocab = vocab;
    const int w = cfg.width;
    p.w.tok_emb = Mat(vocab.size(), w);
    p.w.pos_emb = Mat(cfg.max_input_tokens + 1, w);
    if (path == EncodingPath::MM) {
        p.w.region_pos_emb = Mat(cfg.num_regions, w);
        p.w.vis_proj_w = Mat(cfg.feature_dim + 4, w);
        p.w.vis_proj_b = Mat(1, w);
    }
    p.w.blocks.resize(cfg.blocks);
    for (auto& b : p.w.blocks) {
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
    p.w.final_ln_g = Mat(1, w);
    p.w.final_ln_b = Mat(1, w);
    p.w.pool_w = Mat(w, cfg.out_dim);
    p.w.pool_b = Mat(1, cfg.out_dim);

    Rng rng(seed);
    for_each_tensor(p.w, p.multimodal(), [&](const char* name, Mat& m) {
        const std::string n(name);
        const bool is_gain = n.size() >= 5 && n.substr(n.size() - 5) == "ln1_g";
        const bool gain2 = n.size() >= 5 && (n.substr(n.size() - 5) == "ln2_g");
        const bool gainf = n == "final_ln_g";
        const bool is_bias = m.rows == 1 && !(is_gain || gain2 || gainf);
        if (is_gain || gain2 || gainf) {
            m.fill(1.0);
        } else if (is_bias) {
            m.fill(0.0);
        } else {
            fill_gaussian(m, rng, 0.02);
        }
    });
    return p;
}

std::vector<std::pair<std::string, Mat*>> EncoderParams::tensors() {
    std::vector<std::pair<std::string, Mat*>> out;
    for_each_tensor(w, multimodal(), [&](const char* name, Mat& m) { out.emplace_back(name, &m); });
    return out;
}

std::vector<std::pair<std::string, const Mat*>> EncoderParams::tensors() const {
    std::vector<std::pair<std::string, const Mat*>> out;
    for_each_tensor(const_cast<EncoderTensors<Mat>&>(w), multimodal(),
                    [&](const char* name, Mat& m) { out.emplace_back(name, &m); });
    return out;
}

namespace {
constexpr char kCheckpointMagic[4] = {'K', 'V', 'C', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void EncoderParams::save(const std::string& file) const {
    std::filesystem::create_directories(std::filesystem::path(file).parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError(cat("cannot write checkpoint ", file));
    binio::put_bytes(out, kCheckpointMagic, 4);
    binio::put_u32(out, kCheckpointVersion);
    binio::put_string(out, path_name(path));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.width));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.heads));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.blocks));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.out_dim));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.max_input_tokens));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.num_regions));
    binio::put_u32(out, static_cast<std::uint32_t>(cfg.feature_dim));
    binio::put_u64(out, static_cast<std::uint64_t>(vocab.size()));
    for (const auto& tok : vocab.tokens()) binio::put_string(out, tok);
    const auto ts = tensors();
    binio::put_u32(out, static_cast<std::uint32_t>(ts.size()));
    for (const auto& [name, mat] : ts) {
        binio::put_string(out, name);
        binio::put_mat(out, *mat);
    }
    if (!out) throw DataError(cat("write failure on checkpoint ", file));
}

EncoderParams EncoderParams::load(const std::string& file) {
    binio::Reader rd(file);
    rd.expect_magic(kCheckpointMagic);
    const auto version = rd.u32("version");
    if (version != kCheckpointVersion)
        throw DataError(cat(file, ": unsupported checkpoint version ", version));
    const std::string tag = rd.str("path tag");
    EncoderConfig cfg;
    cfg.width = static_cast<int>(rd.u32("width"));
    cfg.heads = static_cast<int>(rd.u32("heads"));
    cfg.blocks = static_cast<int>(rd.u32("blocks"));
    cfg.out_dim = static_cast<int>(rd.u32("out_dim"));
    cfg.max_input_tokens = static_cast<int>(rd.u32("max_input_tokens"));
    cfg.num_regions = static_cast<int>(rd.u32("num_regions"));
    cfg.feature_dim = static_cast<int>(rd.u32("feature_dim"));
    const auto vocab_count = rd.u64("vocab size");
    std::vector<std::string> toks;
    toks.reserve(vocab_count);
    for (std::uint64_t i = 0; i < vocab_count; ++i) toks.push_back(rd.str("vocab token"));

    EncodingPath path;
    if (tag == "T") path = EncodingPath::T;
    else if (tag == "MM") path = EncodingPath::MM;
    else throw DataError(cat(file, ": unknown encoder path tag '", tag, "'"));

    EncoderParams p = EncoderParams::init(path, cfg, Vocab::from_tokens(std::move(toks)), 0);
    auto ts = p.tensors();
    const auto count = rd.u32("tensor count");
    if (count != ts.size())
        throw DataError(cat(file, ": checkpoint has ", count, " tensors, expected ", ts.size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = rd.str("tensor name");
        Mat m = rd.mat(name.c_str());
        if (name != ts[i].first)
            throw DataError(cat(file, ": tensor ", i, " is '", name, "', expected '", ts[i].first, "'"));
        if (!m.same_shape(*ts[i].second))
            throw DataError(cat(file, ": tensor ", name, " shape ", m.rows, "x", m.cols,
                                " does not match config ", ts[i].second->rows, "x", ts[i].second->cols));
        *ts[i].second = std::move(m);
    }
    return p;
}

EncoderVars register_encoder(Tape& tape, EncoderParams& params, bool trainable) {
    EncoderVars vars;
    vars.blocks.resize(params.w.blocks.size());
    auto mats = params.tensors();
    std::vector<Var*> slots;
    for_each_tensor(vars, params.multimodal(), [&](const char*, Var& v) { slots.push_back(&v); });
    KIVQA_CHECK(slots.size() == mats.size(), "register_encoder: tensor enumeration drift");
    for (std::size_t i = 0; i < mats.size(); ++i)
        *slots[i] = tape.input(*mats[i].second, trainable);
    return vars;
}

Var attention(Tape& t, Var queries_from, Var keys_from, const Var& wq, const Var& bq,
              const Var& wk, const Var& bk, const Var& wv, const Var& bv, const Var& wo,
              const Var& bo, int heads, const Mat* additive_mask) {
    const int width = t.val(wq).cols;
    const int dh = width / heads;
    Var q = t.add_rowvec(t.matmul(queries_from, wq), bq);
    Var k = t.add_rowvec(t.matmul(keys_from, wk), bk);
    Var v = t.add_rowvec(t.matmul(keys_from, wv), bv);
    std::vector<Var> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Var qh = t.cols(q, h * dh, (h + 1) * dh);
        Var kh = t.cols(k, h * dh, (h + 1) * dh);
        Var vh = t.cols(v, h * dh, (h + 1) * dh);
        Var s = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (additive_mask) s = t.add_const(s, *additive_mask);
        Var a = t.softmax_rows(s);
        head_outs.push_back(t.matmul(a, vh));
    }
    Var merged = t.concat_cols(head_outs);
    return t.add_rowvec(t.matmul(merged, wo), bo);
}

namespace {

Var mlp(Tape& t, Var x, const EncoderVars::Block& b) {
    Var h = t.gelu(t.add_rowvec(t.matmul(x, b.w1), b.b1));
    return t.add_rowvec(t.matmul(h, b.w2), b.b2);
}

Var encoder_block(Tape& t, Var x, const EncoderVars::Block& b, int heads) {
    Var n1 = t.layer_norm(x, b.ln1_g, b.ln1_b);
    Var h = t.add(x, attention(t, n1, n1, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, heads,
                               nullptr));
    Var n2 = t.layer_norm(h, b.ln2_g, b.ln2_b);
    return t.add(h, mlp(t, n2, b));
}

}  // namespace

Var encode_states_on_tape(Tape& tape, const EncoderVars& vars, const EncoderConfig& cfg,
                          const Vocab& vocab, bool multimodal, const TextSequence& seq,
                          const VisualInput* visual) {
    KIVQA_CHECK(seq.length() <= cfg.max_input_tokens, "encode: sequence of ", seq.length(),
                " tokens exceeds the ", cfg.max_input_tokens, "-token cap; caller must truncate");
    if (multimodal) {
        KIVQA_CHECK(visual != nullptr, "encode: MM path needs a visual input");
        KIVQA_CHECK(visual->num_regions() == cfg.num_regions, "encode: visual input has ",
                    visual->num_regions(), " regions, configured ", cfg.num_regions);
        KIVQA_CHECK(visual->feature_dim() == cfg.feature_dim, "encode: visual feature dim ",
                    visual->feature_dim(), ", configured ", cfg.feature_dim);
    } else {
        KIVQA_CHECK(visual == nullptr, "encode: T path takes no visual input");
    }

    // sentinel token first; its final state is the pooled representation
    std::vector<int> tok_ids(1, Special::kCls);
    tok_ids.insert(tok_ids.end(), seq.ids.begin(), seq.ids.end());
    for (int id : tok_ids)
        KIVQA_CHECK(id >= 0 && id < vocab.size(), "encode: token id ", id, " outside vocab");
    Var tok_rows = tape.gather_rows(vars.tok_emb, tok_ids);
    std::vector<int> pos_ids(tok_ids.size());
    for (std::size_t i = 0; i < pos_ids.size(); ++i) pos_ids[i] = static_cast<int>(i);
    Var text = tape.add(tok_rows, tape.gather_rows(vars.pos_emb, pos_ids));

    Var x = text;
    if (multimodal) {
        // project [features | boxes] rows into the model width and prepend
        Mat packed(cfg.num_regions, cfg.feature_dim + 4);
        for (int r = 0; r < cfg.num_regions; ++r) {
            for (int c = 0; c < cfg.feature_dim; ++c) packed.at(r, c) = visual->features.at(r, c);
            for (int c = 0; c < 4; ++c) packed.at(r, cfg.feature_dim + c) = visual->boxes.at(r, c);
        }
        Var regions = tape.add_rowvec(tape.matmul(tape.constant(std::move(packed)), vars.vis_proj_w),
                                      vars.vis_proj_b);
        regions = tape.add(regions, vars.region_pos_emb);
        Var cls = tape.rows(text, 0, 1);
        if (seq.length() > 0) {
            std::array<Var, 3> parts{cls, regions, tape.rows(text, 1, 1 + seq.length())};
            x = tape.concat_rows(parts);
        } else {
            std::array<Var, 2> parts{cls, regions};
            x = tape.concat_rows(parts);
        }
    }

    for (const auto& b : vars.blocks) x = encoder_block(tape, x, b, cfg.heads);
    return tape.layer_norm(x, vars.final_ln_g, vars.final_ln_b);
}

Var encode_on_tape(Tape& tape, const EncoderVars& vars, const EncoderParams& params,
                   const TextSequence& seq, const VisualInput* visual) {
    Var states = encode_states_on_tape(tape, vars, params.cfg, params.vocab, params.multimodal(),
                                       seq, visual);
    Var pooled = tape.rows(states, 0, 1);
    return tape.add_rowvec(tape.matmul(pooled, vars.pool_w), vars.pool_b);
}

namespace {
EncoderOutput run_inference(const EncoderParams& params, const TextSequence& seq,
                            const VisualInput* visual) {
    Tape tape;
    EncoderVars vars = register_encoder(tape, const_cast<EncoderParams&>(params), false);
    Var out = encode_on_tape(tape, vars, params, seq, visual);
    const Mat& m = tape.val(out);
    EncoderOutput o;
    o.path = params.path;
    o.embedding.assign(m.data(), m.data() + m.cols);
    return o;
}
}  // namespace

EncoderOutput encode_text_path(const EncoderParams& params, const TextSequence& seq) {
    KIVQA_CHECK(params.path == EncodingPath::T, "encode_text_path: params are for the MM path");
    return run_inference(params, seq, nullptr);
}

EncoderOutput encode_multimodal_path(const EncoderParams& params, const TextSequence& seq,
                                     const VisualInput& visual) {
    KIVQA_CHECK(params.path == EncodingPath::MM, "encode_multimodal_path: params are for the T path");
    return run_inference(params, seq, &visual);
}

std::vector<double> ToyEmbedder::embed(const TextSequence& seq, const VisualInput* visual) const {
    return run_inference(*params_, seq, visual).embedding;
}

TextSequence truncate_to(std::vector<int> ids, int max_tokens) {
    if (static_cast<int>(ids.size()) > max_tokens) ids.resize(max_tokens);
    return TextSequence{std::move(ids)};
}

TextSequence build_unimodal_query_input(const QueryRecord& record, const CaptionStore& captions,
                                        const Vocab& vocab, int max_input_tokens) {
    auto it = captions.find(record.image_id);
    if (it == captions.end())
        throw DataError(cat("no caption for image ", record.image_id, " (query ", record.query_id, ")"));
    std::vector<int> ids = vocab.encode(record.question);
    if (static_cast<int>(ids.size()) < max_input_tokens) {
        ids.push_back(Special::kSep);
        const std::vector<int> cap = vocab.encode(it->second);
        ids.insert(ids.end(), cap.begin(), cap.end());
    }
    return truncate_to(std::move(ids), max_input_tokens);
}

std::pair<TextSequence, VisualInput> pemir_inputs(const Passage& passage, const Vocab& vocab,
                                                  const EncoderConfig& cfg) {
    KIVQA_CHECK(!passage.text.empty(), "pemir_inputs: passage ", passage.passage_id, " has empty text");
    TextSequence seq = truncate_to(vocab.encode(passage.text), cfg.max_input_tokens);
    return {std::move(seq), masked_visual_input(cfg.num_regions, cfg.feature_dim)};
}

}  // namespace kivqa
