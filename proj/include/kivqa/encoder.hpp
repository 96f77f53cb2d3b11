// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "kivqa/corpus.hpp"
#include "kivqa/tape.hpp"
#include "kivqa/tokenizer.hpp"

namespace kivqa {

enum class EncodingPath { T, MM };
std::string path_name(EncodingPath p);

// Token ids ready for an encoder; builders enforce the length cap, encoding
// never truncates.
struct TextSequence {
    std::vector<int> ids;
    int length() const { return static_cast<int>(ids.size()); }
};

struct EncoderOutput {
    std::vector<double> embedding;
    EncodingPath path;
    int dim() const { return static_cast<int>(embedding.size()); }
};

// Dot product score (Eq. of the bi-encoder ranking function). Paths and
// dimensions must match.
double score(const EncoderOutput& q, const EncoderOutput& p);

struct EncoderConfig {
    int width = 64;
    int heads = 4;
    int blocks = 2;
    int out_dim = 64;
    int max_input_tokens = 400;
    int num_regions = 36;
    int feature_dim = 8;

    int head_dim() const { return width / heads; }
    void validate() const;
};

// All tensors of the toy encoder, templated so the same enumeration serves
// the weights (Mat) and their tape registrations (Var).
template <typename T>
struct EncoderTensors {
    T tok_emb;         // vocab x width
    T pos_emb;         // (1 + max_input_tokens) x width, row 0 = sentinel
    T region_pos_emb;  // num_regions x width (MM only)
    T vis_proj_w;      // (feature_dim + 4) x width (MM only)
    T vis_proj_b;      // 1 x width (MM only)
    struct Block {
        T ln1_g, ln1_b;
        T wq, bq, wk, bk, wv, bv, wo, bo;
        T ln2_g, ln2_b;
        T w1, b1, w2, b2;
    };
    std::vector<Block> blocks;
    T final_ln_g, final_ln_b;
    T pool_w, pool_b;  // width x out_dim, 1 x out_dim
};

// Visits every live tensor in a fixed order; `multimodal` gates the visual
// projection tensors and `include_pool` the pooling projection (the reader's
// encoder returns full sequence states and has no pool). fn(name, element&).
template <typename T, typename F>
void for_each_tensor(EncoderTensors<T>& t, bool multimodal, bool include_pool, F&& fn) {
    fn("tok_emb", t.tok_emb);
    fn("pos_emb", t.pos_emb);
    if (multimodal) {
        fn("region_pos_emb", t.region_pos_emb);
        fn("vis_proj_w", t.vis_proj_w);
        fn("vis_proj_b", t.vis_proj_b);
    }
    for (std::size_t b = 0; b < t.blocks.size(); ++b) {
        auto& blk = t.blocks[b];
        const std::string p = "block" + std::to_string(b) + ".";
        fn((p + "ln1_g").c_str(), blk.ln1_g);
        fn((p + "ln1_b").c_str(), blk.ln1_b);
        fn((p + "wq").c_str(), blk.wq);
        fn((p + "bq").c_str(), blk.bq);
        fn((p + "wk").c_str(), blk.wk);
        fn((p + "bk").c_str(), blk.bk);
        fn((p + "wv").c_str(), blk.wv);
        fn((p + "bv").c_str(), blk.bv);
        fn((p + "wo").c_str(), blk.wo);
        fn((p + "bo").c_str(), blk.bo);
        fn((p + "ln2_g").c_str(), blk.ln2_g);
        fn((p + "ln2_b").c_str(), blk.ln2_b);
        fn((p + "w1").c_str(), blk.w1);
        fn((p + "b1").c_str(), blk.b1);
        fn((p + "w2").c_str(), blk.w2);
        fn((p + "b2").c_str(), blk.b2);
    }
    fn("final_ln_g", t.final_ln_g);
    fn("final_ln_b", t.final_ln_b);
    if (include_pool) {
        fn("pool_w", t.pool_w);
        fn("pool_b", t.pool_b);
    }
}

template <typename T, typename F>
void for_each_tensor(EncoderTensors<T>& t, bool multimodal, F&& fn) {
    for_each_tensor(t, multimodal, true, std::forward<F>(fn));
}

// One parameter object serves both the query and the passage side of its
// path; that sharing is what makes the bi-encoder symmetric.
struct EncoderParams {
    EncodingPath path = EncodingPath::T;
    EncoderConfig cfg;
    Vocab vocab;
    EncoderTensors<Mat> w;

    static EncoderParams init(EncodingPath path, const EncoderConfig& cfg, const Vocab& vocab,
                              std::uint64_t seed);

    bool multimodal() const { return path == EncodingPath::MM; }
    std::vector<std::pair<std::string, Mat*>> tensors();
    std::vector<std::pair<std::string, const Mat*>> tensors() const;

    void save(const std::string& file) const;
    static EncoderParams load(const std::string& file);
};

using EncoderVars = EncoderTensors<autodiff::Var>;

// Puts every tensor on the tape; trainable decides whether gradients flow.
EncoderVars register_encoder(autodiff::Tape& tape, EncoderParams& params, bool trainable);

// Full sequence states (sentinel [+ regions] + text rows) after the final
// layer norm; retrieval encoders pool row 0, the reader consumes every row.
autodiff::Var encode_states_on_tape(autodiff::Tape& tape, const EncoderVars& vars,
                                    const EncoderConfig& cfg, const Vocab& vocab, bool multimodal,
                                    const TextSequence& seq, const VisualInput* visual);

// Forward pass on an existing tape; returns the pooled 1 x out_dim node.
// visual must be null exactly for the T path.
autodiff::Var encode_on_tape(autodiff::Tape& tape, const EncoderVars& vars,
                             const EncoderParams& params, const TextSequence& seq,
                             const VisualInput* visual);

// Inference entry points (fresh tape, no gradients).
EncoderOutput encode_text_path(const EncoderParams& params, const TextSequence& seq);
EncoderOutput encode_multimodal_path(const EncoderParams& params, const TextSequence& seq,
                                     const VisualInput& visual);

// question [SEP] caption, capped at cfg.max_input_tokens with the caption
// tail dropped first.
TextSequence build_unimodal_query_input(const QueryRecord& record, const CaptionStore& captions,
                                        const Vocab& vocab, int max_input_tokens);

// Passage-side inputs for the multi-modal path: passage tokens plus the
// masked visual bundle (all-zero features, whole-image boxes).
std::pair<TextSequence, VisualInput> pemir_inputs(const Passage& passage, const Vocab& vocab,
                                                  const EncoderConfig& cfg);

TextSequence truncate_to(std::vector<int> ids, int max_tokens);

// Adapter seam: anything that maps (text[, visual]) to a fixed-dim vector
// can back retrieval and indexing.
class Embedder {
  public:
    virtual ~Embedder() = default;
    virtual EncodingPath path() const = 0;
    virtual int dim() const = 0;
    virtual std::vector<double> embed(const TextSequence& seq, const VisualInput* visual) const = 0;
};

class ToyEmbedder final : public Embedder {
  public:
    explicit ToyEmbedder(const EncoderParams& params) : params_(&params) {}
    EncodingPath path() const override { return params_->path; }
    int dim() const override { return params_->cfg.out_dim; }
    std::vector<double> embed(const TextSequence& seq, const VisualInput* visual) const override;
    const EncoderParams& params() const { return *params_; }

  private:
    const EncoderParams* params_;
};

// Multi-head attention over tape nodes. queries_from attends to keys_from
// (pass the same node for self-attention). additive_mask, when present, is
// (Lq x Lkv) and is added to the raw scores before the softmax.
autodiff::Var attention(autodiff::Tape& t, autodiff::Var queries_from, autodiff::Var keys_from,
                        const autodiff::Var& wq, const autodiff::Var& bq, const autodiff::Var& wk,
                        const autodiff::Var& bk, const autodiff::Var& wv, const autodiff::Var& bv,
                        const autodiff::Var& wo, const autodiff::Var& bo, int heads,
                        const Mat* additive_mask);

}  // namespace kivqa
