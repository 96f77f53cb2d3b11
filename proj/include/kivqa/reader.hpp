// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "kivqa/encoder.hpp"
#include "kivqa/training.hpp"

namespace kivqa {

struct ReaderConfig {
    int width = 64;
    int heads = 4;
    int enc_blocks = 2;
    int dec_blocks = 2;
    int num_regions = 36;
    int feature_dim = 8;
    int max_text_tokens = 64;    // per-triplet text cap (420 / 64 presets)
    int max_output_tokens = 16;
    int beam = 2;
    int n_passages = 3;
    // documentation of how triplets are assembled; the marker tokens stand in
    // for the two literal prefixes
    std::string template_text = "question: {question} context: {passage}";

    int head_dim() const { return width / heads; }
    void validate() const;
};

template <typename T>
struct DecoderTensors {
    T pos_emb;  // (max_output_tokens + 1) x width, row 0 = start position
    struct Block {
        T ln1_g, ln1_b;                              // before causal self-attention
        T wq, bq, wk, bk, wv, bv, wo, bo;            // self-attention
        T lnx_g, lnx_b;                              // before cross-attention
        T xwq, xbq, xwk, xbk, xwv, xbv, xwo, xbo;    // cross-attention over fusion context
        T ln2_g, ln2_b;                              // before the feed-forward
        T w1, b1, w2, b2;
    };
    std::vector<Block> blocks;
    T final_ln_g, final_ln_b;
};

template <typename T, typename F>
void for_each_decoder_tensor(DecoderTensors<T>& t, F&& fn) {
    fn("dec.pos_emb", t.pos_emb);
    for (std::size_t b = 0; b < t.blocks.size(); ++b) {
        auto& blk = t.blocks[b];
        const std::string p = "dec.block" + std::to_string(b) + ".";
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
        fn((p + "lnx_g").c_str(), blk.lnx_g);
        fn((p + "lnx_b").c_str(), blk.lnx_b);
        fn((p + "xwq").c_str(), blk.xwq);
        fn((p + "xbq").c_str(), blk.xbq);
        fn((p + "xwk").c_str(), blk.xwk);
        fn((p + "xbk").c_str(), blk.xbk);
        fn((p + "xwv").c_str(), blk.xwv);
        fn((p + "xbv").c_str(), blk.xbv);
        fn((p + "xwo").c_str(), blk.xwo);
        fn((p + "xbo").c_str(), blk.xbo);
        fn((p + "ln2_g").c_str(), blk.ln2_g);
        fn((p + "ln2_b").c_str(), blk.ln2_b);
        fn((p + "w1").c_str(), blk.w1);
        fn((p + "b1").c_str(), blk.b1);
        fn((p + "w2").c_str(), blk.w2);
        fn((p + "b2").c_str(), blk.b2);
    }
    fn("dec.final_ln_g", t.final_ln_g);
    fn("dec.final_ln_b", t.final_ln_b);
}

// Encoder-decoder reader: each (question, image, passage) triplet is encoded
// independently by the multi-modal toy encoder; the decoder cross-attends
// over the concatenated states. Output logits tie to the token embedding.
struct ReaderParams {
    ReaderConfig cfg;
    Vocab vocab;
    EncoderTensors<Mat> enc;  // multi-modal, without the pooling projection
    DecoderTensors<Mat> dec;

    static ReaderParams init(const ReaderConfig& cfg, const Vocab& vocab, std::uint64_t seed);
    std::vector<std::pair<std::string, Mat*>> tensors();
    void save(const std::string& file) const;
    static ReaderParams load(const std::string& file);
};

// One triplet's model inputs.
struct TripletInput {
    TextSequence text;
    VisualInput visual;
};

// Builds the n triplet inputs: marker + question tokens + marker + passage
// tokens, capped at max_text_tokens (passage tail dropped first), each paired
// with the record's visual features. An empty passage list yields the single
// question-only pair.
std::vector<TripletInput> assemble_fusion_inputs(const QueryRecord& record,
                                                 const VisualStore& visuals,
                                                 const std::vector<std::string>& passage_texts,
                                                 const Vocab& vocab, const ReaderConfig& cfg);

// Per-triplet encoded states concatenated in passage order. lengths[i] is the
// number of context rows triplet i contributed (all rows are real positions;
// nothing is padded).
struct FusionBatch {
    autodiff::Var context;  // (sum lengths) x width
    std::vector<int> lengths;
    int total_length() const;
};

struct ReaderVars {
    EncoderVars enc;
    DecoderTensors<autodiff::Var> dec;
};

ReaderVars register_reader(autodiff::Tape& tape, ReaderParams& params, bool trainable);

FusionBatch fuse_encode(autodiff::Tape& tape, const ReaderVars& vars, const ReaderParams& params,
                        const std::vector<TripletInput>& inputs);

// Teacher-forced token-level cross-entropy summed over the target positions;
// target must be non-empty and is expected to end with the EOS id.
autodiff::Var reader_loss_on_tape(autodiff::Tape& tape, const ReaderVars& vars,
                                  const ReaderParams& params, const FusionBatch& fusion,
                                  const std::vector<int>& target_ids);

double reader_loss(ReaderParams& params, const std::vector<TripletInput>& inputs,
                   const std::vector<int>& target_ids);

struct ReaderOutput {
    std::vector<int> token_ids;  // without the EOS
    std::string answer;
    double log_prob = 0.0;    // unnormalized sequence log-probability
    double score = 0.0;       // length-normalized beam score
};

// Beam search (width cfg.beam unless overridden), length cap
// cfg.max_output_tokens, length-normalized final scores. beam_width 1 is
// greedy decoding.
ReaderOutput generate(const ReaderParams& params, const std::vector<TripletInput>& inputs,
                      int beam_width = -1);

// Logits for the first generated position; exposed for sensitivity checks.
std::vector<double> first_token_logits(const ReaderParams& params,
                                       const std::vector<TripletInput>& inputs);

// Training target: the most frequent answer string, ties broken
// lexicographically; tokenized and capped at max_output_tokens - 1, EOS
// appended.
std::string training_answer(const QueryRecord& record);
std::vector<int> answer_target_ids(const std::string& answer, const Vocab& vocab,
                                   int max_output_tokens);

struct ReaderTrainConfig {
    double lr = 5e-5;
    double weight_decay = 0.1;
    int accum_steps = 32;  // batch 1 with gradient accumulation
    int max_steps = 5000;  // optimizer steps
    int warmup_steps = 800;
    double grad_clip = 1.0;
    int checkpoint_every = 500;
    std::uint64_t seed = 7;
};

struct ReaderTrainResult {
    ReaderParams params;  // best checkpoint by validation exact match
    double best_val_em = 0.0;
    int best_step = 0;
    std::vector<double> loss_trajectory;  // per optimizer step (mean over accumulated examples)
};

// support maps query_id -> supporting passage ids (from a retrieval run or
// gold annotations); missing entries fall back to the question-only input.
ReaderTrainResult train_reader(ReaderParams params, const std::vector<QueryRecord>& train_records,
                               const std::vector<QueryRecord>& val_records,
                               const std::map<std::string, std::vector<std::string>>& support,
                               const PassageStore& passages, const VisualStore& visuals,
                               const ReaderTrainConfig& cfg, TrainLog* log);

// Generation + exact match over a record set; used for validation selection.
double reader_exact_match(const ReaderParams& params, const std::vector<QueryRecord>& records,
                          const std::map<std::string, std::vector<std::string>>& support,
                          const PassageStore& passages, const VisualStore& visuals);

}  // namespace kivqa
