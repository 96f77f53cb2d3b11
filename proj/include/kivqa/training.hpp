// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kivqa/encoder.hpp"
#include "kivqa/metrics.hpp"

namespace kivqa {

// --- candidate construction -------------------------------------------------

struct CandidateSet {
    int query_index = -1;  // position in the batch's record list
    std::string positive_id;
    std::vector<std::string> negative_ids;
    std::vector<double> scores;  // aligned with negative_ids when filled
};

// Expands per-query seeds with in-batch negatives: each query's negatives are
// its own hard negatives plus every other query's positive and hard
// negatives, deduplicated, with the query's own positive removed.
std::vector<CandidateSet> build_candidates(std::span<const CandidateSet> seeds);

// --- losses (reference forms; the tape versions are tested against these) ---

// -log( exp(pos) / (exp(pos) + sum exp(neg)) ), log-sum-exp stabilized.
double contrastive_loss(double pos_score, std::span<const double> neg_scores);

// KL(softmax(teacher) || softmax(student)), both lists aligned over
// P_neg + {P_pos}; temperature applied to both before the softmax.
double kd_loss(std::span<const double> teacher_scores, std::span<const double> student_scores,
               double temperature = 1.0);

// --- optimizer & schedule ----------------------------------------------------

struct AdamConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW) when nonzero
};

class Adam {
  public:
    Adam(std::vector<Mat*> params, const AdamConfig& cfg);
    // lr_factor scales cfg.lr (warm-up/decay schedule); grads align with params.
    void step(const std::vector<const Mat*>& grads, double lr_factor);
    int steps_taken() const { return t_; }

  private:
    std::vector<Mat*> params_;
    std::vector<Mat> m_, v_;
    AdamConfig cfg_;
    int t_ = 0;
};

// Scales gradients in place so their global L2 norm is at most max_norm;
// returns the pre-clip norm.
double clip_global_norm(const std::vector<Mat*>& grads, double max_norm);

// Linear warm-up to 1, then linear decay to 0 at total_steps.
struct LinearSchedule {
    int warmup_steps = 0;
    int total_steps = 1;
    double factor(int step) const;  // step counts from 0
};

// --- training ---------------------------------------------------------------

struct RetrievalStores {
    const PassageStore* passages = nullptr;
    const CaptionStore* captions = nullptr;  // T path queries
    const VisualStore* visuals = nullptr;    // MM path queries
};

// JSONL metrics sink; pass null to discard.
class TrainLog {
  public:
    explicit TrainLog(const std::string& path);
    ~TrainLog();
    void line(const std::string& json_text);

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct RetrieverTrainConfig {
    int batch_size = 16;
    int epochs = 2;
    double lr = 1e-5;
    double warmup_fraction = 0.1;
    double grad_clip = 1.0;
    std::uint64_t seed = 7;
};

// Query-side inputs for one path.
TextSequence query_text_input(const QueryRecord& record, EncodingPath path,
                              const CaptionStore* captions, const Vocab& vocab,
                              int max_input_tokens);

// Ranks the whole collection for each query by the summed dot product over
// the given paths (one path = single-encoder retrieval, two = dual).
RetrievalJudgedRun evaluate_retrieval(const std::vector<const EncoderParams*>& paths,
                                      const std::vector<QueryRecord>& queries,
                                      const RetrievalStores& stores, int k);

double validation_mrr5(const std::vector<const EncoderParams*>& paths,
                       const std::vector<QueryRecord>& queries, const RetrievalStores& stores);

struct IsolatedResult {
    EncoderParams params;                    // best-validation checkpoint
    std::vector<double> val_mrr5_per_epoch;
    double best_val_mrr5 = 0.0;
    std::vector<double> loss_trajectory;     // per-batch training losses
};

// Contrastive training (in-batch + hard negatives). `paths` holds one encoder
// for isolated training or both for the joint dual-score mode; all listed
// encoders are optimized against the summed score.
IsolatedResult train_contrastive(std::vector<EncoderParams*> paths,
                                 const std::vector<QueryRecord>& train_records,
                                 const std::vector<QueryRecord>& val_records,
                                 const RetrievalStores& stores, const RetrieverTrainConfig& cfg,
                                 TrainLog* log);

IsolatedResult train_isolated(EncoderParams& params, const std::vector<QueryRecord>& train_records,
                              const std::vector<QueryRecord>& val_records,
                              const RetrievalStores& stores, const RetrieverTrainConfig& cfg,
                              TrainLog* log);

// --- iterative distillation ---------------------------------------------

struct DistillConfig {
    int max_rounds = 2;
    int patience = 2;               // rounds without improvement before stopping
    double temperature = 1.0;
    double mixed_contrastive_weight = 0.0;  // optional Eq.-3 term added to the KD loss
    int evals_per_round = 4;
    double divergence_floor = 0.5;  // abort a round if val drops below this fraction of its start
};

struct DistillationState {
    int round = 0;  // rounds completed
    EncodingPath teacher_path = EncodingPath::T;
    EncodingPath student_path = EncodingPath::MM;
    struct RoundRecord {
        int round;
        EncodingPath teacher;
        double val_mrr5_T;
        double val_mrr5_MM;
        bool aborted;  // divergence guard fired
    };
    std::vector<RoundRecord> history;
    EncoderParams best_T, best_MM;
    double best_val_T = 0.0, best_val_MM = 0.0;
};

DistillationState run_iterative_distillation(const EncoderParams& ckpt_T,
                                             const EncoderParams& ckpt_MM,
                                             const std::vector<QueryRecord>& train_records,
                                             const std::vector<QueryRecord>& val_records,
                                             const RetrievalStores& stores,
                                             const RetrieverTrainConfig& train_cfg,
                                             const DistillConfig& distill_cfg, TrainLog* log);

}  // namespace kivqa
