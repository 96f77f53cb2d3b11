// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace kivqa {

// Flat, fully validated experiment configuration. Precedence: preset
// defaults < config file < command-line overrides.
struct ExperimentConfig {
    // reproducibility / runtime
    std::uint64_t seed = 7;
    std::string workdir = "work";
    std::string kernels = "auto";  // auto | scalar | avx2
    int threads = 1;

    // data paths; empty entries resolve to the workdir layout below
    std::string questions_train, questions_validation, questions_test;
    std::string passages_file, captions_file, features_file, objects_file;
    std::string negatives_train;  // mined-hard-negative sidecar

    // synthetic generation
    int gen_queries = 200;
    int gen_passages = 1000;
    int gen_vocab = 600;

    // encoders
    int d_t = 64;
    int d_mm = 64;
    int width = 64;
    int heads = 4;
    int blocks = 2;
    int num_regions = 36;
    int feature_dim = 8;
    int max_input_tokens = 400;

    // sparse baseline
    double bm25_k1 = 0.9;
    double bm25_b = 0.4;
    int hard_negatives_m = 5;

    // retriever training
    double retriever_lr = 1e-5;
    int retriever_batch = 16;
    int retriever_epochs = 2;
    double warmup_fraction = 0.1;
    double grad_clip = 1.0;

    // iterative distillation
    int distill_max_rounds = 2;
    int distill_patience = 2;
    double distill_temperature = 1.0;
    double distill_mixed_weight = 0.0;
    int distill_evals_per_round = 4;

    // retrieval
    int retrieval_k = 100;

    // reader
    int reader_n_passages = 32;
    int reader_max_text_tokens = 420;
    int reader_max_output_tokens = 16;
    int reader_beam = 2;
    double reader_lr = 5e-5;
    double reader_weight_decay = 0.1;
    int reader_accum_steps = 32;
    int reader_train_steps = 5000;
    int reader_warmup_steps = 800;
    int reader_checkpoint_every = 500;
    std::string reader_template = "question: {question} context: {passage}";

    // --- lifecycle ---
    static ExperimentConfig preset(const std::string& name);  // toy | okvqa-paper | fvqa-paper
    static std::vector<std::string> preset_names();

    // merge a flat JSON object; unknown keys are rejected
    void apply_file(const std::string& path);
    void apply_override(const std::string& key, const std::string& value);

    void validate() const;

    // canonical flat dump (sorted keys) and its hash
    std::string dump() const;
    std::uint64_t config_hash() const;

    // resolved artifact paths
    std::string corpus_dir() const { return workdir + "/corpus"; }
    std::string questions_path(const std::string& split) const;
    std::string passages_path() const;
    std::string captions_path() const;
    std::string features_path() const;
    std::string objects_path() const;
    std::string negatives_path() const;
    std::string checkpoint_path(const std::string& name) const {
        return workdir + "/checkpoints/" + name + ".ckpt";
    }
    std::string log_path(const std::string& name) const { return workdir + "/logs/" + name + ".jsonl"; }
    std::string index_path() const { return workdir + "/index/flat.idx"; }
    std::string run_path(const std::string& split) const { return workdir + "/runs/" + split + ".trec"; }
    std::string answers_path(const std::string& split) const {
        return workdir + "/answers/" + split + ".jsonl";
    }
    std::string report_path(const std::string& name) const { return workdir + "/reports/" + name; }
    std::string manifest_path(const std::string& command) const {
        return workdir + "/manifests/" + command + ".json";
    }
};

}  // namespace kivqa
