// SPDX-License-Identifier: Apache-2.0

#include "kivqa/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "kivqa/errors.hpp"
#include "kivqa/tokenizer.hpp"

namespace kivqa {

using nlohmann::json;

namespace {

struct KeySpec {
    enum Kind { kInt, kReal, kStr, kSeed } kind;
    int ExperimentConfig::*i = nullptr;
    double ExperimentConfig::*r = nullptr;
    std::string ExperimentConfig::*s = nullptr;
    std::uint64_t ExperimentConfig::*u = nullptr;
};

const std::map<std::string, KeySpec>& key_table() {
    static const std::map<std::string, KeySpec> table = [] {
        std::map<std::string, KeySpec> t;
        auto I = [&](const char* n, int ExperimentConfig::*m) { t[n] = {KeySpec::kInt, m, {}, {}, {}}; };
        auto R = [&](const char* n, double ExperimentConfig::*m) { t[n] = {KeySpec::kReal, {}, m, {}, {}}; };
        auto S = [&](const char* n, std::string ExperimentConfig::*m) { t[n] = {KeySpec::kStr, {}, {}, m, {}}; };
        t["seed"] = {KeySpec::kSeed, {}, {}, {}, &ExperimentConfig::seed};
        S("workdir", &ExperimentConfig::workdir);
        S("kernels", &ExperimentConfig::kernels);
        I("threads", &ExperimentConfig::threads);
        S("questions_train", &ExperimentConfig::questions_train);
        S("questions_validation", &ExperimentConfig::questions_validation);
        S("questions_test", &ExperimentConfig::questions_test);
        S("passages_file", &ExperimentConfig::passages_file);
        S("captions_file", &ExperimentConfig::captions_file);
        S("features_file", &ExperimentConfig::features_file);
        S("objects_file", &ExperimentConfig::objects_file);
        S("negatives_train", &ExperimentConfig::negatives_train);
        I("gen_queries", &ExperimentConfig::gen_queries);
        I("gen_passages", &ExperimentConfig::gen_passages);
        I("gen_vocab", &ExperimentConfig::gen_vocab);
        I("d_t", &ExperimentConfig::d_t);
        I("d_mm", &ExperimentConfig::d_mm);
        I("width", &ExperimentConfig::width);
        I("heads", &ExperimentConfig::heads);
        I("blocks", &ExperimentConfig::blocks);
        I("num_regions", &ExperimentConfig::num_regions);
        I("feature_dim", &ExperimentConfig::feature_dim);
        I("max_input_tokens", &ExperimentConfig::max_input_tokens);
        R("bm25_k1", &ExperimentConfig::bm25_k1);
        R("bm25_b", &ExperimentConfig::bm25_b);
        I("hard_negatives_m", &ExperimentConfig::hard_negatives_m);
        R("retriever_lr", &ExperimentConfig::retriever_lr);
        I("retriever_batch", &ExperimentConfig::retriever_batch);
        I("retriever_epochs", &ExperimentConfig::retriever_epochs);
        R("warmup_fraction", &ExperimentConfig::warmup_fraction);
        R("grad_clip", &ExperimentConfig::grad_clip);
        I("distill_max_rounds", &ExperimentConfig::distill_max_rounds);
        I("distill_patience", &ExperimentConfig::distill_patience);
        R("distill_temperature", &ExperimentConfig::distill_temperature);
        R("distill_mixed_weight", &ExperimentConfig::distill_mixed_weight);
        I("distill_evals_per_round", &ExperimentConfig::distill_evals_per_round);
        I("retrieval_k", &ExperimentConfig::retrieval_k);
        I("reader_n_passages", &ExperimentConfig::reader_n_passages);
        I("reader_max_text_tokens", &ExperimentConfig::reader_max_text_tokens);
        I("reader_max_output_tokens", &ExperimentConfig::reader_max_output_tokens);
        I("reader_beam", &ExperimentConfig::reader_beam);
        R("reader_lr", &ExperimentConfig::reader_lr);
        R("reader_weight_decay", &ExperimentConfig::reader_weight_decay);
        I("reader_accum_steps", &ExperimentConfig::reader_accum_steps);
        I("reader_train_steps", &ExperimentConfig::reader_train_steps);
        I("reader_warmup_steps", &ExperimentConfig::reader_warmup_steps);
        I("reader_checkpoint_every", &ExperimentConfig::reader_checkpoint_every);
        S("reader_template", &ExperimentConfig::reader_template);
        return t;
    }();
    return table;
}

void assign(ExperimentConfig& cfg, const std::string& key, const json& value) {
    auto it = key_table().find(key);
    if (it == key_table().end())
        throw ConfigError(cat("unknown configuration key '", key, "'"));
    const KeySpec& spec = it->second;
    try {
        switch (spec.kind) {
            case KeySpec::kInt:
                if (!value.is_number_integer())
                    throw ConfigError(cat("key '", key, "' expects an integer"));
                cfg.*(spec.i) = value.get<int>();
                break;
            case KeySpec::kReal:
                if (!value.is_number())
                    throw ConfigError(cat("key '", key, "' expects a number"));
                cfg.*(spec.r) = value.get<double>();
                break;
            case KeySpec::kStr:
                if (!value.is_string())
                    throw ConfigError(cat("key '", key, "' expects a string"));
                cfg.*(spec.s) = value.get<std::string>();
                break;
            case KeySpec::kSeed:
                if (!value.is_number_unsigned() && !value.is_number_integer())
                    throw ConfigError(cat("key '", key, "' expects a non-negative integer"));
                cfg.*(spec.u) = value.get<std::uint64_t>();
                break;
        }
    } catch (const json::exception& e) {
        throw ConfigError(cat("key '", key, "': ", e.what()));
    }
}

}  // namespace

std::vector<std::string> ExperimentConfig::preset_names() { return {"toy", "okvqa-paper", "fvqa-paper"}; }

ExperimentConfig ExperimentConfig::preset(const std::string& name) {
    ExperimentConfig cfg;  // defaults mirror the OK-VQA paper setup
    if (name == "okvqa-paper") {
        cfg.retriever_epochs = 2;
        cfg.reader_n_passages = 32;
        cfg.reader_max_text_tokens = 420;
        cfg.reader_train_steps = 5000;
        cfg.reader_warmup_steps = 800;
        return cfg;
    }
    if (name == "fvqa-paper") {
        cfg.retriever_epochs = 4;
        cfg.reader_n_passages = 5;
        cfg.reader_max_text_tokens = 64;
        cfg.reader_train_steps = 2000;
        cfg.reader_warmup_steps = 200;
        return cfg;
    }
    if (name == "toy") {
        cfg.seed = 7;
        cfg.gen_queries = 200;
        cfg.gen_passages = 1000;
        cfg.gen_vocab = 600;
        cfg.hard_negatives_m = 3;
        cfg.retriever_lr = 2e-3;
        cfg.retriever_batch = 8;
        cfg.retriever_epochs = 12;
        cfg.warmup_fraction = 0.1;
        cfg.retrieval_k = 100;
        cfg.distill_max_rounds = 2;
        cfg.distill_evals_per_round = 4;
        cfg.reader_n_passages = 3;
        cfg.reader_max_text_tokens = 64;
        cfg.reader_beam = 2;
        cfg.reader_lr = 1.5e-3;
        cfg.reader_weight_decay = 0.0;
        cfg.reader_accum_steps = 4;
        cfg.reader_train_steps = 500;
        cfg.reader_warmup_steps = 20;
        cfg.reader_checkpoint_every = 50;
        return cfg;
    }
    throw ConfigError(cat("unknown preset '", name, "' (available: toy, okvqa-paper, fvqa-paper)"));
}

void ExperimentConfig::apply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(cat("cannot open config file ", path));
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(cat(path, ": malformed config: ", e.what()));
    }
    if (!j.is_object()) throw ConfigError(cat(path, ": config must be a flat JSON object"));
    for (const auto& [key, value] : j.items()) assign(*this, key, value);
}

void ExperimentConfig::apply_override(const std::string& key, const std::string& value) {
    const auto it = key_table().find(key);
    if (it == key_table().end()) throw ConfigError(cat("unknown configuration key '", key, "'"));
    json v;
    switch (it->second.kind) {
        case KeySpec::kStr:
            v = value;
            break;
        default:
            try {
                v = json::parse(value);
            } catch (const json::exception&) {
                throw ConfigError(cat("key '", key, "': cannot parse '", value, "' as a number"));
            }
    }
    assign(*this, key, v);
}

void ExperimentConfig::validate() const {
    auto positive = [](const char* name, auto v) {
        if (v <= 0) throw ConfigError(cat("config: ", name, " must be positive (got ", v, ")"));
    };
    positive("threads", threads);
    positive("gen_queries", gen_queries);
    positive("gen_passages", gen_passages);
    positive("gen_vocab", gen_vocab);
    positive("d_t", d_t);
    positive("d_mm", d_mm);
    positive("width", width);
    positive("heads", heads);
    positive("blocks", blocks);
    positive("num_regions", num_regions);
    positive("feature_dim", feature_dim);
    positive("max_input_tokens", max_input_tokens);
    positive("hard_negatives_m", hard_negatives_m);
    positive("retriever_lr", retriever_lr);
    positive("retriever_batch", retriever_batch);
    positive("retriever_epochs", retriever_epochs);
    positive("grad_clip", grad_clip);
    positive("retrieval_k", retrieval_k);
    positive("reader_max_text_tokens", reader_max_text_tokens);
    positive("reader_max_output_tokens", reader_max_output_tokens);
    positive("reader_beam", reader_beam);
    positive("reader_lr", reader_lr);
    positive("reader_accum_steps", reader_accum_steps);
    positive("reader_train_steps", reader_train_steps);
    positive("reader_checkpoint_every", reader_checkpoint_every);
    positive("bm25_k1", bm25_k1);
    if (gen_passages < gen_queries)
        throw ConfigError("config: gen_passages must be >= gen_queries");
    if (width % heads != 0) throw ConfigError("config: width must be a multiple of heads");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
        throw ConfigError("config: warmup_fraction must be in [0, 1)");
    if (bm25_b < 0.0 || bm25_b > 1.0) throw ConfigError("config: bm25_b must be in [0, 1]");
    if (distill_max_rounds < 0 || distill_patience < 1 || distill_evals_per_round < 1)
        throw ConfigError("config: distillation controls out of range");
    if (distill_temperature <= 0.0) throw ConfigError("config: distill_temperature must be positive");
    if (distill_mixed_weight < 0.0) throw ConfigError("config: distill_mixed_weight must be >= 0");
    if (reader_n_passages < 0) throw ConfigError("config: reader_n_passages must be >= 0");
    if (reader_weight_decay < 0.0) throw ConfigError("config: reader_weight_decay must be >= 0");
    if (reader_warmup_steps < 0) throw ConfigError("config: reader_warmup_steps must be >= 0");
    if (kernels != "auto" && kernels != "scalar" && kernels != "avx2")
        throw ConfigError(cat("config: kernels must be auto|scalar|avx2, got '", kernels, "'"));
    if (workdir.empty()) throw ConfigError("config: workdir must be non-empty");
}

std::string ExperimentConfig::dump() const {
    json j;
    for (const auto& [name, spec] : key_table()) {
        switch (spec.kind) {
            case KeySpec::kInt: j[name] = this->*(spec.i); break;
            case KeySpec::kReal: j[name] = this->*(spec.r); break;
            case KeySpec::kStr: j[name] = this->*(spec.s); break;
            case KeySpec::kSeed: j[name] = this->*(spec.u); break;
        }
    }
    return j.dump(2);
}

std::uint64_t ExperimentConfig::config_hash() const {
    const std::string d = dump();
    return fnv1a(d.data(), d.size());
}

namespace {
std::string or_default(const std::string& value, const std::string& fallback) {
    return value.empty() ? fallback : value;
}
}  // namespace

std::string ExperimentConfig::questions_path(const std::string& split) const {
    if (split == "train") return or_default(questions_train, corpus_dir() + "/questions_train.jsonl");
    if (split == "validation")
        return or_default(questions_validation, corpus_dir() + "/questions_validation.jsonl");
    if (split == "test") return or_default(questions_test, corpus_dir() + "/questions_test.jsonl");
    throw ConfigError(cat("unknown split '", split, "' (expected train|validation|test)"));
}

std::string ExperimentConfig::passages_path() const {
    return or_default(passages_file, corpus_dir() + "/passages.jsonl");
}
std::string ExperimentConfig::captions_path() const {
    return or_default(captions_file, corpus_dir() + "/captions.jsonl");
}
std::string ExperimentConfig::features_path() const {
    return or_default(features_file, corpus_dir() + "/features.bin");
}
std::string ExperimentConfig::objects_path() const {
    return or_default(objects_file, corpus_dir() + "/objects.jsonl");
}
std::string ExperimentConfig::negatives_path() const {
    return or_default(negatives_train, workdir + "/negatives_train.jsonl");
}

}  // namespace kivqa
