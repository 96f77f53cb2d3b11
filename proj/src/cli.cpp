// SPDX-License-Identifier: Apache-2.0

#include "kivqa/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "kivqa/config.hpp"
#include "kivqa/corpus.hpp"
#include "kivqa/dual_index.hpp"
#include "kivqa/kernels.hpp"
#include "kivqa/reader.hpp"
#include "kivqa/sparse.hpp"
#include "kivqa/training.hpp"

namespace kivqa {

namespace {

using nlohmann::json;

constexpr const char* kToolVersion = "kivqa 0.1.0";

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

// Every artifact-producing command records how to regenerate its outputs.
struct Manifest {
    std::string command;
    const ExperimentConfig* cfg;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;

    void write() const {
        json j;
        j["command"] = command;
        j["tool"] = kToolVersion;
        j["seed"] = cfg->seed;
        j["config"] = json::parse(cfg->dump());
        j["config_hash"] = hex64(cfg->config_hash());
        json in = json::object(), out = json::object();
        for (const auto& p : inputs) in[p] = hex64(fnv1a_file(p));
        for (const auto& p : outputs) out[p] = hex64(fnv1a_file(p));
        j["inputs"] = in;
        j["outputs"] = out;
        const std::string path = cfg->manifest_path(command);
        std::filesystem::create_directories(std::filesystem::path(path).parent_path());
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError(cat("cannot write manifest ", path));
        f << j.dump(2) << '\n';
    }
};

void require_artifact(const std::string& path, const std::string& producer) {
    if (!std::filesystem::exists(path))
        throw DataError(cat("missing artifact ", path, "; run `kivqa ", producer, "` first"));
}

// --- store loading ---------------------------------------------------------

struct LoadedCorpus {
    std::vector<QueryRecord> train, validation, test;
    PassageStore passages;
    CaptionStore captions;
    VisualStore visuals;
    ObjectStore objects;
};

std::vector<QueryRecord> load_split(const ExperimentConfig& cfg, const std::string& split) {
    const std::string path = cfg.questions_path(split);
    require_artifact(path, "gen-data");
    return ingest_questions(path, split);
}

void apply_negative_sidecar(const ExperimentConfig& cfg, std::vector<QueryRecord>& records) {
    const std::string path = cfg.negatives_path();
    require_artifact(path, "mine-negatives");
    std::ifstream in(path);
    std::map<std::string, std::vector<std::string>> negs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(cat(path, ": line ", lineno, ": ", e.what()));
        }
        negs[j.at("query_id").get<std::string>()] =
            j.at("hard_negative_ids").get<std::vector<std::string>>();
    }
    for (auto& r : records) {
        auto it = negs.find(r.query_id);
        if (it == negs.end())
            throw DataError(cat(path, ": no mined negatives for query ", r.query_id,
                                "; re-run `kivqa mine-negatives`"));
        r.hard_negative_ids = it->second;
        for (const auto& id : r.hard_negative_ids)
            if (r.is_relevant(id))
                throw DataError(cat(path, ": query ", r.query_id, ": mined negative ", id,
                                    " is a relevant passage"));
    }
}

LoadedCorpus load_corpus(const ExperimentConfig& cfg, bool with_negatives) {
    LoadedCorpus c;
    c.train = load_split(cfg, "train");
    c.validation = load_split(cfg, "validation");
    c.test = load_split(cfg, "test");
    require_artifact(cfg.passages_path(), "gen-data");
    c.passages = ingest_passages(cfg.passages_path());
    require_artifact(cfg.captions_path(), "gen-data");
    c.captions = ingest_captions(cfg.captions_path());
    require_artifact(cfg.features_path(), "gen-data");
    c.visuals = ingest_visual_features(cfg.features_path(), cfg.num_regions, cfg.feature_dim);
    if (std::filesystem::exists(cfg.objects_path())) c.objects = ingest_objects(cfg.objects_path());
    if (with_negatives) apply_negative_sidecar(cfg, c.train);
    return c;
}

// Vocabulary from the fixed stores plus the training split only, so unseen
// test wording maps to [UNK] instead of leaking into the tables.
Vocab build_vocab(const LoadedCorpus& c) {
    std::vector<std::string> texts;
    for (const auto& p : c.passages.all()) texts.push_back(p.text);
    for (const auto& [id, cap] : c.captions) texts.push_back(cap);
    for (const auto& [id, names] : c.objects)
        for (const auto& n : names) texts.push_back(n);
    for (const auto& r : c.train) {
        texts.push_back(r.question);
        for (const auto& a : r.answers) texts.push_back(a);
    }
    return Vocab::build(texts);
}

EncoderConfig encoder_config(const ExperimentConfig& cfg, EncodingPath path) {
    EncoderConfig e;
    e.width = cfg.width;
    e.heads = cfg.heads;
    e.blocks = cfg.blocks;
    e.out_dim = path == EncodingPath::T ? cfg.d_t : cfg.d_mm;
    e.max_input_tokens = cfg.max_input_tokens;
    e.num_regions = cfg.num_regions;
    e.feature_dim = cfg.feature_dim;
    return e;
}

ReaderConfig reader_config(const ExperimentConfig& cfg) {
    ReaderConfig r;
    r.width = cfg.width;
    r.heads = cfg.heads;
    r.enc_blocks = cfg.blocks;
    r.dec_blocks = cfg.blocks;
    r.num_regions = cfg.num_regions;
    r.feature_dim = cfg.feature_dim;
    r.max_text_tokens = cfg.reader_max_text_tokens;
    r.max_output_tokens = cfg.reader_max_output_tokens;
    r.beam = cfg.reader_beam;
    r.n_passages = cfg.reader_n_passages;
    r.template_text = cfg.reader_template;
    return r;
}

RetrieverTrainConfig retriever_train_config(const ExperimentConfig& cfg) {
    RetrieverTrainConfig t;
    t.batch_size = cfg.retriever_batch;
    t.epochs = cfg.retriever_epochs;
    t.lr = cfg.retriever_lr;
    t.warmup_fraction = cfg.warmup_fraction;
    t.grad_clip = cfg.grad_clip;
    t.seed = cfg.seed;
    return t;
}

// --- command implementations -------------------------------------------------

int cmd_gen_data(const ExperimentConfig& cfg) {
    SyntheticSpec spec;
    spec.seed = cfg.seed;
    spec.n_queries = cfg.gen_queries;
    spec.n_passages = cfg.gen_passages;
    spec.vocab_size = cfg.gen_vocab;
    spec.feature_dim = cfg.feature_dim;
    spec.num_regions = cfg.num_regions;
    const SyntheticData data = generate_synthetic_dataset(spec);
    CorpusPaths paths{cfg.corpus_dir()};
    write_synthetic(paths, data);
    std::cout << "gen-data: " << data.queries.size() << " queries (" << data.train.query_ids.size()
              << " train / " << data.validation.query_ids.size() << " validation / "
              << data.test.query_ids.size() << " test), " << data.passages.size() << " passages\n";
    Manifest m{"gen-data", &cfg, {},
               {paths.questions("train"), paths.questions("validation"), paths.questions("test"),
                paths.passages(), paths.captions(), paths.features(), paths.objects(),
                paths.split_manifest("train"), paths.split_manifest("validation"),
                paths.split_manifest("test")}};
    m.write();
    return 0;
}

int cmd_ingest(const ExperimentConfig& cfg) {
    LoadedCorpus c = load_corpus(cfg, false);
    for (const auto* split : {&c.train, &c.validation, &c.test})
        validate_references(*split, c.passages, &c.captions, &c.visuals,
                            c.objects.empty() ? nullptr : &c.objects);
    // split disjointness
    std::set<std::string> seen;
    for (const auto* split : {&c.train, &c.validation, &c.test})
        for (const auto& r : *split)
            if (!seen.insert(r.query_id).second)
                throw DataError(cat("query ", r.query_id, " appears in more than one split"));
    // split manifests, when present, must agree with the question files
    for (const auto& [name, records] :
         std::vector<std::pair<std::string, const std::vector<QueryRecord>*>>{
             {"train", &c.train}, {"validation", &c.validation}, {"test", &c.test}}) {
        const std::string mpath = cfg.corpus_dir() + "/split_" + name + ".json";
        if (!std::filesystem::exists(mpath)) continue;
        const SplitManifest sm = read_split_manifest(mpath);
        if (sm.query_ids.size() != records->size())
            throw DataError(cat(mpath, ": manifest lists ", sm.query_ids.size(), " ids but the ",
                                name, " question file has ", records->size()));
        std::set<std::string> ids(sm.query_ids.begin(), sm.query_ids.end());
        for (const auto& r : *records)
            if (!ids.count(r.query_id))
                throw DataError(cat(mpath, ": query ", r.query_id, " missing from manifest"));
    }
    std::cout << "ingest: ok (" << c.train.size() << " train / " << c.validation.size()
              << " validation / " << c.test.size() << " test queries, " << c.passages.size()
              << " passages, " << c.captions.size() << " captions, " << c.visuals.size()
              << " visual bundles)\n";
    Manifest m{"ingest", &cfg,
               {cfg.questions_path("train"), cfg.questions_path("validation"),
                cfg.questions_path("test"), cfg.passages_path(), cfg.captions_path(),
                cfg.features_path()},
               {}};
    m.write();
    return 0;
}

int cmd_mine_negatives(const ExperimentConfig& cfg, const std::string& split, int m_count) {
    auto records = load_split(cfg, split);
    require_artifact(cfg.passages_path(), "gen-data");
    const PassageStore passages = ingest_passages(cfg.passages_path());
    const InvertedIndex index = InvertedIndex::build(passages);
    const Bm25Params params{cfg.bm25_k1, cfg.bm25_b};

    const std::string out_path = cfg.negatives_path();
    std::filesystem::create_directories(std::filesystem::path(out_path).parent_path());
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw DataError(cat("cannot write ", out_path));
    int exhausted_count = 0;
    for (const auto& r : records) {
        bool exhausted = false;
        const auto negs = mine_hard_negatives(index, r, m_count, params, &exhausted);
        if (exhausted) {
            ++exhausted_count;
            std::cerr << "warning: query " << r.query_id << " has only " << negs.size() << " of "
                      << m_count << " requested negatives\n";
        }
        json j{{"query_id", r.query_id}, {"hard_negative_ids", negs}};
        out << j.dump() << '\n';
    }
    out.close();
    std::cout << "mine-negatives: wrote " << records.size() << " entries (m=" << m_count << ", "
              << exhausted_count << " exhausted) to " << out_path << "\n";
    Manifest m{"mine-negatives", &cfg, {cfg.questions_path(split), cfg.passages_path()}, {out_path}};
    m.write();
    return 0;
}

int cmd_train_retriever(const ExperimentConfig& cfg, const std::string& path_arg) {
    LoadedCorpus c = load_corpus(cfg, true);
    const Vocab vocab = build_vocab(c);
    RetrievalStores stores{&c.passages, &c.captions, &c.visuals};
    const RetrieverTrainConfig tcfg = retriever_train_config(cfg);

    Manifest m{"train-retriever", &cfg,
               {cfg.questions_path("train"), cfg.passages_path(), cfg.negatives_path()}, {}};
    if (path_arg == "joint") {
        EncoderParams pt = EncoderParams::init(EncodingPath::T, encoder_config(cfg, EncodingPath::T),
                                               vocab, cfg.seed + 1);
        EncoderParams pm = EncoderParams::init(EncodingPath::MM, encoder_config(cfg, EncodingPath::MM),
                                               vocab, cfg.seed + 2);
        TrainLog log(cfg.log_path("train_joint"));
        auto result = train_contrastive({&pt, &pm}, c.train, c.validation, stores, tcfg, &log);
        // train_contrastive tracks the first path's best copy; persist the
        // final round-trip state of both encoders at the best step instead
        pt.save(cfg.checkpoint_path("encoder_T_joint"));
        pm.save(cfg.checkpoint_path("encoder_MM_joint"));
        std::cout << "train-retriever --path joint: final val MRR@5 "
                  << (result.val_mrr5_per_epoch.empty() ? 0.0 : result.val_mrr5_per_epoch.back())
                  << "\n";
        m.outputs = {cfg.checkpoint_path("encoder_T_joint"), cfg.checkpoint_path("encoder_MM_joint")};
        m.write();
        return 0;
    }
    const EncodingPath path = path_arg == "T" ? EncodingPath::T : EncodingPath::MM;
    EncoderParams params = EncoderParams::init(
        path, encoder_config(cfg, path), vocab,
        cfg.seed + (path == EncodingPath::T ? 1 : 2));
    TrainLog log(cfg.log_path("train_" + path_arg));
    auto result = train_isolated(params, c.train, c.validation, stores, tcfg, &log);
    const std::string ckpt = cfg.checkpoint_path("encoder_" + path_arg + "_isolated");
    result.params.save(ckpt);
    std::cout << "train-retriever --path " << path_arg << ": best val MRR@5 " << result.best_val_mrr5
              << "\n";
    m.outputs = {ckpt};
    m.write();
    return 0;
}

int cmd_distill(const ExperimentConfig& cfg) {
    LoadedCorpus c = load_corpus(cfg, true);
    RetrievalStores stores{&c.passages, &c.captions, &c.visuals};
    const std::string ckpt_T = cfg.checkpoint_path("encoder_T_isolated");
    const std::string ckpt_MM = cfg.checkpoint_path("encoder_MM_isolated");
    require_artifact(ckpt_T, "train-retriever --path T");
    require_artifact(ckpt_MM, "train-retriever --path MM");
    const EncoderParams pt = EncoderParams::load(ckpt_T);
    const EncoderParams pm = EncoderParams::load(ckpt_MM);

    DistillConfig dcfg;
    dcfg.max_rounds = cfg.distill_max_rounds;
    dcfg.patience = cfg.distill_patience;
    dcfg.temperature = cfg.distill_temperature;
    dcfg.mixed_contrastive_weight = cfg.distill_mixed_weight;
    dcfg.evals_per_round = cfg.distill_evals_per_round;

    TrainLog log(cfg.log_path("distill"));
    auto state = run_iterative_distillation(pt, pm, c.train, c.validation, stores,
                                            retriever_train_config(cfg), dcfg, &log);
    state.best_T.save(cfg.checkpoint_path("encoder_T_distilled"));
    state.best_MM.save(cfg.checkpoint_path("encoder_MM_distilled"));
    std::cout << "distill: " << state.round << " round(s); best val MRR@5 T=" << state.best_val_T
              << " MM=" << state.best_val_MM << "\n";
    Manifest m{"distill", &cfg, {ckpt_T, ckpt_MM},
               {cfg.checkpoint_path("encoder_T_distilled"), cfg.checkpoint_path("encoder_MM_distilled"),
                cfg.log_path("distill")}};
    m.write();
    return 0;
}

std::pair<std::string, std::string> checkpoint_pair(const ExperimentConfig& cfg,
                                                    const std::string& stage) {
    if (stage == "distilled")
        return {cfg.checkpoint_path("encoder_T_distilled"), cfg.checkpoint_path("encoder_MM_distilled")};
    if (stage == "isolated")
        return {cfg.checkpoint_path("encoder_T_isolated"), cfg.checkpoint_path("encoder_MM_isolated")};
    if (stage == "joint")
        return {cfg.checkpoint_path("encoder_T_joint"), cfg.checkpoint_path("encoder_MM_joint")};
    throw ConfigError(cat("unknown checkpoint stage '", stage, "' (distilled|isolated|joint)"));
}

int cmd_build_index(const ExperimentConfig& cfg, const std::string& stage) {
    const auto [path_T, path_MM] = checkpoint_pair(cfg, stage);
    require_artifact(path_T, stage == "distilled" ? "distill" : "train-retriever");
    require_artifact(path_MM, stage == "distilled" ? "distill" : "train-retriever");
    const EncoderParams pt = EncoderParams::load(path_T);
    const EncoderParams pm = EncoderParams::load(path_MM);
    require_artifact(cfg.passages_path(), "gen-data");
    const PassageStore passages = ingest_passages(cfg.passages_path());

    ToyEmbedder emb_T(pt), emb_MM(pm);
    IndexBuildInputs in;
    in.passages = &passages;
    in.text_path = &emb_T;
    in.mm_path = &emb_MM;
    in.vocab = &pt.vocab;
    in.max_input_tokens = pt.cfg.max_input_tokens;
    in.num_regions = pm.cfg.num_regions;
    in.feature_dim = pm.cfg.feature_dim;
    in.fingerprint_T = fnv1a_file(path_T);
    in.fingerprint_MM = fnv1a_file(path_MM);
    in.threads = cfg.threads;
    const FlatIndex index = FlatIndex::build(in);
    index.save(cfg.index_path());
    const auto [nt, nm] = index.mean_half_norms();
    std::cout << "build-index: " << index.size() << " x " << index.dim()
              << " (mean half norms: T " << nt << ", MM " << nm << ")\n";
    Manifest m{"build-index", &cfg, {path_T, path_MM, cfg.passages_path()}, {cfg.index_path()}};
    m.write();
    return 0;
}

int cmd_retrieve(const ExperimentConfig& cfg, const std::string& split, int k,
                 const std::string& path_mode, std::string run_file, const std::string& stage) {
    require_artifact(cfg.index_path(), "build-index");
    const FlatIndex index = FlatIndex::load(cfg.index_path());
    const auto [path_T, path_MM] = checkpoint_pair(cfg, stage);
    require_artifact(path_T, "train-retriever");
    require_artifact(path_MM, "train-retriever");
    if (fnv1a_file(path_T) != index.fingerprint_T() ||
        fnv1a_file(path_MM) != index.fingerprint_MM())
        throw DataError(cat(cfg.index_path(), ": index was built from different checkpoints than ",
                            path_T, " / ", path_MM, "; re-run `kivqa build-index`"));
    const EncoderParams pt = EncoderParams::load(path_T);
    const EncoderParams pm = EncoderParams::load(path_MM);

    auto records = load_split(cfg, split);
    require_artifact(cfg.captions_path(), "gen-data");
    const CaptionStore captions = ingest_captions(cfg.captions_path());
    const VisualStore visuals =
        ingest_visual_features(cfg.features_path(), cfg.num_regions, cfg.feature_dim);

    std::vector<std::pair<std::string, RankedList>> runs;
    runs.reserve(records.size());
    for (const auto& r : records) {
        RankedList list;
        if (path_mode == "T") {
            const auto seq = query_text_input(r, EncodingPath::T, &captions, pt.vocab,
                                              pt.cfg.max_input_tokens);
            const auto e = encode_text_path(pt, seq);
            list = index.search_columns(e.embedding.data(), 0, index.dim_T(), k);
        } else if (path_mode == "MM") {
            const auto seq = query_text_input(r, EncodingPath::MM, nullptr, pm.vocab,
                                              pm.cfg.max_input_tokens);
            auto it = visuals.find(r.image_id);
            if (it == visuals.end()) throw DataError(cat("no visual features for ", r.image_id));
            const auto e = encode_multimodal_path(pm, seq, it->second);
            list = index.search_columns(e.embedding.data(), index.dim_T(), index.dim_MM(), k);
        } else {
            const auto st = encode_text_path(
                pt, query_text_input(r, EncodingPath::T, &captions, pt.vocab, pt.cfg.max_input_tokens));
            auto it = visuals.find(r.image_id);
            if (it == visuals.end()) throw DataError(cat("no visual features for ", r.image_id));
            const auto sm = encode_multimodal_path(
                pm, query_text_input(r, EncodingPath::MM, nullptr, pm.vocab, pm.cfg.max_input_tokens),
                it->second);
            const DualEmbedding dual = concat_dual(st, sm);
            list = index.search(dual, k);
        }
        runs.emplace_back(r.query_id, std::move(list));
    }
    if (run_file.empty()) run_file = cfg.run_path(split);
    write_run_file(run_file, runs, "kivqa-" + path_mode);
    std::cout << "retrieve: wrote " << runs.size() << " ranked lists (k=" << k << ", path="
              << path_mode << ") to " << run_file << "\n";
    Manifest m{"retrieve", &cfg, {cfg.index_path(), path_T, path_MM, cfg.questions_path(split)},
               {run_file}};
    m.write();
    return 0;
}

// Supporting passages per query: top-n from a run file, or the gold passage
// plus deterministic distractors.
std::map<std::string, std::vector<std::string>> build_support(
    const ExperimentConfig& cfg, const std::vector<QueryRecord>& records,
    const PassageStore& passages, const std::string& run_file, int n) {
    std::map<std::string, std::vector<std::string>> support;
    if (!run_file.empty()) {
        require_artifact(run_file, "retrieve");
        for (auto& [qid, list] : read_run_file(run_file)) {
            auto& ids = support[qid];
            for (const auto& sp : list) {
                if (static_cast<int>(ids.size()) >= n) break;
                ids.push_back(sp.passage_id);
            }
        }
        return support;
    }
    // gold mode: relevant passage first, then seeded non-relevant distractors
    for (const auto& r : records) {
        std::vector<std::string> ids(r.relevant_passage_ids.begin(), r.relevant_passage_ids.end());
        if (static_cast<int>(ids.size()) > n) ids.resize(n);
        Rng rng(cfg.seed ^ fnv1a(r.query_id.data(), r.query_id.size()));
        while (static_cast<int>(ids.size()) < n) {
            const auto& p = passages.at(rng.below(passages.size()));
            if (r.is_relevant(p.passage_id)) continue;
            if (std::find(ids.begin(), ids.end(), p.passage_id) != ids.end()) continue;
            ids.push_back(p.passage_id);
        }
        support[r.query_id] = std::move(ids);
    }
    return support;
}

int cmd_train_reader(const ExperimentConfig& cfg, const std::string& run_file) {
    LoadedCorpus c = load_corpus(cfg, false);
    const Vocab vocab = build_vocab(c);
    std::map<std::string, std::vector<std::string>> all_support =
        build_support(cfg, c.train, c.passages, run_file, cfg.reader_n_passages);
    for (auto& [qid, ids] :
         build_support(cfg, c.validation, c.passages, run_file, cfg.reader_n_passages))
        all_support.emplace(qid, std::move(ids));

    ReaderParams params = ReaderParams::init(reader_config(cfg), vocab, cfg.seed + 3);
    ReaderTrainConfig rcfg;
    rcfg.lr = cfg.reader_lr;
    rcfg.weight_decay = cfg.reader_weight_decay;
    rcfg.accum_steps = cfg.reader_accum_steps;
    rcfg.max_steps = cfg.reader_train_steps;
    rcfg.warmup_steps = cfg.reader_warmup_steps;
    rcfg.grad_clip = cfg.grad_clip;
    rcfg.checkpoint_every = cfg.reader_checkpoint_every;
    rcfg.seed = cfg.seed;

    TrainLog log(cfg.log_path("reader"));
    auto result = train_reader(std::move(params), c.train, c.validation, all_support, c.passages,
                               c.visuals, rcfg, &log);
    const std::string ckpt = cfg.checkpoint_path("reader");
    result.params.save(ckpt);
    std::cout << "train-reader: best val EM " << result.best_val_em << " at step "
              << result.best_step << "\n";
    Manifest m{"train-reader", &cfg, {cfg.questions_path("train"), cfg.passages_path()}, {ckpt}};
    if (!run_file.empty()) m.inputs.push_back(run_file);
    m.write();
    return 0;
}

int cmd_answer(const ExperimentConfig& cfg, const std::string& split, const std::string& run_file,
               int n) {
    const std::string ckpt = cfg.checkpoint_path("reader");
    require_artifact(ckpt, "train-reader");
    const ReaderParams params = ReaderParams::load(ckpt);
    LoadedCorpus c = load_corpus(cfg, false);
    const auto& records = split == "train" ? c.train : split == "validation" ? c.validation : c.test;
    const auto support = build_support(cfg, records, c.passages, run_file, n);

    const std::string out_path = cfg.answers_path(split);
    std::filesystem::create_directories(std::filesystem::path(out_path).parent_path());
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw DataError(cat("cannot write ", out_path));
    for (const auto& r : records) {
        std::vector<std::string> texts;
        if (auto it = support.find(r.query_id); it != support.end())
            for (const auto& pid : it->second) texts.push_back(c.passages.by_id(pid).text);
        const auto inputs = assemble_fusion_inputs(r, c.visuals, texts, params.vocab, params.cfg);
        const ReaderOutput o = generate(params, inputs);
        json j{{"query_id", r.query_id}, {"answer", o.answer}, {"score", o.score}};
        out << j.dump() << '\n';
    }
    out.close();
    std::cout << "answer: wrote " << records.size() << " answers to " << out_path << "\n";
    Manifest m{"answer", &cfg, {ckpt, cfg.questions_path(split)}, {out_path}};
    if (!run_file.empty()) m.inputs.push_back(run_file);
    m.write();
    return 0;
}

struct EvalReport {
    json machine = json::object();
    std::string table;
};

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& split, std::string run_file,
                 std::string answers_file, const std::string& curves_in,
                 const std::string& curves_out) {
    if (!curves_in.empty()) {
        // convert a training metrics log into plottable TSV (step, value)
        require_artifact(curves_in, "train-retriever or distill");
        std::ifstream in(curves_in);
        std::ofstream out(curves_out.empty() ? cfg.report_path("curves.tsv") : curves_out);
        out << "phase\tround\tstep\tloss\tval_mrr5\tval_em\n";
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            auto field = [&](const char* k) {
                return j.contains(k) ? j[k].dump() : std::string();
            };
            out << field("phase") << '\t' << field("round") << '\t' << field("step") << '\t'
                << field("loss") << '\t' << field("val_mrr5") << '\t' << field("val_em") << '\n';
        }
        std::cout << "evaluate: wrote curve data\n";
        return 0;
    }

    auto records = load_split(cfg, split);
    std::map<std::string, const QueryRecord*> by_id;
    for (const auto& r : records) by_id[r.query_id] = &r;

    EvalReport report;
    std::ostringstream table;
    table << "metric                value\n--------------------  ------\n";
    auto emit = [&](const std::string& name, double v) {
        report.machine[name] = v;
        table << name;
        for (std::size_t i = name.size(); i < 22; ++i) table << ' ';
        table << v << '\n';
    };

    if (run_file.empty()) run_file = cfg.run_path(split);
    if (std::filesystem::exists(run_file)) {
        RetrievalJudgedRun run;
        for (const auto& [qid, list] : read_run_file(run_file)) {
            auto it = by_id.find(qid);
            if (it == by_id.end())
                throw DataError(cat(run_file, ": run references unknown query ", qid));
            JudgedQuery jq;
            for (const auto& sp : list) jq.ranked.push_back(sp.passage_id);
            jq.relevant.insert(it->second->relevant_passage_ids.begin(),
                               it->second->relevant_passage_ids.end());
            run.push_back(std::move(jq));
        }
        if (!run.empty()) {
            emit("mrr_at_5", mrr_at_k(run, 5));
            emit("precision_at_5", precision_at_k(run, 5));
            emit("precision_at_1", precision_at_k(run, 1));
            for (int k : {1, 2, 4, 8, 16, 32}) emit(cat("hit_at_", k), hit_at_k(run, k));
        }
    }

    if (answers_file.empty()) answers_file = cfg.answers_path(split);
    if (std::filesystem::exists(answers_file)) {
        std::ifstream in(answers_file);
        std::vector<AnswerJudgment> judgments;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            auto it = by_id.find(j.at("query_id").get<std::string>());
            if (it == by_id.end())
                throw DataError(cat(answers_file, ": unknown query ", j.at("query_id").dump()));
            judgments.push_back({j.at("answer").get<std::string>(), it->second->answers});
        }
        if (!judgments.empty()) {
            emit("vqa_core_accuracy", vqa_accuracy(judgments));  // min(matches/3, 1) core formula
            emit("exact_match", exact_match(judgments));
        }
    }
    if (report.machine.empty())
        throw DataError(cat("evaluate: neither ", run_file, " nor ", answers_file,
                            " exists; run `kivqa retrieve` and/or `kivqa answer` first"));

    const std::string json_path = cfg.report_path("eval_" + split + ".json");
    const std::string text_path = cfg.report_path("eval_" + split + ".txt");
    std::filesystem::create_directories(std::filesystem::path(json_path).parent_path());
    std::ofstream(json_path) << report.machine.dump(2) << '\n';
    std::ofstream(text_path) << table.str();
    std::cout << table.str();
    Manifest m{"evaluate", &cfg, {}, {json_path, text_path}};
    if (std::filesystem::exists(run_file)) m.inputs.push_back(run_file);
    if (std::filesystem::exists(answers_file)) m.inputs.push_back(answers_file);
    m.write();
    return 0;
}

int cmd_sweep_k(const ExperimentConfig& cfg, const std::string& split, const std::string& ks_arg,
                const std::string& stage) {
    std::vector<int> ks;
    {
        std::istringstream ss(ks_arg);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            ks.push_back(std::stoi(tok));
        }
        if (ks.empty()) throw ConfigError("sweep-k: --ks must list at least one cut-off");
        for (int k : ks)
            if (k < 1) throw ConfigError("sweep-k: cut-offs must be >= 1");
    }
    const int max_k = *std::max_element(ks.begin(), ks.end());

    require_artifact(cfg.index_path(), "build-index");
    const FlatIndex index = FlatIndex::load(cfg.index_path());
    const auto [path_T, path_MM] = checkpoint_pair(cfg, stage);
    require_artifact(path_T, "train-retriever");
    const EncoderParams pt = EncoderParams::load(path_T);
    const EncoderParams pm = EncoderParams::load(path_MM);
    const std::string reader_ckpt = cfg.checkpoint_path("reader");
    require_artifact(reader_ckpt, "train-reader");
    const ReaderParams reader = ReaderParams::load(reader_ckpt);

    LoadedCorpus c = load_corpus(cfg, false);
    const auto& records = split == "train" ? c.train : split == "validation" ? c.validation : c.test;

    // one deep retrieval pass; every cut-off is a prefix of it
    std::map<std::string, RankedList> deep;
    for (const auto& r : records) {
        const auto st = encode_text_path(
            pt, query_text_input(r, EncodingPath::T, &c.captions, pt.vocab, pt.cfg.max_input_tokens));
        const auto sm = encode_multimodal_path(
            pm, query_text_input(r, EncodingPath::MM, nullptr, pm.vocab, pm.cfg.max_input_tokens),
            c.visuals.at(r.image_id));
        deep[r.query_id] = index.search(concat_dual(st, sm), max_k);
    }

    json rows = json::array();
    std::ostringstream table;
    table << "k     hit@k     vqa_core_acc  exact_match\n";
    for (int k : ks) {
        RetrievalJudgedRun run;
        std::vector<AnswerJudgment> judgments;
        for (const auto& r : records) {
            const RankedList& list = deep.at(r.query_id);
            JudgedQuery jq;
            std::vector<std::string> texts;
            for (int i = 0; i < k && i < static_cast<int>(list.size()); ++i) {
                jq.ranked.push_back(list[i].passage_id);
                texts.push_back(c.passages.by_id(list[i].passage_id).text);
            }
            jq.relevant.insert(r.relevant_passage_ids.begin(), r.relevant_passage_ids.end());
            run.push_back(std::move(jq));
            const auto inputs = assemble_fusion_inputs(r, c.visuals, texts, reader.vocab, reader.cfg);
            judgments.push_back({generate(reader, inputs).answer, r.answers});
        }
        const double hit = hit_at_k(run, k);
        const double acc = vqa_accuracy(judgments);
        const double em = exact_match(judgments);
        rows.push_back(json{{"k", k}, {"hit_at_k", hit}, {"vqa_core_accuracy", acc},
                            {"exact_match", em}});
        table << k;
        for (std::size_t i = std::to_string(k).size(); i < 6; ++i) table << ' ';
        std::ostringstream h;
        h << hit;
        table << h.str();
        for (std::size_t i = h.str().size(); i < 10; ++i) table << ' ';
        std::ostringstream a;
        a << acc;
        table << a.str();
        for (std::size_t i = a.str().size(); i < 14; ++i) table << ' ';
        table << em << '\n';
    }
    const std::string json_path = cfg.report_path("sweep.json");
    const std::string text_path = cfg.report_path("sweep.txt");
    std::filesystem::create_directories(std::filesystem::path(json_path).parent_path());
    std::ofstream(json_path) << rows.dump(2) << '\n';
    std::ofstream(text_path) << table.str();
    std::cout << table.str();
    Manifest m{"sweep-k", &cfg,
               {cfg.index_path(), path_T, path_MM, reader_ckpt, cfg.questions_path(split)},
               {json_path, text_path}};
    m.write();
    return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
    CLI::App app{"symmetric dual-encoding retrieval + fusion-in-decoder reader pipeline"};
    app.require_subcommand(1);

    std::string preset, config_file;
    std::vector<std::string> overrides;
    app.add_option("--preset", preset, "configuration preset (toy | okvqa-paper | fvqa-paper)");
    app.add_option("--config", config_file, "flat JSON config file");
    app.add_option("--set", overrides, "override a config key, e.g. --set seed=11")->take_all();

    std::string split = "test", path_arg = "dual", stage = "distilled";
    std::string run_file, answers_file, ks_arg = "1,2,4,8,16,32", curves_in, curves_out;
    int k = -1, m_count = -1, n_support = -1;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    auto* ingest = app.add_subcommand("ingest", "validate all configured stores");
    auto* mine = app.add_subcommand("mine-negatives", "BM25 hard negatives for a split");
    mine->add_option("--split", split, "split to mine (default train)");
    mine->add_option("--m", m_count, "negatives per query (default config hard_negatives_m)");
    auto* trainr = app.add_subcommand("train-retriever", "contrastive training of one encoding path");
    trainr->add_option("--path", path_arg, "T | MM | joint")->required();
    auto* distill = app.add_subcommand("distill", "iterative knowledge distillation between paths");
    auto* build = app.add_subcommand("build-index", "embed the collection into a flat index");
    build->add_option("--checkpoints", stage, "distilled | isolated | joint (default distilled)");
    auto* retrieve = app.add_subcommand("retrieve", "rank passages for a split");
    retrieve->add_option("--split", split, "train | validation | test (default test)");
    retrieve->add_option("--k", k, "results per query (default config retrieval_k)");
    retrieve->add_option("--path", path_arg, "dual | T | MM (default dual)");
    retrieve->add_option("--run-file", run_file, "output run file (default workdir layout)");
    retrieve->add_option("--checkpoints", stage, "distilled | isolated | joint");
    auto* trainrd = app.add_subcommand("train-reader", "train the fusion-in-decoder reader");
    trainrd->add_option("--run-file", run_file, "supporting passages from this run (default: gold)");
    auto* answer = app.add_subcommand("answer", "generate answers for a split");
    answer->add_option("--split", split, "train | validation | test (default test)");
    answer->add_option("--run-file", run_file, "supporting passages from this run (default: gold)");
    answer->add_option("--n", n_support, "passages per question (default config reader_n_passages)");
    auto* evaluate = app.add_subcommand("evaluate", "score run and answer files");
    evaluate->add_option("--split", split, "train | validation | test (default test)");
    evaluate->add_option("--run-file", run_file, "run file (default workdir layout)");
    evaluate->add_option("--answers", answers_file, "answers file (default workdir layout)");
    evaluate->add_option("--curves", curves_in, "convert a metrics log to TSV instead");
    evaluate->add_option("--curves-out", curves_out, "TSV output path");
    auto* sweep = app.add_subcommand("sweep-k", "hit ratio and answer accuracy per cut-off");
    sweep->add_option("--ks", ks_arg, "comma-separated cut-offs (default 1,2,4,8,16,32)");
    sweep->add_option("--split", split, "split (default test)");
    sweep->add_option("--checkpoints", stage, "distilled | isolated | joint");

    std::vector<const char*> argv;
    argv.push_back("kivqa");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg = preset.empty() ? ExperimentConfig{} : ExperimentConfig::preset(preset);
        if (!config_file.empty()) cfg.apply_file(config_file);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw ConfigError(cat("--set expects key=value, got '", kv, "'"));
            cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();
        kernels::set_backend(cfg.kernels == "scalar"   ? kernels::Backend::Scalar
                             : cfg.kernels == "avx2" ? kernels::Backend::Avx2
                                                       : kernels::Backend::Auto);

        if (gen->parsed()) return cmd_gen_data(cfg);
        if (ingest->parsed()) return cmd_ingest(cfg);
        if (mine->parsed())
            return cmd_mine_negatives(cfg, split, m_count > 0 ? m_count : cfg.hard_negatives_m);
        if (trainr->parsed()) {
            if (path_arg != "T" && path_arg != "MM" && path_arg != "joint")
                throw ConfigError(cat("train-retriever: --path must be T, MM, or joint, got '",
                                      path_arg, "'"));
            return cmd_train_retriever(cfg, path_arg);
        }
        if (distill->parsed()) return cmd_distill(cfg);
        if (build->parsed()) return cmd_build_index(cfg, stage);
        if (retrieve->parsed()) {
            if (path_arg != "dual" && path_arg != "T" && path_arg != "MM")
                throw ConfigError(cat("retrieve: --path must be dual, T, or MM, got '", path_arg, "'"));
            return cmd_retrieve(cfg, split, k > 0 ? k : cfg.retrieval_k, path_arg, run_file, stage);
        }
        if (trainrd->parsed()) return cmd_train_reader(cfg, run_file);
        if (answer->parsed())
            return cmd_answer(cfg, split, run_file, n_support > 0 ? n_support : cfg.reader_n_passages);
        if (evaluate->parsed())
            return cmd_evaluate(cfg, split, run_file, answers_file, curves_in, curves_out);
        if (sweep->parsed()) return cmd_sweep_k(cfg, split, ks_arg, stage);
        throw ConfigError("no command given");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ContractError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace kivqa
