// SPDX-License-Identifier: Apache-2.0

#include "kivqa/corpus.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include <json.hpp>

#include "kivqa/binio.hpp"
#include "kivqa/tokenizer.hpp"

namespace kivqa {

using nlohmann::json;

bool QueryRecord::is_relevant(const std::string& pid) const {
    return std::binary_search(relevant_passage_ids.begin(), relevant_passage_ids.end(), pid);
}

void VisualInput::validate(const std::string& context) const {
    if (boxes.rows != features.rows || boxes.cols != 4)
        throw DataError(cat(context, ": boxes shape ", boxes.rows, "x", boxes.cols,
                            " does not match ", features.rows, " regions"));
    if (!features.all_finite())
        throw DataError(cat(context, ": non-finite region feature"));
    for (int r = 0; r < boxes.rows; ++r) {
        const double x1 = boxes.at(r, 0), y1 = boxes.at(r, 1);
        const double x2 = boxes.at(r, 2), y2 = boxes.at(r, 3);
        const bool ok = x1 >= 0.0 && x1 <= x2 && x2 <= 1.0 && y1 >= 0.0 && y1 <= y2 && y2 <= 1.0;
        if (!ok)
            throw DataError(cat(context, ": region ", r, " box (", x1, ", ", y1, ", ", x2, ", ", y2,
                                ") violates 0 <= x1 <= x2 <= 1, 0 <= y1 <= y2 <= 1"));
    }
}

VisualInput masked_visual_input(int num_regions, int feature_dim) {
    VisualInput v;
    v.features = Mat(num_regions, feature_dim);
    v.boxes = Mat(num_regions, 4);
    for (int r = 0; r < num_regions; ++r) {
        v.boxes.at(r, 2) = 1.0;
        v.boxes.at(r, 3) = 1.0;
    }
    return v;
}

void PassageStore::add(Passage p) {
    if (p.text.empty()) throw DataError(cat("passage ", p.passage_id, ": empty text"));
    auto [it, inserted] = index_.emplace(p.passage_id, passages_.size());
    if (!inserted) throw DataError(cat("duplicate passage_id ", p.passage_id));
    passages_.push_back(std::move(p));
}

const Passage& PassageStore::by_id(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError(cat("unknown passage_id ", id));
    return passages_[it->second];
}

bool PassageStore::contains(const std::string& id) const { return index_.count(id) != 0; }

namespace {

// Applies fn to each non-blank line; parse failures carry the 1-based line number.
void for_each_json_line(const std::string& path,
                        const std::function<void(std::size_t, const json&)>& fn) {
    std::ifstream in(path);
    if (!in) throw DataError(cat("cannot open ", path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(cat(path, ": line ", lineno, ": malformed record: ", e.what()));
        }
        if (!j.is_object())
            throw DataError(cat(path, ": line ", lineno, ": record is not an object"));
        fn(lineno, j);
    }
}

std::string need_string(const json& j, const char* field, const std::string& path, std::size_t lineno) {
    auto it = j.find(field);
    if (it == j.end() || !it->is_string() || it->get<std::string>().empty())
        throw DataError(cat(path, ": line ", lineno, ": missing or empty mandatory field '", field, "'"));
    return it->get<std::string>();
}

std::vector<std::string> string_list(const json& j, const char* field, const std::string& path,
                                     std::size_t lineno) {
    std::vector<std::string> out;
    auto it = j.find(field);
    if (it == j.end()) return out;
    if (!it->is_array())
        throw DataError(cat(path, ": line ", lineno, ": field '", field, "' must be an array"));
    for (const auto& v : *it) {
        if (!v.is_string())
            throw DataError(cat(path, ": line ", lineno, ": field '", field, "' must hold strings"));
        out.push_back(v.get<std::string>());
    }
    return out;
}

void write_lines(const std::string& path, const std::vector<json>& records) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(cat("cannot write ", path));
    for (const auto& j : records) out << j.dump() << '\n';
}

}  // namespace

std::vector<QueryRecord> ingest_questions(const std::string& path, const std::string& split) {
    std::vector<QueryRecord> records;
    std::set<std::string> seen;
    const bool training = split == "train";
    for_each_json_line(path, [&](std::size_t lineno, const json& j) {
        QueryRecord r;
        r.query_id = need_string(j, "query_id", path, lineno);
        r.question = need_string(j, "question", path, lineno);
        r.image_id = need_string(j, "image_id", path, lineno);
        r.answers = string_list(j, "answers", path, lineno);
        r.relevant_passage_ids = string_list(j, "relevant_passage_ids", path, lineno);
        r.hard_negative_ids = string_list(j, "hard_negative_ids", path, lineno);
        if (!seen.insert(r.query_id).second)
            throw DataError(cat(path, ": line ", lineno, ": duplicate query_id ", r.query_id));
        if (r.answers.empty())
            throw DataError(cat(path, ": line ", lineno, ": record needs at least one answer"));
        std::sort(r.relevant_passage_ids.begin(), r.relevant_passage_ids.end());
        r.relevant_passage_ids.erase(
            std::unique(r.relevant_passage_ids.begin(), r.relevant_passage_ids.end()),
            r.relevant_passage_ids.end());
        if (training && r.relevant_passage_ids.empty())
            throw DataError(cat(path, ": line ", lineno, ": training record ", r.query_id,
                                " has no relevant passages"));
        for (const auto& neg : r.hard_negative_ids)
            if (r.is_relevant(neg))
                throw DataError(cat(path, ": line ", lineno, ": passage ", neg,
                                    " is both relevant and a hard negative"));
        records.push_back(std::move(r));
    });
    return records;
}

PassageStore ingest_passages(const std::string& path) {
    PassageStore store;
    for_each_json_line(path, [&](std::size_t lineno, const json& j) {
        Passage p;
        p.passage_id = need_string(j, "passage_id", path, lineno);
        auto it = j.find("text");
        if (it == j.end() || !it->is_string())
            throw DataError(cat(path, ": line ", lineno, ": missing or empty mandatory field 'text'"));
        p.text = it->get<std::string>();
        if (p.text.empty())
            throw DataError(cat(path, ": line ", lineno, ": passage text must be non-empty"));
        try {
            store.add(std::move(p));
        } catch (const DataError& e) {
            throw DataError(cat(path, ": line ", lineno, ": ", e.what()));
        }
    });
    return store;
}

CaptionStore ingest_captions(const std::string& path) {
    CaptionStore store;
    for_each_json_line(path, [&](std::size_t lineno, const json& j) {
        const std::string id = need_string(j, "image_id", path, lineno);
        auto it = j.find("caption");
        if (it == j.end() || !it->is_string())
            throw DataError(cat(path, ": line ", lineno, ": missing mandatory field 'caption'"));
        if (!store.emplace(id, it->get<std::string>()).second)
            throw DataError(cat(path, ": line ", lineno, ": duplicate image_id ", id));
    });
    return store;
}

ObjectStore ingest_objects(const std::string& path) {
    ObjectStore store;
    for_each_json_line(path, [&](std::size_t lineno, const json& j) {
        const std::string id = need_string(j, "image_id", path, lineno);
        auto names = string_list(j, "objects", path, lineno);
        if (!store.emplace(id, std::move(names)).second)
            throw DataError(cat(path, ": line ", lineno, ": duplicate image_id ", id));
    });
    return store;
}

void write_questions(const std::string& path, const std::vector<QueryRecord>& records) {
    std::vector<json> lines;
    lines.reserve(records.size());
    for (const auto& r : records) {
        json j;
        j["query_id"] = r.query_id;
        j["question"] = r.question;
        j["image_id"] = r.image_id;
        j["answers"] = r.answers;
        j["relevant_passage_ids"] = r.relevant_passage_ids;
        if (!r.hard_negative_ids.empty()) j["hard_negative_ids"] = r.hard_negative_ids;
        lines.push_back(std::move(j));
    }
    write_lines(path, lines);
}

void write_passages(const std::string& path, const PassageStore& store) {
    std::vector<json> lines;
    for (const auto& p : store.all()) lines.push_back(json{{"passage_id", p.passage_id}, {"text", p.text}});
    write_lines(path, lines);
}

void write_captions(const std::string& path, const CaptionStore& store) {
    std::vector<json> lines;
    for (const auto& [id, cap] : store) lines.push_back(json{{"image_id", id}, {"caption", cap}});
    write_lines(path, lines);
}

void write_objects(const std::string& path, const ObjectStore& store) {
    std::vector<json> lines;
    for (const auto& [id, names] : store) lines.push_back(json{{"image_id", id}, {"objects", names}});
    write_lines(path, lines);
}

namespace {
constexpr char kVisualMagic[4] = {'V', 'F', 'E', 'A'};
constexpr std::uint32_t kVisualVersion = 1;
}  // namespace

VisualStore ingest_visual_features(const std::string& path, int expected_num_regions,
                                   int expected_feature_dim) {
    binio::Reader rd(path);
    rd.expect_magic(kVisualMagic);
    const auto version = rd.u32("version");
    if (version != kVisualVersion)
        throw DataError(cat(path, ": unsupported visual store version ", version));
    const int num_regions = static_cast<int>(rd.u32("num_regions"));
    const int dim = static_cast<int>(rd.u32("feature_dim"));
    if (expected_num_regions >= 0 && num_regions != expected_num_regions)
        throw DataError(cat(path, ": file has ", num_regions, " regions per image, configured ",
                            expected_num_regions));
    if (expected_feature_dim >= 0 && dim != expected_feature_dim)
        throw DataError(cat(path, ": file has feature dim ", dim, ", configured ", expected_feature_dim));
    const auto count = rd.u64("image count");
    VisualStore store;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string id = rd.str("image_id");
        VisualInput v;
        v.features = Mat(num_regions, dim);
        rd.need(v.features.data(), v.features.size() * sizeof(double), "features");
        v.boxes = Mat(num_regions, 4);
        rd.need(v.boxes.data(), v.boxes.size() * sizeof(double), "boxes");
        v.validate(cat(path, ": image ", id));
        if (!store.emplace(id, std::move(v)).second)
            throw DataError(cat(path, ": duplicate image_id ", id));
    }
    return store;
}

void write_visual_features(const std::string& path, const VisualStore& store) {
    int num_regions = -1, dim = -1;
    for (const auto& [id, v] : store) {
        v.validate(cat("visual store: image ", id));
        if (num_regions < 0) {
            num_regions = v.num_regions();
            dim = v.feature_dim();
        } else if (v.num_regions() != num_regions || v.feature_dim() != dim) {
            throw DataError(cat("visual store: image ", id, " shape ", v.num_regions(), "x",
                                v.feature_dim(), " differs from ", num_regions, "x", dim));
        }
    }
    if (num_regions < 0) throw DataError("visual store: refusing to write an empty store");
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(cat("cannot write ", path));
    binio::put_bytes(out, kVisualMagic, 4);
    binio::put_u32(out, kVisualVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(num_regions));
    binio::put_u32(out, static_cast<std::uint32_t>(dim));
    binio::put_u64(out, store.size());
    for (const auto& [id, v] : store) {
        binio::put_string(out, id);
        binio::put_bytes(out, v.features.data(), v.features.size() * sizeof(double));
        binio::put_bytes(out, v.boxes.data(), v.boxes.size() * sizeof(double));
    }
}

SplitManifest read_split_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(cat("cannot open ", path));
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError(cat(path, ": malformed split manifest: ", e.what()));
    }
    SplitManifest m;
    m.split_name = need_string(j, "split_name", path, 1);
    m.query_ids = string_list(j, "query_ids", path, 1);
    return m;
}

void write_split_manifest(const std::string& path, const SplitManifest& manifest) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(cat("cannot write ", path));
    json j{{"split_name", manifest.split_name}, {"query_ids", manifest.query_ids}};
    out << j.dump(2) << '\n';
}

void validate_references(const std::vector<QueryRecord>& records, const PassageStore& passages,
                         const CaptionStore* captions, const VisualStore* visuals,
                         const ObjectStore* objects) {
    for (const auto& r : records) {
        for (const auto& pid : r.relevant_passage_ids)
            if (!passages.contains(pid))
                throw DataError(cat("query ", r.query_id, ": relevant passage ", pid, " not in collection"));
        for (const auto& pid : r.hard_negative_ids)
            if (!passages.contains(pid))
                throw DataError(cat("query ", r.query_id, ": hard negative ", pid, " not in collection"));
        if (captions && !captions->count(r.image_id))
            throw DataError(cat("query ", r.query_id, ": no caption for image ", r.image_id));
        if (visuals && !visuals->count(r.image_id))
            throw DataError(cat("query ", r.query_id, ": no visual features for image ", r.image_id));
        if (objects && !objects->count(r.image_id))
            throw DataError(cat("query ", r.query_id, ": no object names for image ", r.image_id));
    }
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

namespace {

std::string zero_pad(int v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

std::vector<double> topic_direction(std::uint64_t seed, int topic, int dim) {
    Rng rng(seed * 1000003ull + static_cast<std::uint64_t>(topic) + 17ull);
    std::vector<double> mu(dim);
    for (double& v : mu) v = rng.gaussian();
    return mu;
}

}  // namespace

SyntheticData generate_synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.n_queries < 1 || spec.n_passages < spec.n_queries)
        throw ConfigError(cat("synthetic data needs n_passages >= n_queries >= 1, got ",
                              spec.n_passages, " / ", spec.n_queries));
    if (spec.vocab_size < 32 || spec.feature_dim < 1 || spec.num_regions < 1)
        throw ConfigError("synthetic data: vocab_size >= 32, feature_dim >= 1, num_regions >= 1 required");

    Rng rng(spec.seed);
    const int n_topics = std::max(12, spec.n_queries * 3 / 10);
    const int n_answers = std::max(8, spec.n_queries / 5);

    std::vector<std::string> topic_words(n_topics);
    for (int t = 0; t < n_topics; ++t) topic_words[t] = "topic" + zero_pad(t, 3);
    std::vector<std::string> answer_words(n_answers);
    for (int a = 0; a < n_answers; ++a) answer_words[a] = "ans" + zero_pad(a, 3);
    std::vector<std::string> filler(spec.vocab_size);
    for (int w = 0; w < spec.vocab_size; ++w) filler[w] = "w" + zero_pad(w, 4);

    auto pick_filler = [&]() -> const std::string& { return filler[rng.below(filler.size())]; };

    // distinct topic triples per query
    std::set<std::array<int, 3>> used;
    std::vector<std::array<int, 3>> triples(spec.n_queries);
    for (int i = 0; i < spec.n_queries; ++i) {
        while (true) {
            int a = static_cast<int>(rng.below(n_topics));
            int b = static_cast<int>(rng.below(n_topics));
            int c = static_cast<int>(rng.below(n_topics));
            if (a == b || a == c || b == c) continue;
            std::array<int, 3> key{a, b, c};
            std::sort(key.begin(), key.end());
            if (!used.insert(key).second) continue;
            triples[i] = {a, b, c};
            break;
        }
    }

    SyntheticData data;
    std::vector<std::string> relevant_texts(spec.n_queries);

    for (int i = 0; i < spec.n_queries; ++i) {
        const auto [t1, t2, t3] = triples[i];
        const std::string& w1 = topic_words[t1];
        const std::string& w2 = topic_words[t2];
        const std::string& w3 = topic_words[t3];
        const std::string& ans = answer_words[i % n_answers];

        QueryRecord q;
        q.query_id = "q" + zero_pad(i, 4);
        q.image_id = "i" + zero_pad(i, 4);
        // the question names two topics; the caption supplies the third
        q.question = cat("what kind of ", w1, " ", w2, " is shown here");
        q.relevant_passage_ids = {"p" + zero_pad(i, 4)};
        switch (i % 3) {
            case 0: q.answers = {ans, ans, ans}; break;
            case 1: q.answers = {ans, ans, answer_words[(i + 1) % n_answers]}; break;
            default: q.answers = {ans}; break;
        }
        data.captions[q.image_id] = cat("a photo of ", w2, " and ", w3, " together");
        data.objects[q.image_id] = {w1, w2, w3, pick_filler(), pick_filler()};

        std::string text = cat("the ", w1, " ", w2, " ", w3, " is known for");
        for (int f = 0; f < 6; ++f) text += " " + pick_filler();
        text += cat(" the answer is ", ans, " indeed ", w1, " ", w2, " ", w3);
        relevant_texts[i] = text;

        // region features point at the mean of the three topic directions
        VisualInput v;
        v.features = Mat(spec.num_regions, spec.feature_dim);
        v.boxes = Mat(spec.num_regions, 4);
        auto m1 = topic_direction(spec.seed, t1, spec.feature_dim);
        auto m2 = topic_direction(spec.seed, t2, spec.feature_dim);
        auto m3 = topic_direction(spec.seed, t3, spec.feature_dim);
        for (int r = 0; r < spec.num_regions; ++r) {
            for (int dcol = 0; dcol < spec.feature_dim; ++dcol)
                v.features.at(r, dcol) =
                    (m1[dcol] + m2[dcol] + m3[dcol]) / 3.0 + 0.25 * rng.gaussian();
            const double x1 = 0.5 * rng.uniform();
            const double y1 = 0.5 * rng.uniform();
            v.boxes.at(r, 0) = x1;
            v.boxes.at(r, 1) = y1;
            v.boxes.at(r, 2) = x1 + (1.0 - x1) * rng.uniform();
            v.boxes.at(r, 3) = y1 + (1.0 - y1) * rng.uniform();
        }
        data.visuals[q.image_id] = std::move(v);
        data.queries.push_back(std::move(q));
    }

    for (int i = 0; i < spec.n_queries; ++i)
        data.passages.add({"p" + zero_pad(i, 4), relevant_texts[i]});
    // distractors carry at most two topic words so token overlap with any
    // query's triple stays strictly below the relevant passage's three
    for (int i = spec.n_queries; i < spec.n_passages; ++i) {
        const std::string& ta = topic_words[rng.below(n_topics)];
        const std::string& tb = topic_words[rng.below(n_topics)];
        std::string text = cat("the ", ta, " near ", tb, " area");
        for (int f = 0; f < 9; ++f) text += " " + pick_filler();
        text += cat(" the answer is ", answer_words[rng.below(n_answers)]);
        data.passages.add({"p" + zero_pad(i, 4), text});
    }

    const int n_train = std::max(1, static_cast<int>(spec.n_queries * spec.train_frac));
    const int n_val = std::max(spec.n_queries > 1 ? 1 : 0,
                               static_cast<int>(spec.n_queries * spec.val_frac));
    data.train.split_name = "train";
    data.validation.split_name = "validation";
    data.test.split_name = "test";
    for (int i = 0; i < spec.n_queries; ++i) {
        const std::string& id = data.queries[i].query_id;
        if (i < n_train) data.train.query_ids.push_back(id);
        else if (i < n_train + n_val) data.validation.query_ids.push_back(id);
        else data.test.query_ids.push_back(id);
    }
    return data;
}

void write_synthetic(const CorpusPaths& paths, const SyntheticData& data) {
    std::filesystem::create_directories(paths.dir);
    auto in_split = [](const SplitManifest& m, const std::string& id) {
        return std::find(m.query_ids.begin(), m.query_ids.end(), id) != m.query_ids.end();
    };
    for (const SplitManifest* m : {&data.train, &data.validation, &data.test}) {
        std::vector<QueryRecord> records;
        for (const auto& q : data.queries)
            if (in_split(*m, q.query_id)) records.push_back(q);
        write_questions(paths.questions(m->split_name), records);
        write_split_manifest(paths.split_manifest(m->split_name), *m);
    }
    write_passages(paths.passages(), data.passages);
    write_captions(paths.captions(), data.captions);
    write_visual_features(paths.features(), data.visuals);
    write_objects(paths.objects(), data.objects);
}

}  // namespace kivqa
