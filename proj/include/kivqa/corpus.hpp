// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kivqa/matrix.hpp"

namespace kivqa {

// One KI-VQA instance. answers is a multiset (annotator multiplicity kept);
// relevant_passage_ids is a set stored sorted; hard_negative_ids keeps the
// miner's ranking order.
struct QueryRecord {
    std::string query_id;
    std::string question;
    std::string image_id;
    std::vector<std::string> answers;
    std::vector<std::string> relevant_passage_ids;
    std::vector<std::string> hard_negative_ids;

    bool is_relevant(const std::string& pid) const;
};

struct Passage {
    std::string passage_id;
    std::string text;
};

// Region features plus normalized boxes for one image. boxes rows are
// (x1, y1, x2, y2) with 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1.
struct VisualInput {
    Mat features;  // num_regions x D
    Mat boxes;     // num_regions x 4

    int num_regions() const { return features.rows; }
    int feature_dim() const { return features.cols; }
    void validate(const std::string& context) const;
};

// All-zero features with whole-image boxes; the masked visual input used on
// the passage side of the multi-modal encoder.
VisualInput masked_visual_input(int num_regions, int feature_dim);

struct SplitManifest {
    std::string split_name;  // train | validation | test
    std::vector<std::string> query_ids;
};

class PassageStore {
  public:
    void add(Passage p);
    const Passage& by_id(const std::string& id) const;
    bool contains(const std::string& id) const;
    const Passage& at(std::size_t i) const { return passages_[i]; }
    std::size_t size() const { return passages_.size(); }
    const std::vector<Passage>& all() const { return passages_; }

  private:
    std::vector<Passage> passages_;
    std::map<std::string, std::size_t> index_;
};

using CaptionStore = std::map<std::string, std::string>;
using VisualStore = std::map<std::string, VisualInput>;
using ObjectStore = std::map<std::string, std::vector<std::string>>;

// --- line-delimited stores (one JSON object per line) ---

std::vector<QueryRecord> ingest_questions(const std::string& path, const std::string& split);
PassageStore ingest_passages(const std::string& path);
CaptionStore ingest_captions(const std::string& path);
ObjectStore ingest_objects(const std::string& path);

void write_questions(const std::string& path, const std::vector<QueryRecord>& records);
void write_passages(const std::string& path, const PassageStore& store);
void write_captions(const std::string& path, const CaptionStore& store);
void write_objects(const std::string& path, const ObjectStore& store);

// --- framed binary visual-feature store ---
// header: magic "VFEA", u32 version, u32 num_regions, u32 D, u64 count;
// then per image: u32 id_len, id bytes, features (num_regions*D f64 LE),
// boxes (num_regions*4 f64 LE).

VisualStore ingest_visual_features(const std::string& path,
                                   int expected_num_regions = -1,
                                   int expected_feature_dim = -1);
void write_visual_features(const std::string& path, const VisualStore& store);

SplitManifest read_split_manifest(const std::string& path);
void write_split_manifest(const std::string& path, const SplitManifest& manifest);

// Cross-store referential integrity; throws DataError naming the first
// violation. Captions/visuals/objects are checked only when supplied.
void validate_references(const std::vector<QueryRecord>& records,
                         const PassageStore& passages,
                         const CaptionStore* captions,
                         const VisualStore* visuals,
                         const ObjectStore* objects);

// --- synthetic data ---

struct SyntheticSpec {
    std::uint64_t seed = 7;
    int n_queries = 200;
    int n_passages = 1000;
    int vocab_size = 600;  // filler word pool
    int feature_dim = 8;
    int num_regions = 36;
    double train_frac = 0.70;
    double val_frac = 0.15;
};

struct SyntheticData {
    std::vector<QueryRecord> queries;  // ordered: train, then validation, then test
    SplitManifest train, validation, test;
    PassageStore passages;
    VisualStore visuals;
    CaptionStore captions;
    ObjectStore objects;
};

// Pure function of its spec. Every query has exactly one relevant passage
// whose tokens correlate with the query's caption tokens and whose image
// features encode the same topics.
SyntheticData generate_synthetic_dataset(const SyntheticSpec& spec);

// Standard artifact filenames inside a corpus directory.
struct CorpusPaths {
    std::string dir;
    std::string questions(const std::string& split) const { return dir + "/questions_" + split + ".jsonl"; }
    std::string passages() const { return dir + "/passages.jsonl"; }
    std::string captions() const { return dir + "/captions.jsonl"; }
    std::string features() const { return dir + "/features.bin"; }
    std::string objects() const { return dir + "/objects.jsonl"; }
    std::string split_manifest(const std::string& split) const { return dir + "/split_" + split + ".json"; }
};

void write_synthetic(const CorpusPaths& paths, const SyntheticData& data);

}  // namespace kivqa
