// SPDX-License-Identifier: Apache-2.0

#include "kivqa/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "kivqa/tokenizer.hpp"

namespace kivqa {

void sort_ranked(RankedList& list) {
    std::sort(list.begin(), list.end(), [](const ScoredPassage& a, const ScoredPassage& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.passage_id < b.passage_id;
    });
}

InvertedIndex InvertedIndex::build(const PassageStore& passages) {
    InvertedIndex idx;
    idx.doc_ids_.reserve(passages.size());
    idx.doc_lengths_.reserve(passages.size());
    std::int64_t total_len = 0;
    for (std::size_t d = 0; d < passages.size(); ++d) {
        const Passage& p = passages.at(d);
        idx.doc_ids_.push_back(p.passage_id);
        const auto words = tokenize_words(p.text);
        idx.doc_lengths_.push_back(static_cast<int>(words.size()));
        total_len += static_cast<std::int64_t>(words.size());
        std::map<std::string, std::uint32_t> tf;
        for (const auto& w : words) ++tf[w];
        for (const auto& [term, freq] : tf)
            idx.postings_[term].push_back({static_cast<std::uint32_t>(d), freq});
    }
    idx.avg_doc_length_ = passages.size() ? static_cast<double>(total_len) / passages.size() : 0.0;
    return idx;
}

double InvertedIndex::idf(const std::string& term) const {
    auto it = postings_.find(term);
    const double df = it == postings_.end() ? 0.0 : static_cast<double>(it->second.size());
    const double n = static_cast<double>(collection_size());
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

namespace {
std::set<std::string> unique_terms(const std::string& text) {
    std::set<std::string> out;
    for (auto& w : tokenize_words(text)) out.insert(std::move(w));
    return out;
}

double tf_component(double tf, double doc_len, double avg_len, const Bm25Params& p) {
    return tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * doc_len / avg_len));
}
}  // namespace

RankedList InvertedIndex::search(const std::string& query_text, int k, const Bm25Params& params) const {
    KIVQA_CHECK(k >= 1, "bm25 search: k must be >= 1");
    const auto terms = unique_terms(query_text);
    std::unordered_map<std::uint32_t, double> acc;
    for (const auto& term : terms) {
        auto it = postings_.find(term);
        if (it == postings_.end()) continue;  // absent terms contribute 0 everywhere
        const double w_idf = idf(term);
        for (const Posting& post : it->second) {
            acc[post.doc] += w_idf * tf_component(post.tf, doc_lengths_[post.doc], avg_doc_length_,
                                                  params);
        }
    }
    RankedList out;
    out.reserve(acc.size());
    for (const auto& [doc, s] : acc) out.push_back({doc_ids_[doc], s});
    sort_ranked(out);
    if (static_cast<int>(out.size()) > k) out.resize(k);
    return out;
}

double InvertedIndex::score_document(const std::string& query_text, std::size_t doc,
                                     const Bm25Params& params) const {
    double total = 0.0;
    for (const auto& term : unique_terms(query_text)) {
        auto it = postings_.find(term);
        if (it == postings_.end()) continue;
        double tf = 0.0;
        for (const Posting& post : it->second)
            if (post.doc == doc) {
                tf = post.tf;
                break;
            }
        if (tf == 0.0) continue;
        total += idf(term) * tf_component(tf, doc_lengths_[doc], avg_doc_length_, params);
    }
    return total;
}

RankedList combmax_aggregate(const std::vector<RankedList>& lists) {
    KIVQA_CHECK(!lists.empty(), "combmax: at least one input list required");
    std::map<std::string, double> fused;
    for (const auto& list : lists) {
        for (const auto& sp : list) {
            auto [it, inserted] = fused.emplace(sp.passage_id, sp.score);
            if (!inserted && sp.score > it->second) it->second = sp.score;
        }
    }
    RankedList out;
    out.reserve(fused.size());
    for (const auto& [id, s] : fused) out.push_back({id, s});
    sort_ranked(out);
    return out;
}

RankedList object_expanded_search(const InvertedIndex& index, const std::string& question,
                                  const std::vector<std::string>& object_names, int k,
                                  const Bm25Params& params) {
    KIVQA_CHECK(!object_names.empty(), "object-expanded search: empty object list");
    std::vector<RankedList> lists;
    lists.reserve(object_names.size());
    for (const auto& name : object_names)
        lists.push_back(index.search(question + " " + name, k, params));
    RankedList fused = combmax_aggregate(lists);
    if (static_cast<int>(fused.size()) > k) fused.resize(k);
    return fused;
}

std::vector<std::string> mine_hard_negatives(const InvertedIndex& index, const QueryRecord& record,
                                             int m, const Bm25Params& params, bool* exhausted) {
    KIVQA_CHECK(m >= 1, "mine_hard_negatives: m must be >= 1");
    KIVQA_CHECK(!record.question.empty(), "mine_hard_negatives: record ", record.query_id,
                " has an empty question");
    // rank the full collection, then drop relevant ids
    const RankedList full = index.search(record.question, static_cast<int>(index.collection_size()),
                                         params);
    std::vector<std::string> out;
    for (const auto& sp : full) {
        if (record.is_relevant(sp.passage_id)) continue;
        out.push_back(sp.passage_id);
        if (static_cast<int>(out.size()) == m) break;
    }
    if (exhausted) *exhausted = static_cast<int>(out.size()) < m;
    return out;
}

}  // namespace kivqa
