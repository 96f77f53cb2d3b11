// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "kivqa/corpus.hpp"

namespace kivqa {

struct ScoredPassage {
    std::string passage_id;
    double score;
};

// Descending by score, ties broken by ascending passage_id, no duplicates.
using RankedList = std::vector<ScoredPassage>;

void sort_ranked(RankedList& list);

struct Bm25Params {
    double k1 = 0.9;
    double b = 0.4;
};

// Okapi-style BM25 with the non-negative idf variant:
//   idf(t)  = ln(1 + (N - df + 0.5) / (df + 0.5))
//   w(t, d) = idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
// summed over the unique query terms.
class InvertedIndex {
  public:
    static InvertedIndex build(const PassageStore& passages);

    std::size_t collection_size() const { return doc_ids_.size(); }
    double avg_doc_length() const { return avg_doc_length_; }
    int doc_length(std::size_t doc) const { return doc_lengths_[doc]; }
    const std::string& doc_id(std::size_t doc) const { return doc_ids_[doc]; }

    RankedList search(const std::string& query_text, int k, const Bm25Params& params = {}) const;

    // Direct single-document evaluation of the same formula; the search path
    // is tested against this.
    double score_document(const std::string& query_text, std::size_t doc,
                          const Bm25Params& params = {}) const;

  private:
    struct Posting {
        std::uint32_t doc;
        std::uint32_t tf;
    };
    std::map<std::string, std::vector<Posting>> postings_;
    std::vector<int> doc_lengths_;
    std::vector<std::string> doc_ids_;
    double avg_doc_length_ = 0.0;

    double idf(const std::string& term) const;
};

// Fused score per passage = max over the input lists; passages missing from
// a list contribute nothing from it.
RankedList combmax_aggregate(const std::vector<RankedList>& lists);

// Per-object-name BM25 lists ("question + object name" queries) fused with
// combmax. object_names may repeat; each occurrence contributes one list.
RankedList object_expanded_search(const InvertedIndex& index, const std::string& question,
                                  const std::vector<std::string>& object_names, int k,
                                  const Bm25Params& params = {});

// Top-m BM25 results for the record's question with its relevant passages
// removed. Sets *exhausted when fewer than m non-relevant candidates exist.
std::vector<std::string> mine_hard_negatives(const InvertedIndex& index, const QueryRecord& record,
                                             int m, const Bm25Params& params = {},
                                             bool* exhausted = nullptr);

}  // namespace kivqa
