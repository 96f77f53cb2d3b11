// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>
#include <vector>

namespace kivqa {

// One query's ranked passage ids plus its relevance judgments.
struct JudgedQuery {
    std::vector<std::string> ranked;  // duplicate-free, best first
    std::set<std::string> relevant;
};

using RetrievalJudgedRun = std::vector<JudgedQuery>;

// Mean over queries of 1/rank of the first relevant passage within the top
// k, 0 when none appears.
double mrr_at_k(const RetrievalJudgedRun& run, int k);

// Mean over queries of |relevant in top k| / k; short lists count as padded
// with non-relevant entries.
double precision_at_k(const RetrievalJudgedRun& run, int k);

// Fraction of queries with at least one relevant passage in the top k.
double hit_at_k(const RetrievalJudgedRun& run, int k);

// Answer normalization shared by exact match and the VQA-style accuracy:
// lowercase, strip punctuation, drop standalone articles (a, an, the),
// collapse whitespace.
std::string normalize_answer(const std::string& answer);

struct AnswerJudgment {
    std::string prediction;
    std::vector<std::string> references;  // multiset, annotator multiplicity kept
};

// Mean of min(matching reference annotations / 3, 1) after normalization.
double vqa_accuracy(const std::vector<AnswerJudgment>& judgments);

// Mean of [normalized prediction equals any normalized reference].
double exact_match(const std::vector<AnswerJudgment>& judgments);

}  // namespace kivqa
