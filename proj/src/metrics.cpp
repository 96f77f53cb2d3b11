// SPDX-License-Identifier: Apache-2.0

#include "kivqa/metrics.hpp"

#include <algorithm>

#include "kivqa/errors.hpp"
#include "kivqa/tokenizer.hpp"

namespace kivqa {

namespace {
void require_queries(const RetrievalJudgedRun& run, int k) {
    if (run.empty()) throw ContractError("retrieval metrics: empty run");
    if (k < 1) throw ContractError("retrieval metrics: k must be >= 1");
}
}  // namespace

double mrr_at_k(const RetrievalJudgedRun& run, int k) {
    require_queries(run, k);
    double total = 0.0;
    for (const auto& q : run) {
        const int depth = std::min<int>(k, static_cast<int>(q.ranked.size()));
        for (int r = 0; r < depth; ++r) {
            if (q.relevant.count(q.ranked[r])) {
                total += 1.0 / (r + 1);
                break;
            }
        }
    }
    return total / static_cast<double>(run.size());
}

double precision_at_k(const RetrievalJudgedRun& run, int k) {
    require_queries(run, k);
    double total = 0.0;
    for (const auto& q : run) {
        const int depth = std::min<int>(k, static_cast<int>(q.ranked.size()));
        int hits = 0;
        for (int r = 0; r < depth; ++r)
            if (q.relevant.count(q.ranked[r])) ++hits;
        total += static_cast<double>(hits) / k;
    }
    return total / static_cast<double>(run.size());
}

double hit_at_k(const RetrievalJudgedRun& run, int k) {
    require_queries(run, k);
    double total = 0.0;
    for (const auto& q : run) {
        const int depth = std::min<int>(k, static_cast<int>(q.ranked.size()));
        for (int r = 0; r < depth; ++r) {
            if (q.relevant.count(q.ranked[r])) {
                total += 1.0;
                break;
            }
        }
    }
    return total / static_cast<double>(run.size());
}

std::string normalize_answer(const std::string& answer) {
    std::string out;
    for (const auto& w : tokenize_words(answer)) {
        if (w == "a" || w == "an" || w == "the") continue;
        if (!out.empty()) out.push_back(' ');
        out += w;
    }
    return out;
}

namespace {
int matching_references(const AnswerJudgment& j) {
    const std::string pred = normalize_answer(j.prediction);
    int matches = 0;
    for (const auto& ref : j.references)
        if (normalize_answer(ref) == pred) ++matches;
    return matches;
}
}  // namespace

double vqa_accuracy(const std::vector<AnswerJudgment>& judgments) {
    if (judgments.empty()) throw ContractError("vqa_accuracy: empty judgment set");
    double total = 0.0;
    for (const auto& j : judgments) {
        if (j.references.empty()) throw ContractError("vqa_accuracy: judgment without references");
        total += std::min(1.0, matching_references(j) / 3.0);
    }
    return total / static_cast<double>(judgments.size());
}

double exact_match(const std::vector<AnswerJudgment>& judgments) {
    if (judgments.empty()) throw ContractError("exact_match: empty judgment set");
    double total = 0.0;
    for (const auto& j : judgments)
        if (matching_references(j) > 0) total += 1.0;
    return total / static_cast<double>(judgments.size());
}

}  // namespace kivqa
