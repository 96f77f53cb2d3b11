// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "kivqa/encoder.hpp"
#include "kivqa/sparse.hpp"

namespace kivqa {

// Concatenation of the two path embeddings (text first); the dual score of
// two such vectors is the sum of the per-path dot products.
struct DualEmbedding {
    std::vector<double> v;
    std::string source_id;
    int d_T = 0;
    int d_MM = 0;
};

// T first, MM second, no rescaling of either half.
DualEmbedding concat_dual(const EncoderOutput& e_T, const EncoderOutput& e_MM);

struct IndexBuildInputs {
    const PassageStore* passages = nullptr;
    const Embedder* text_path = nullptr;
    const Embedder* mm_path = nullptr;
    const Vocab* vocab = nullptr;
    int max_input_tokens = 400;
    int num_regions = 36;
    int feature_dim = 8;
    std::uint64_t fingerprint_T = 0;  // checkpoint hashes recorded as metadata
    std::uint64_t fingerprint_MM = 0;
    int threads = 1;
};

// Exact inner-product index over the 2d dual embeddings. Rows are immutable
// after build; searches are safe to run concurrently.
class FlatIndex {
  public:
    static FlatIndex build(const IndexBuildInputs& in);

    int dim() const { return rows_.cols; }
    int dim_T() const { return d_T_; }
    int dim_MM() const { return d_MM_; }
    std::size_t size() const { return ids_.size(); }
    std::uint64_t fingerprint_T() const { return fp_T_; }
    std::uint64_t fingerprint_MM() const { return fp_MM_; }
    const std::vector<std::string>& ids() const { return ids_; }
    const Mat& matrix() const { return rows_; }

    // Exact top-k by inner product over the full 2d vector; ties break by
    // ascending passage id; k past the collection size returns everything.
    RankedList search(const double* query, int dim, int k) const;
    RankedList search(const DualEmbedding& query, int k) const;

    // Same, restricted to one half of the concatenation (single-path runs).
    RankedList search_columns(const double* query, int col0, int dim, int k) const;

    // Mean L2 norm of each stored half; the scale diagnostic reported by the
    // CLI after a build.
    std::pair<double, double> mean_half_norms() const;

    void save(const std::string& path) const;
    static FlatIndex load(const std::string& path);

  private:
    Mat rows_;  // N x (d_T + d_MM)
    std::vector<std::string> ids_;
    int d_T_ = 0;
    int d_MM_ = 0;
    std::uint64_t fp_T_ = 0;
    std::uint64_t fp_MM_ = 0;
};

// Six-column ranked-run text format: qid Q0 passage_id rank score tag.
void write_run_file(const std::string& path,
                    const std::vector<std::pair<std::string, RankedList>>& runs,
                    const std::string& tag);
std::vector<std::pair<std::string, RankedList>> read_run_file(const std::string& path);

}  // namespace kivqa
