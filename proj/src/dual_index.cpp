// SPDX-License-Identifier: Apache-2.0

#include "kivqa/dual_index.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kivqa/binio.hpp"
#include "kivqa/kernels.hpp"
#include "kivqa/parallel.hpp"

namespace kivqa {

DualEmbedding concat_dual(const EncoderOutput& e_T, const EncoderOutput& e_MM) {
    KIVQA_CHECK(e_T.path == EncodingPath::T && e_MM.path == EncodingPath::MM,
                "concat_dual: expected (T, MM) pairing, got (", path_name(e_T.path), ", ",
                path_name(e_MM.path), ")");
    DualEmbedding d;
    d.d_T = e_T.dim();
    d.d_MM = e_MM.dim();
    d.v.reserve(d.d_T + d.d_MM);
    d.v.insert(d.v.end(), e_T.embedding.begin(), e_T.embedding.end());
    d.v.insert(d.v.end(), e_MM.embedding.begin(), e_MM.embedding.end());
    return d;
}

FlatIndex FlatIndex::build(const IndexBuildInputs& in) {
    KIVQA_CHECK(in.passages && in.text_path && in.mm_path && in.vocab, "index build: missing inputs");
    KIVQA_CHECK(in.text_path->path() == EncodingPath::T && in.mm_path->path() == EncodingPath::MM,
                "index build: embedder paths must be (T, MM)");
    FlatIndex idx;
    idx.d_T_ = in.text_path->dim();
    idx.d_MM_ = in.mm_path->dim();
    idx.fp_T_ = in.fingerprint_T;
    idx.fp_MM_ = in.fingerprint_MM;
    const std::size_t n = in.passages->size();
    if (n == 0) throw DataError("index build: empty passage collection");
    idx.rows_ = Mat(static_cast<int>(n), idx.d_T_ + idx.d_MM_);
    idx.ids_.resize(n);

    const VisualInput masked = masked_visual_input(in.num_regions, in.feature_dim);
    auto fill_row = [&](std::size_t i) {
        const Passage& p = in.passages->at(i);
        const TextSequence seq = truncate_to(in.vocab->encode(p.text), in.max_input_tokens);
        const auto et = in.text_path->embed(seq, nullptr);
        const auto em = in.mm_path->embed(seq, &masked);
        double* row = idx.rows_.row(static_cast<int>(i));
        std::copy(et.begin(), et.end(), row);
        std::copy(em.begin(), em.end(), row + idx.d_T_);
        idx.ids_[i] = p.passage_id;
        return std::pair<int, int>{static_cast<int>(et.size()), static_cast<int>(em.size())};
    };
    // first row built serially so an embedder/metadata drift fails before the
    // worker threads start
    const auto [bt, bm] = fill_row(0);
    if (bt != idx.d_T_ || bm != idx.d_MM_)
        throw DataError(cat("index build: embedder produced ", bt, "+", bm,
                            " dims, metadata says ", idx.d_T_, "+", idx.d_MM_));
    if (n > 1)
        parallel_for(n - 1, in.threads, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) fill_row(i + 1);
        });
    return idx;
}

namespace {
RankedList top_k(const std::vector<std::string>& ids, const std::vector<double>& scores, int k) {
    const std::size_t n = ids.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    const std::size_t depth = std::min<std::size_t>(k, n);
    std::partial_sort(order.begin(), order.begin() + depth, order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return ids[a] < ids[b];
                      });
    RankedList out;
    out.reserve(depth);
    for (std::size_t r = 0; r < depth; ++r) out.push_back({ids[order[r]], scores[order[r]]});
    return out;
}
}  // namespace

RankedList FlatIndex::search(const double* query, int dim, int k) const {
    return search_columns(query, 0, dim, k);
}

RankedList FlatIndex::search(const DualEmbedding& query, int k) const {
    return search_columns(query.v.data(), 0, static_cast<int>(query.v.size()), k);
}

RankedList FlatIndex::search_columns(const double* query, int col0, int dim, int k) const {
    KIVQA_CHECK(k >= 1, "index search: k must be >= 1");
    KIVQA_CHECK(col0 >= 0 && col0 + dim <= rows_.cols, "index search: query dimension ", dim,
                " at column ", col0, " does not fit index width ", rows_.cols);
    std::vector<double> scores(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i)
        scores[i] = kernels::dot(query, rows_.row(static_cast<int>(i)) + col0, dim);
    return top_k(ids_, scores, k);
}

std::pair<double, double> FlatIndex::mean_half_norms() const {
    double nt = 0.0, nm = 0.0;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        const double* row = rows_.row(static_cast<int>(i));
        nt += std::sqrt(kernels::dot(row, row, d_T_));
        nm += std::sqrt(kernels::dot(row + d_T_, row + d_T_, d_MM_));
    }
    const double n = static_cast<double>(ids_.size());
    return {nt / n, nm / n};
}

namespace {
constexpr char kIndexMagic[4] = {'K', 'V', 'I', 'X'};
constexpr std::uint32_t kIndexVersion = 1;
}  // namespace

void FlatIndex::save(const std::string& path) const {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(cat("cannot write index ", path));
    binio::put_bytes(out, kIndexMagic, 4);
    binio::put_u32(out, kIndexVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(d_T_));
    binio::put_u32(out, static_cast<std::uint32_t>(d_MM_));
    binio::put_u64(out, fp_T_);
    binio::put_u64(out, fp_MM_);
    binio::put_u64(out, ids_.size());
    for (const auto& id : ids_) binio::put_string(out, id);
    binio::put_mat(out, rows_);
    if (!out) throw DataError(cat("write failure on index ", path));
}

FlatIndex FlatIndex::load(const std::string& path) {
    binio::Reader rd(path);
    rd.expect_magic(kIndexMagic);
    const auto version = rd.u32("version");
    if (version != kIndexVersion) throw DataError(cat(path, ": unsupported index version ", version));
    FlatIndex idx;
    idx.d_T_ = static_cast<int>(rd.u32("d_T"));
    idx.d_MM_ = static_cast<int>(rd.u32("d_MM"));
    idx.fp_T_ = rd.u64("fingerprint_T");
    idx.fp_MM_ = rd.u64("fingerprint_MM");
    const auto n = rd.u64("row count");
    idx.ids_.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) idx.ids_.push_back(rd.str("passage_id"));
    idx.rows_ = rd.mat("rows");
    if (idx.rows_.rows != static_cast<int>(n) || idx.rows_.cols != idx.d_T_ + idx.d_MM_)
        throw DataError(cat(path, ": row matrix ", idx.rows_.rows, "x", idx.rows_.cols,
                            " does not match ", n, " ids and width ", idx.d_T_ + idx.d_MM_));
    return idx;
}

void write_run_file(const std::string& path,
                    const std::vector<std::pair<std::string, RankedList>>& runs,
                    const std::string& tag) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(cat("cannot write run file ", path));
    out.precision(9);
    for (const auto& [qid, list] : runs) {
        int rank = 1;
        for (const auto& sp : list)
            out << qid << " Q0 " << sp.passage_id << ' ' << rank++ << ' ' << sp.score << ' ' << tag
                << '\n';
    }
}

std::vector<std::pair<std::string, RankedList>> read_run_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(cat("cannot open run file ", path));
    std::vector<std::pair<std::string, RankedList>> runs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string qid, q0, pid, tag;
        int rank;
        double score;
        if (!(ls >> qid >> q0 >> pid >> rank >> score >> tag))
            throw DataError(cat(path, ": line ", lineno, ": malformed run line"));
        if (runs.empty() || runs.back().first != qid) runs.push_back({qid, {}});
        runs.back().second.push_back({pid, score});
    }
    return runs;
}

}  // namespace kivqa
