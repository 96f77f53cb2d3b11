// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "kivqa/errors.hpp"
#include "kivqa/matrix.hpp"

// Little-endian framed binary primitives shared by the visual-feature store,
// checkpoints, and the flat index.
namespace kivqa::binio {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts need byte swaps");

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    put_bytes(os, s.data(), s.size());
}

inline void put_mat(std::ostream& os, const Mat& m) {
    put_u32(os, static_cast<std::uint32_t>(m.rows));
    put_u32(os, static_cast<std::uint32_t>(m.cols));
    put_bytes(os, m.data(), m.size() * sizeof(double));
}

struct Reader {
    std::ifstream in;
    std::string path;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw DataError(cat("cannot open ", p));
    }

    void need(void* dst, std::size_t n, const char* what) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw DataError(cat(path, ": truncated while reading ", what));
    }

    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        need(&v, 4, what);
        return v;
    }
    std::uint64_t u64(const char* what) {
        std::uint64_t v;
        need(&v, 8, what);
        return v;
    }
    double f64(const char* what) {
        double v;
        need(&v, 8, what);
        return v;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        if (n > (1u << 24)) throw DataError(cat(path, ": implausible string length for ", what));
        std::string s(n, '\0');
        if (n) need(s.data(), n, what);
        return s;
    }
    Mat mat(const char* what) {
        const std::uint32_t r = u32(what);
        const std::uint32_t c = u32(what);
        if (static_cast<std::uint64_t>(r) * c > (1ull << 31))
            throw DataError(cat(path, ": implausible matrix size for ", what));
        Mat m(static_cast<int>(r), static_cast<int>(c));
        if (m.size()) need(m.data(), m.size() * sizeof(double), what);
        return m;
    }
    void expect_magic(const char magic[4]) {
        char buf[4];
        need(buf, 4, "magic");
        if (std::memcmp(buf, magic, 4) != 0)
            throw DataError(cat(path, ": bad magic (not a ", std::string(magic, 4), " file)"));
    }
    bool at_eof() {
        in.peek();
        return in.eof();
    }
};

}  // namespace kivqa::binio
