// SPDX-License-Identifier: Apache-2.0

#include "kivqa/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "kivqa/errors.hpp"

namespace kivqa {

namespace {
inline bool word_char(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}
inline char lower(unsigned char c) {
    return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
}
}  // namespace

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (word_char(c)) {
            cur.push_back(lower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Vocab::Vocab() {
    id_to_token_ = {"[PAD]", "[CLS]", "[SEP]", "[UNK]", "[BOS]", "[EOS]", "[Q]", "[CTX]"};
    for (int i = 0; i < static_cast<int>(id_to_token_.size()); ++i)
        token_to_id_[id_to_token_[i]] = i;
}

Vocab Vocab::build(const std::vector<std::string>& corpus_texts) {
    std::set<std::string> words;
    for (const auto& text : corpus_texts)
        for (auto& w : tokenize_words(text)) words.insert(std::move(w));
    Vocab v;
    for (const auto& w : words) {
        v.token_to_id_[w] = static_cast<int>(v.id_to_token_.size());
        v.id_to_token_.push_back(w);
    }
    return v;
}

Vocab Vocab::from_tokens(std::vector<std::string> toks) {
    Vocab v;
    KIVQA_CHECK(toks.size() >= Special::kFirstWordId, "vocab: token table too short");
    for (int i = 0; i < Special::kFirstWordId; ++i)
        KIVQA_CHECK(toks[i] == v.id_to_token_[i], "vocab: reserved token mismatch at ", i);
    v.id_to_token_ = std::move(toks);
    v.token_to_id_.clear();
    for (int i = 0; i < static_cast<int>(v.id_to_token_.size()); ++i)
        v.token_to_id_[v.id_to_token_[i]] = i;
    return v;
}

std::vector<int> Vocab::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : tokenize_words(text)) ids.push_back(id_of(w));
    return ids;
}

int Vocab::id_of(const std::string& word) const {
    auto it = token_to_id_.find(word);
    return it == token_to_id_.end() ? Special::kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
    KIVQA_CHECK(id >= 0 && id < size(), "vocab: id ", id, " out of range");
    return id_to_token_[id];
}

std::string Vocab::decode_words(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < Special::kFirstWordId) continue;
        if (!out.empty()) out.push_back(' ');
        out += token(id);
    }
    return out;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(cat("cannot open file for hashing: ", path));
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        const std::streamsize got = in.gcount();
        if (got > 0) h = fnv1a(buf, static_cast<std::size_t>(got), h);
    }
    return h;
}

}  // namespace kivqa
