// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace kivqa {

// One tokenizer for everything: BM25, the answer normalizer, and the toy
// encoders all split text the same way. Lowercases ASCII and splits on any
// ASCII character that is not alphanumeric; bytes >= 0x80 count as word
// characters so UTF-8 sequences stay intact.
std::vector<std::string> tokenize_words(const std::string& text);

// Reserved token ids. Everything at or above kFirstWordId is a corpus word.
struct Special {
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;   // encoder sentinel, pooled position
    static constexpr int kSep = 2;   // question / caption separator
    static constexpr int kUnk = 3;
    static constexpr int kBos = 4;   // decoder start
    static constexpr int kEos = 5;   // decoder stop
    static constexpr int kQuestionMarker = 6;  // reader template marker "question:"
    static constexpr int kContextMarker = 7;   // reader template marker "context:"
    static constexpr int kFirstWordId = 8;
};

class Vocab {
  public:
    Vocab();

    // Deterministic: words are sorted before ids are assigned.
    static Vocab build(const std::vector<std::string>& corpus_texts);

    // Word ids for a text; unknown words map to kUnk. No specials inserted.
    std::vector<int> encode(const std::string& text) const;

    int id_of(const std::string& word) const;  // kUnk when absent
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(id_to_token_.size()); }

    // Joins word tokens with single spaces; specials are skipped.
    std::string decode_words(const std::vector<int>& ids) const;

    bool operator==(const Vocab& o) const { return id_to_token_ == o.id_to_token_; }

    const std::vector<std::string>& tokens() const { return id_to_token_; }
    static Vocab from_tokens(std::vector<std::string> toks);

  private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

// FNV-1a, used for config/artifact fingerprints.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull);
std::uint64_t fnv1a_file(const std::string& path);

}  // namespace kivqa
