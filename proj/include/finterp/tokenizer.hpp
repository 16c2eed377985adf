// SPDX-License-Identifier: Apache-2.0
//
// Byte-level BPE tokenizer compatible with the published GPT-2 vocabulary
// files (vocab.json + merges.txt).

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "finterp/error.hpp"

namespace finterp {

using TokenId = std::uint32_t;

class VocabularyError : public FormatError {
public:
    enum class Kind {
        MalformedJson,
        NonIntegerId,
        DuplicateId,
        NonDenseIds,
        MalformedMerge,
        UnknownMergeSymbol,
    };

    VocabularyError(Kind kind, const std::string& what) : FormatError{what}, kind_{kind} {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Half-open byte range [begin, end) into the encoded text.
struct ByteSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    bool operator==(const ByteSpan&) const = default;
};

struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<ByteSpan> offsets;

    std::size_t size() const noexcept { return ids.size(); }
    bool empty() const noexcept { return ids.empty(); }
};

/// GPT-2's reversible map from raw bytes to printable code points.
class ByteEncoder {
public:
    ByteEncoder();

    /// UTF-8 encoding of the code point standing in for `byte`.
    const std::string& encode(std::uint8_t byte) const { return byte_to_utf8_[byte]; }
    char32_t code_point(std::uint8_t byte) const { return byte_to_cp_[byte]; }
    /// Inverse map; returns false when `cp` is not in the alphabet.
    bool decode(char32_t cp, std::uint8_t& byte) const;

private:
    std::array<char32_t, 256> byte_to_cp_{};
    std::array<std::string, 256> byte_to_utf8_{};
    std::unordered_map<char32_t, std::uint8_t> cp_to_byte_;
};

/// Immutable after construction; encode/decode are safe to call concurrently.
class Vocabulary {
public:
    /// Builds and validates a vocabulary from in-memory parts.
    /// Merge pairs are (left, right) symbol strings in byte-encoded form,
    /// ordered by rank. `merge_lines`, when given, holds the source line of
    /// each merge for error messages.
    Vocabulary(std::unordered_map<std::string, TokenId> token_to_id,
               std::vector<std::pair<std::string, std::string>> merges,
               std::span<const std::size_t> merge_lines = {});

    std::size_t size() const noexcept { return id_to_token_.size(); }
    std::size_t merge_count() const noexcept { return merge_count_; }
    const ByteEncoder& byte_encoder() const noexcept { return bytes_; }

    /// Byte-encoded token string for `id` (e.g. "Ġthe").
    const std::string& token(TokenId id) const;
    /// Raw bytes that `id` decodes to.
    const std::string& token_bytes(TokenId id) const;
    /// Lookup by byte-encoded token string.
    bool find(std::string_view token, TokenId& id) const;

    TokenSequence encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

private:
    void bpe(std::string_view piece, std::size_t piece_offset, TokenSequence& out) const;
    int merge_rank(std::string_view left, std::string_view right) const;

    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::vector<std::string> id_to_bytes_;
    std::unordered_map<std::string, int> merge_ranks_;
    std::size_t merge_count_ = 0;
    ByteEncoder bytes_;
};

Vocabulary load_vocabulary(const std::filesystem::path& vocab_path,
                           const std::filesystem::path& merges_path);

/// Parses vocabulary text directly; `source` names the input in errors.
Vocabulary parse_vocabulary(std::string_view vocab_json, std::string_view merges_text,
                            std::string_view source = "<memory>");

/// Splits text into GPT-2 pre-tokens (the pieces BPE runs on), as byte spans.
std::vector<ByteSpan> pretokenize(std::string_view text);

}  // namespace finterp
