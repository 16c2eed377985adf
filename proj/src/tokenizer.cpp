// SPDX-License-Identifier: Apache-2.0

#include "finterp/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>
#include <unicode/uchar.h>
#include <unicode/utf8.h>

namespace finterp {

namespace {

std::string utf8_of(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return out;
}

enum class CharClass { Letter, Number, Space, Other };

struct CodeUnit {
    char32_t cp;  // U+FFFD stand-in for invalid sequences
    std::size_t begin;
    std::size_t end;
    CharClass cls;
};

CharClass classify(UChar32 c) {
    if (c < 0) {
        return CharClass::Other;
    }
    if (u_isUWhiteSpace(c)) {
        return CharClass::Space;
    }
    const auto mask = U_GET_GC_MASK(c);
    if (mask & U_GC_L_MASK) {
        return CharClass::Letter;
    }
    if (mask & U_GC_N_MASK) {
        return CharClass::Number;
    }
    return CharClass::Other;
}

std::vector<CodeUnit> decode_code_points(std::string_view text) {
    std::vector<CodeUnit> units;
    units.reserve(text.size());
    const auto* s = reinterpret_cast<const std::uint8_t*>(text.data());
    const auto length = static_cast<std::int32_t>(text.size());
    std::int32_t i = 0;
    while (i < length) {
        const std::int32_t begin = i;
        UChar32 c = 0;
        U8_NEXT(s, i, length, c);
        units.push_back({c < 0 ? char32_t{0xFFFD} : static_cast<char32_t>(c),
                         static_cast<std::size_t>(begin), static_cast<std::size_t>(i),
                         classify(c)});
    }
    return units;
}

bool is_contraction_tail(const std::vector<CodeUnit>& u, std::size_t i, std::size_t& len) {
    auto at = [&](std::size_t k) -> char32_t { return k < u.size() ? u[k].cp : 0; };
    const char32_t a = at(i + 1);
    if (a == U's' || a == U't' || a == U'm' || a == U'd') {
        len = 2;
        return true;
    }
    const char32_t b = at(i + 2);
    if ((a == U'r' && b == U'e') || (a == U'v' && b == U'e') || (a == U'l' && b == U'l')) {
        len = 3;
        return true;
    }
    return false;
}

}  // namespace

// The GPT-2 split pattern, evaluated by hand:
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
std::vector<ByteSpan> pretokenize(std::string_view text) {
    const auto u = decode_code_points(text);
    const std::size_t n = u.size();
    std::vector<ByteSpan> pieces;

    std::size_t i = 0;
    while (i < n) {
        std::size_t end = i;

        std::size_t contraction = 0;
        if (u[i].cp == U'\'' && is_contraction_tail(u, i, contraction)) {
            end = i + contraction;
        } else {
            const std::size_t body = (u[i].cp == U' ' && i + 1 < n) ? i + 1 : i;
            const CharClass cls = u[body].cls;
            if (cls != CharClass::Space) {
                end = body;
                while (end < n && u[end].cls == cls) {
                    ++end;
                }
            } else {
                std::size_t run = i;
                while (run < n && u[run].cls == CharClass::Space) {
                    ++run;
                }
                if (run == n || run - i == 1) {
                    end = run;
                } else {
                    end = run - 1;
                }
            }
        }
        pieces.push_back({u[i].begin, u[end - 1].end});
        i = end;
    }
    return pieces;
}

ByteEncoder::ByteEncoder() {
    std::array<bool, 256> printable{};
    for (int b = '!'; b <= '~'; ++b) {
        printable[b] = true;
    }
    for (int b = 0xA1; b <= 0xAC; ++b) {
        printable[b] = true;
    }
    for (int b = 0xAE; b <= 0xFF; ++b) {
        printable[b] = true;
    }
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) {
        byte_to_cp_[b] = printable[b] ? static_cast<char32_t>(b) : next++;
        byte_to_utf8_[b] = utf8_of(byte_to_cp_[b]);
        cp_to_byte_.emplace(byte_to_cp_[b], static_cast<std::uint8_t>(b));
    }
}

bool ByteEncoder::decode(char32_t cp, std::uint8_t& byte) const {
    const auto it = cp_to_byte_.find(cp);
    if (it == cp_to_byte_.end()) {
        return false;
    }
    byte = it->second;
    return true;
}

Vocabulary::Vocabulary(std::unordered_map<std::string, TokenId> token_to_id,
                       std::vector<std::pair<std::string, std::string>> merges,
                       std::span<const std::size_t> merge_lines)
    : token_to_id_{std::move(token_to_id)} {
    using Kind = VocabularyError::Kind;

    const std::size_t n = token_to_id_.size();
    std::unordered_map<TokenId, const std::string*> owner;
    owner.reserve(n);
    for (const auto& [token, id] : token_to_id_) {
        const auto [it, inserted] = owner.emplace(id, &token);
        if (!inserted) {
            throw VocabularyError{Kind::DuplicateId, "duplicate vocabulary id " + std::to_string(id) +
                                                         " for tokens \"" + *it->second + "\" and \"" + token + "\""};
        }
    }
    id_to_token_.assign(n, {});
    for (const auto& [id, token] : owner) {
        if (id >= n) {
            throw VocabularyError{Kind::NonDenseIds, "vocabulary ids are not dense: token \"" + *token +
                                                         "\" has id " + std::to_string(id) + " but only " +
                                                         std::to_string(n) + " tokens exist"};
        }
        id_to_token_[id] = *token;
    }

    id_to_bytes_.reserve(n);
    for (const auto& token : id_to_token_) {
        std::string raw;
        for (const auto& unit : decode_code_points(token)) {
            std::uint8_t byte = 0;
            if (bytes_.decode(unit.cp, byte)) {
                raw += static_cast<char>(byte);
            } else {
                raw.append(token, unit.begin, unit.end - unit.begin);
            }
        }
        id_to_bytes_.push_back(std::move(raw));
    }

    merge_ranks_.reserve(merges.size());
    for (std::size_t rank = 0; rank < merges.size(); ++rank) {
        const auto& [left, right] = merges[rank];
        const std::string where = rank < merge_lines.size() ? "merges line " + std::to_string(merge_lines[rank])
                                                             : "merge rank " + std::to_string(rank);
        for (const std::string* sym : {&left, &right}) {
            if (!token_to_id_.contains(*sym)) {
                throw VocabularyError{Kind::UnknownMergeSymbol, where + " (\"" +
                                                                    left + " " + right + "\") references unknown symbol \"" +
                                                                    *sym + "\""};
            }
        }
        if (!token_to_id_.contains(left + right)) {
            throw VocabularyError{Kind::UnknownMergeSymbol, where + " (\"" + left +
                                                                " " + right + "\") produces \"" + left + right +
                                                                "\" which is not in the vocabulary"};
        }
        merge_ranks_.emplace(left + ' ' + right, static_cast<int>(rank));
    }
    merge_count_ = merges.size();
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id >= id_to_token_.size()) {
        throw InvalidArgument{"token id " + std::to_string(id) + " out of range (vocabulary size " +
                              std::to_string(id_to_token_.size()) + ")"};
    }
    return id_to_token_[id];
}

const std::string& Vocabulary::token_bytes(TokenId id) const {
    if (id >= id_to_bytes_.size()) {
        throw InvalidArgument{"token id " + std::to_string(id) + " out of range (vocabulary size " +
                              std::to_string(id_to_bytes_.size()) + ")"};
    }
    return id_to_bytes_[id];
}

bool Vocabulary::find(std::string_view token, TokenId& id) const {
    const auto it = token_to_id_.find(std::string{token});
    if (it == token_to_id_.end()) {
        return false;
    }
    id = it->second;
    return true;
}

int Vocabulary::merge_rank(std::string_view left, std::string_view right) const {
    std::string key;
    key.reserve(left.size() + right.size() + 1);
    key.append(left).append(1, ' ').append(right);
    const auto it = merge_ranks_.find(key);
    return it == merge_ranks_.end() ? -1 : it->second;
}

void Vocabulary::bpe(std::string_view piece, std::size_t piece_offset, TokenSequence& out) const {
    struct Symbol {
        std::string text;
        std::size_t bytes;
    };
    std::vector<Symbol> word;
    word.reserve(piece.size());
    for (const char c : piece) {
        word.push_back({bytes_.encode(static_cast<std::uint8_t>(c)), 1});
    }

    while (word.size() > 1) {
        int best = -1;
        std::size_t best_at = 0;
        for (std::size_t i = 0; i + 1 < word.size(); ++i) {
            const int rank = merge_rank(word[i].text, word[i + 1].text);
            if (rank >= 0 && (best < 0 || rank < best)) {
                best = rank;
                best_at = i;
            }
        }
        if (best < 0) {
            break;
        }
        const std::string left = word[best_at].text;
        const std::string right = word[best_at + 1].text;
        std::vector<Symbol> merged;
        merged.reserve(word.size());
        for (std::size_t i = 0; i < word.size();) {
            if (i + 1 < word.size() && word[i].text == left && word[i + 1].text == right) {
                merged.push_back({left + right, word[i].bytes + word[i + 1].bytes});
                i += 2;
            } else {
                merged.push_back(std::move(word[i]));
                ++i;
            }
        }
        word = std::move(merged);
    }

    std::size_t at = piece_offset;
    for (const auto& sym : word) {
        const auto it = token_to_id_.find(sym.text);
        if (it == token_to_id_.end()) {
            throw InvalidArgument{"symbol \"" + sym.text + "\" is not in the vocabulary"};
        }
        out.ids.push_back(it->second);
        out.offsets.push_back({at, at + sym.bytes});
        at += sym.bytes;
    }
}

TokenSequence Vocabulary::encode(std::string_view text) const {
    TokenSequence out;
    for (const auto& span : pretokenize(text)) {
        bpe(text.substr(span.begin, span.end - span.begin), span.begin, out);
    }
    return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (const TokenId id : ids) {
        out += token_bytes(id);
    }
    return out;
}

Vocabulary parse_vocabulary(std::string_view vocab_json, std::string_view merges_text, std::string_view source) {
    using Kind = VocabularyError::Kind;
    const std::string where{source};

    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(vocab_json);
    } catch (const nlohmann::json::parse_error& e) {
        throw VocabularyError{Kind::MalformedJson, where + ": malformed vocabulary JSON: " + e.what()};
    }
    if (!doc.is_object()) {
        throw VocabularyError{Kind::MalformedJson, where + ": vocabulary JSON must be an object of token -> id"};
    }

    std::unordered_map<std::string, TokenId> token_to_id;
    token_to_id.reserve(doc.size());
    for (const auto& [key, value] : doc.items()) {
        if (!value.is_number_unsigned() || value.get<std::uint64_t>() > std::numeric_limits<TokenId>::max()) {
            throw VocabularyError{Kind::NonIntegerId, where + ": id for key \"" + key + "\" is not a non-negative integer"};
        }
        token_to_id.emplace(key, value.get<TokenId>());
    }

    std::vector<std::pair<std::string, std::string>> merges;
    std::vector<std::size_t> lines;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < merges_text.size()) {
        std::size_t eol = merges_text.find('\n', pos);
        if (eol == std::string_view::npos) {
            eol = merges_text.size();
        }
        std::string_view line = merges_text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (line.empty() || (line_no == 1 && line.starts_with("#version"))) {
            continue;
        }
        const std::size_t space = line.find(' ');
        if (space == std::string_view::npos || space == 0 || space + 1 == line.size() ||
            line.find(' ', space + 1) != std::string_view::npos) {
            throw VocabularyError{Kind::MalformedMerge, where + ": merges line " + std::to_string(line_no) +
                                                            " is not a space-separated pair: \"" + std::string{line} + "\""};
        }
        merges.emplace_back(std::string{line.substr(0, space)}, std::string{line.substr(space + 1)});
        lines.push_back(line_no);
    }

    try {
        return Vocabulary{std::move(token_to_id), std::move(merges), lines};
    } catch (const VocabularyError& e) {
        throw VocabularyError{e.kind(), where + ": " + e.what()};
    }
}

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) {
        throw IoError{"cannot open " + path.string()};
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    if (in.bad()) {
        throw IoError{"failed reading " + path.string()};
    }
    return buffer.str();
}

}  // namespace

Vocabulary load_vocabulary(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path) {
    const std::string vocab = read_file(vocab_path);
    const std::string merges = read_file(merges_path);
    return parse_vocabulary(vocab, merges, vocab_path.string());
}

}  // namespace finterp
