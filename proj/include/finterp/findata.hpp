// SPDX-License-Identifier: Apache-2.0
//
// Synthetic growth-rate prompts, answer parsing and labeling, and the JSONL
// case format.
//
// JSONL case format, one object per line:
//   {"prompt": "...", "answer": " -40%", "topic": "corporate_finance",
//    "operands": {"old": 50, "new": 30}, "label": 0}
// prompt and answer are required; topic, operands and label are optional.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "finterp/model.hpp"
#include "finterp/tokenizer.hpp"
#include "finterp/tracing.hpp"

namespace finterp {

enum class Topic { CorporateFinance, StockTrading };

inline constexpr Topic kTopics[] = {Topic::CorporateFinance, Topic::StockTrading};

/// "corporate_finance" or "stock_trading".
std::string_view topic_name(Topic topic);
/// Throws InvalidArgument on an unknown name.
Topic parse_topic(std::string_view name);

/// Domain nouns used by a topic's templates. The two sets are disjoint.
std::span<const std::string_view> topic_vocabulary(Topic topic);

struct Operands {
    double old_value = 0.0;
    double new_value = 0.0;
    bool operator==(const Operands&) const = default;
};

struct PromptCase {
    std::string prompt;
    std::string correct_answer;
    std::string topic;  // empty when unknown
    std::optional<Operands> operands;
    std::optional<int> label;  // 0 = clean, 1 = hallucinated

    bool operator==(const PromptCase&) const = default;
};

/// 100 * (new - old) / old. Throws InvalidArgument when old is zero.
double growth_percent(double old_value, double new_value);

/// Rounded growth as an answer string: " -40%", " 25%", " 0%".
std::string render_growth_answer(double old_value, double new_value);

struct ValueRange {
    int min = 10;
    int max = 200;
};

/// `count` seeded cases for `topic` with integer operands drawn uniformly
/// from the range. Throws InvalidArgument when count is zero or the range is
/// empty or not positive.
std::vector<PromptCase> generate_cases(Topic topic, std::size_t count, std::uint64_t seed,
                                       ValueRange range = {});

/// First signed number in `text`: optional sign, thousands separators,
/// decimal part and "%" are accepted.
std::optional<double> parse_first_number(std::string_view text);

enum class LabelStatus { Clean, Hallucinated, Unparseable };

struct LabelOutcome {
    PromptCase labeled;  // label set unless unparseable
    LabelStatus status = LabelStatus::Unparseable;
    std::string continuation;
    std::optional<double> parsed;
};

inline constexpr std::size_t kLabelTokens = 8;

/// Greedy 8-token continuation; clean when its first number is within 0.5
/// of the correct answer. Throws InvalidArgument when the correct answer
/// itself carries no number.
LabelOutcome label_case(const ModelBundle& model, const Vocabulary& vocab, const PromptCase& pc);

/// Token range from the first to the last prompt token containing a digit.
/// Throws InvalidArgument when the prompt has no digits.
TraceCase make_trace_case(const Vocabulary& vocab, const PromptCase& pc);

/// Parses the JSONL format. Blank lines are skipped. Throws FormatError
/// naming the line on malformed input, and IoError when unreadable.
std::vector<PromptCase> parse_cases_jsonl(std::string_view text, const std::string& source = "<input>");
std::vector<PromptCase> load_cases_jsonl(const std::filesystem::path& path);

std::string cases_to_jsonl(std::span<const PromptCase> cases);
void write_cases_jsonl(const std::filesystem::path& path, std::span<const PromptCase> cases);

}  // namespace finterp
