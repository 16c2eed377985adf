// SPDX-License-Identifier: Apache-2.0

#include "finterp/findata.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "finterp/error.hpp"
#include "finterp/random.hpp"

namespace finterp {

namespace {

// {0} is the old value, {1} the new one.
constexpr std::array<std::string_view, 4> kCorporateTemplates{
    "Revenue went from {0}M to {1}M. The percentage change in revenue was",
    "The company's operating cost moved from {0}M to {1}M, so the growth in cost was",
    "The firm reported annual revenue of {0}M last year and {1}M this year. Revenue growth:",
    "Quarterly expenses changed from {0}M to {1}M. The growth rate of expenses is",
};

constexpr std::array<std::string_view, 4> kStockTemplates{
    "The stock opened at ${0} and closed at ${1}. The percentage change in price was",
    "Shares of the ticker traded at ${0} at the open and ${1} at the close, a daily move of",
    "On the exchange, the share price went from an opening of ${0} to a closing of ${1}. Intraday return:",
    "The equity began the trading session at ${0} per share and ended it at ${1}. The session return was",
};

constexpr std::array<std::string_view, 11> kCorporateNouns{
    "revenue", "company", "cost", "operating", "firm", "annual", "reported", "quarterly", "expenses", "year", "growth"};

constexpr std::array<std::string_view, 17> kStockNouns{
    "stock", "opened", "closed", "price", "shares", "share", "ticker", "traded", "open", "close",
    "exchange", "opening", "closing", "intraday", "equity", "trading", "session"};

std::string fill(std::string_view tmpl, int a, int b) {
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}') {
            out += std::to_string(tmpl[i + 1] == '0' ? a : b);
            i += 2;
        } else {
            out += tmpl[i];
        }
    }
    return out;
}

nlohmann::ordered_json number_json(double v) {
    if (std::nearbyint(v) == v && std::abs(v) < 9.0e15) {
        return static_cast<std::int64_t>(v);
    }
    return v;
}

}  // namespace

std::string_view topic_name(Topic topic) {
    return topic == Topic::CorporateFinance ? "corporate_finance" : "stock_trading";
}

Topic parse_topic(std::string_view name) {
    for (const Topic t : kTopics) {
        if (topic_name(t) == name) {
            return t;
        }
    }
    throw InvalidArgument{"unknown topic \"" + std::string{name} + "\" (expected corporate_finance or stock_trading)"};
}

std::span<const std::string_view> topic_vocabulary(Topic topic) {
    if (topic == Topic::CorporateFinance) {
        return kCorporateNouns;
    }
    return kStockNouns;
}

double growth_percent(double old_value, double new_value) {
    if (old_value == 0.0) {
        throw InvalidArgument{"growth is undefined for an old value of zero"};
    }
    return 100.0 * (new_value - old_value) / old_value;
}

std::string render_growth_answer(double old_value, double new_value) {
    const long long rounded = std::llround(growth_percent(old_value, new_value));
    return " " + std::to_string(rounded) + "%";
}

std::vector<PromptCase> generate_cases(Topic topic, std::size_t count, std::uint64_t seed, ValueRange range) {
    if (count == 0) {
        throw InvalidArgument{"case count must be at least 1"};
    }
    if (range.min <= 0 || range.max < range.min) {
        throw InvalidArgument{"value range [" + std::to_string(range.min) + ", " + std::to_string(range.max) +
                              "] must be positive and non-empty"};
    }
    const auto& templates = topic == Topic::CorporateFinance ? kCorporateTemplates : kStockTemplates;
    // Topics draw from separate streams so a shared seed does not repeat operands.
    Rng rng{seed ^ (topic == Topic::CorporateFinance ? 0x636f72706f726174ULL : 0x73746f636b747264ULL)};
    const auto span = static_cast<std::uint64_t>(range.max - range.min) + 1;
    std::vector<PromptCase> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& tmpl = templates[rng.below(templates.size())];
        const int a = range.min + static_cast<int>(rng.below(span));
        const int b = range.min + static_cast<int>(rng.below(span));
        PromptCase pc;
        pc.prompt = fill(tmpl, a, b);
        pc.correct_answer = render_growth_answer(a, b);
        pc.topic = std::string{topic_name(topic)};
        pc.operands = Operands{static_cast<double>(a), static_cast<double>(b)};
        out.push_back(std::move(pc));
    }
    return out;
}

std::optional<double> parse_first_number(std::string_view text) {
    static const std::regex number{R"([+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?%?)"};
    std::match_results<std::string_view::const_iterator> m;
    if (!std::regex_search(text.begin(), text.end(), m, number)) {
        return std::nullopt;
    }
    std::string digits;
    for (const char c : m.str()) {
        if (c != ',' && c != '%' && c != '+') {
            digits += c;
        }
    }
    return std::stod(digits);
}

LabelOutcome label_case(const ModelBundle& model, const Vocabulary& vocab, const PromptCase& pc) {
    const auto correct = parse_first_number(pc.correct_answer);
    if (!correct) {
        throw InvalidArgument{"correct answer \"" + pc.correct_answer + "\" contains no number"};
    }
    const auto prompt = vocab.encode(pc.prompt).ids;
    const auto continuation = greedy_continuation(model, prompt, kLabelTokens);

    LabelOutcome out;
    out.labeled = pc;
    out.continuation = vocab.decode(continuation);
    out.parsed = parse_first_number(out.continuation);
    if (!out.parsed) {
        out.status = LabelStatus::Unparseable;
        out.labeled.label.reset();
        return out;
    }
    const bool clean = std::abs(*out.parsed - *correct) <= 0.5;
    out.status = clean ? LabelStatus::Clean : LabelStatus::Hallucinated;
    out.labeled.label = clean ? 0 : 1;
    return out;
}

TraceCase make_trace_case(const Vocabulary& vocab, const PromptCase& pc) {
    const auto ids = vocab.encode(pc.prompt).ids;
    std::size_t first = ids.size(), last = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& bytes = vocab.token_bytes(ids[i]);
        const bool digit = std::any_of(bytes.begin(), bytes.end(),
                                       [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; });
        if (digit) {
            first = std::min(first, i);
            last = i;
        }
    }
    if (first == ids.size()) {
        throw InvalidArgument{"prompt has no numeric operand to corrupt: \"" + pc.prompt + "\""};
    }
    return TraceCase::create(vocab, pc.prompt, pc.correct_answer, first, last + 1);
}

std::vector<PromptCase> parse_cases_jsonl(std::string_view text, const std::string& source) {
    std::vector<PromptCase> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t end = std::min(text.find('\n', pos), text.size());
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (line.find_first_not_of(" \t") == std::string_view::npos) {
            continue;
        }
        const std::string where = source + ":" + std::to_string(line_no) + ": ";
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError{where + "malformed JSON: " + e.what()};
        }
        if (!doc.is_object()) {
            throw FormatError{where + "expected a JSON object"};
        }
        auto required = [&](const char* key) {
            if (!doc.contains(key)) {
                throw FormatError{where + "missing required field \"" + key + "\""};
            }
            if (!doc.at(key).is_string() || doc.at(key).get_ref<const std::string&>().empty()) {
                throw FormatError{where + "field \"" + key + "\" must be a non-empty string"};
            }
            return doc.at(key).get<std::string>();
        };
        PromptCase pc;
        pc.prompt = required("prompt");
        pc.correct_answer = required("answer");
        if (doc.contains("topic") && !doc.at("topic").is_null()) {
            if (!doc.at("topic").is_string()) {
                throw FormatError{where + "field \"topic\" must be a string"};
            }
            pc.topic = doc.at("topic").get<std::string>();
            try {
                parse_topic(pc.topic);
            } catch (const InvalidArgument& e) {
                throw FormatError{where + e.what()};
            }
        }
        if (doc.contains("operands") && !doc.at("operands").is_null()) {
            const auto& ops = doc.at("operands");
            if (!ops.is_object() || !ops.contains("old") || !ops.contains("new") || !ops.at("old").is_number() ||
                !ops.at("new").is_number()) {
                throw FormatError{where + "\"operands\" must be an object with numeric \"old\" and \"new\""};
            }
            pc.operands = Operands{ops.at("old").get<double>(), ops.at("new").get<double>()};
            if (pc.operands->old_value == 0.0) {
                throw FormatError{where + "growth is undefined for an old value of zero"};
            }
            const auto stated = parse_first_number(pc.correct_answer);
            const double growth = growth_percent(pc.operands->old_value, pc.operands->new_value);
            if (!stated || std::abs(*stated - growth) > 0.5) {
                throw FormatError{where + "answer \"" + pc.correct_answer + "\" does not match the operands (growth " +
                                  std::to_string(growth) + "%)"};
            }
        }
        if (doc.contains("label") && !doc.at("label").is_null()) {
            const auto& label = doc.at("label");
            if (!label.is_number_integer() || (label.get<int>() != 0 && label.get<int>() != 1)) {
                throw FormatError{where + "field \"label\" must be 0 or 1"};
            }
            pc.label = label.get<int>();
        }
        out.push_back(std::move(pc));
    }
    return out;
}

std::vector<PromptCase> load_cases_jsonl(const std::filesystem::path& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) {
        throw IoError{"cannot open " + path.string()};
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_cases_jsonl(buf.str(), path.string());
}

std::string cases_to_jsonl(std::span<const PromptCase> cases) {
    std::string out;
    for (const auto& pc : cases) {
        nlohmann::ordered_json doc;
        doc["prompt"] = pc.prompt;
        doc["answer"] = pc.correct_answer;
        if (!pc.topic.empty()) {
            doc["topic"] = pc.topic;
        }
        if (pc.operands) {
            doc["operands"] = {{"old", number_json(pc.operands->old_value)},
                               {"new", number_json(pc.operands->new_value)}};
        }
        if (pc.label) {
            doc["label"] = *pc.label;
        }
        out += doc.dump() + '\n';
    }
    return out;
}

void write_cases_jsonl(const std::filesystem::path& path, std::span<const PromptCase> cases) {
    std::ofstream out{path, std::ios::binary | std::ios::trunc};
    if (!out) {
        throw IoError{"cannot write " + path.string()};
    }
    out << cases_to_jsonl(cases);
    if (!out) {
        throw IoError{"error writing " + path.string()};
    }
}

}  // namespace finterp
