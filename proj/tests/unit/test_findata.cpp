// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "finterp/error.hpp"
#include "finterp/findata.hpp"
#include "finterp/random.hpp"
#include "fixtures.hpp"

using namespace finterp;

namespace {

std::set<std::string> words(const std::string& text) {
    std::set<std::string> out;
    std::string cur;
    for (const char c : text + " ") {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!cur.empty()) {
            out.insert(cur);
            cur.clear();
        }
    }
    return out;
}

}  // namespace

TEST_SUITE("findata") {

TEST_CASE("growth arithmetic") {
    CHECK(growth_percent(50, 30) == -40.0);
    CHECK(growth_percent(12.5, 12.5) == 0.0);
    CHECK(growth_percent(50, 0) == -100.0);
    CHECK(growth_percent(40, 50) == 25.0);
    CHECK_THROWS_AS(growth_percent(0, 5), InvalidArgument);
    CHECK(render_growth_answer(50, 30) == " -40%");
    CHECK(render_growth_answer(40, 50) == " 25%");
    CHECK(render_growth_answer(1000, 999) == " 0%");
    CHECK(render_growth_answer(3, 1) == " -67%");
    CHECK(render_growth_answer(8, 1) == " -88%");  // -87.5 rounds away from zero
}

TEST_CASE("topic names") {
    for (const Topic t : kTopics) {
        CHECK(parse_topic(topic_name(t)) == t);
    }
    CHECK_THROWS_AS(parse_topic("crypto"), InvalidArgument);
}

TEST_CASE("number parsing") {
    CHECK(parse_first_number(" -40%") == -40.0);
    CHECK(parse_first_number(" 50%") == 50.0);
    CHECK(parse_first_number("up +12.5% today") == 12.5);
    CHECK(parse_first_number("a 1,234,567.25 gain") == 1234567.25);
    CHECK(parse_first_number("1234 then 5") == 1234.0);
    CHECK(parse_first_number("from 2019-2020") == 2019.0);
    CHECK_FALSE(parse_first_number("the company").has_value());
    CHECK_FALSE(parse_first_number("").has_value());
}

TEST_CASE("generated cases") {
    for (const Topic topic : kTopics) {
        const auto cases = generate_cases(topic, 200, 1);
        REQUIRE(cases.size() == 200);
        CHECK(generate_cases(topic, 200, 1) == cases);
        CHECK_FALSE(generate_cases(topic, 200, 2) == cases);
        for (const auto& pc : cases) {
            REQUIRE(pc.operands.has_value());
            CHECK(pc.topic == topic_name(topic));
            CHECK(parse_first_number(pc.correct_answer) ==
                  std::round(growth_percent(pc.operands->old_value, pc.operands->new_value)));
            CHECK(pc.operands->old_value >= 10);
            CHECK(pc.operands->new_value <= 200);
            CHECK_FALSE(pc.label.has_value());
        }
    }
    const auto five = generate_cases(Topic::CorporateFinance, 5, 1);
    CHECK(five.size() == 5);
    for (const auto& pc : generate_cases(Topic::StockTrading, 20, 3)) {
        const auto w = words(pc.prompt);
        CHECK((w.contains("opened") || w.contains("open") || w.contains("opening") || w.contains("began")));
    }
    CHECK_THROWS_AS(generate_cases(Topic::StockTrading, 0, 1), InvalidArgument);
    CHECK_THROWS_AS(generate_cases(Topic::StockTrading, 3, 1, {0, 10}), InvalidArgument);
    CHECK_THROWS_AS(generate_cases(Topic::StockTrading, 3, 1, {20, 10}), InvalidArgument);
}

TEST_CASE("topic templates share no domain nouns") {
    std::set<std::string> corporate_words, stock_words;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (const auto& pc : generate_cases(Topic::CorporateFinance, 20, seed)) {
            const auto w = words(pc.prompt);
            corporate_words.insert(w.begin(), w.end());
        }
        for (const auto& pc : generate_cases(Topic::StockTrading, 20, seed)) {
            const auto w = words(pc.prompt);
            stock_words.insert(w.begin(), w.end());
        }
    }
    for (const auto noun : topic_vocabulary(Topic::CorporateFinance)) {
        CHECK_FALSE(stock_words.contains(std::string{noun}));
    }
    for (const auto noun : topic_vocabulary(Topic::StockTrading)) {
        CHECK_FALSE(corporate_words.contains(std::string{noun}));
    }
    // every domain noun is actually used by its own topic
    for (const auto noun : topic_vocabulary(Topic::CorporateFinance)) {
        CHECK(corporate_words.contains(std::string{noun}));
    }
    for (const auto noun : topic_vocabulary(Topic::StockTrading)) {
        CHECK(stock_words.contains(std::string{noun}));
    }
}

TEST_CASE("trace case from a prompt case") {
    const auto& vocab = fixtures::gpt2_vocab();
    PromptCase pc{"Revenue growth from 50M to 30M", " -40%", "corporate_finance", Operands{50, 30}, std::nullopt};
    const auto tc = make_trace_case(vocab, pc);
    CHECK(tc.corrupt_begin == 4);
    CHECK(tc.corrupt_end == 8);
    CHECK(tc.answer_token == 532);
    pc.prompt = "no digits here";
    CHECK_THROWS_AS(make_trace_case(vocab, pc), InvalidArgument);
}

TEST_CASE("labeling a greedy continuation") {
    const auto& vocab = fixtures::gpt2_vocab();
    auto cfg = ModelConfig{};
    cfg.n_layers = 1;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_mlp = 16;
    cfg.vocab_size = vocab.size();
    cfg.n_ctx = 64;
    // With all blocks and norms silenced, the final LayerNorm output equals
    // its shift vector, so every step predicts the token whose embedding has
    // the largest dot product with it.
    auto model = make_tiny_model(1, cfg, 0.0);
    std::fill(model.final_norm.scale.begin(), model.final_norm.scale.end(), 0.0f);
    std::fill(model.final_norm.shift.begin(), model.final_norm.shift.end(), 0.0f);
    model.final_norm.shift[0] = 1.0f;

    auto predict = [&](TokenId id) {
        std::fill(model.token_embedding.flat().begin(), model.token_embedding.flat().end(), 0.0f);
        model.token_embedding(id, 0) = 10.0f;
    };
    const PromptCase pc{"Revenue went from 50M to 30M. Growth was", " -40%", "corporate_finance", Operands{50, 30},
                        std::nullopt};

    TokenId t = 0;
    REQUIRE(vocab.find("Ġ50", t));
    predict(t);
    const auto wrong = label_case(model, vocab, pc);
    CHECK(wrong.status == LabelStatus::Hallucinated);
    CHECK(wrong.labeled.label == 1);
    CHECK(wrong.parsed == 50.0);
    CHECK(wrong.continuation == " 50 50 50 50 50 50 50 50");

    REQUIRE(vocab.find("-", t));
    predict(t);
    // "-" repeated carries no digits
    const auto none = label_case(model, vocab, pc);
    CHECK(none.status == LabelStatus::Unparseable);
    CHECK_FALSE(none.labeled.label.has_value());

    REQUIRE(vocab.find("Ġ50", t));
    predict(t);
    const PromptCase up{"The stock opened at $20 and closed at $30. The return was", " 50%", "stock_trading",
                        Operands{20, 30}, std::nullopt};
    const auto right = label_case(model, vocab, up);
    CHECK(right.status == LabelStatus::Clean);
    CHECK(right.labeled.label == 0);
    CHECK(label_case(model, vocab, up).labeled == right.labeled);

    auto bad = pc;
    bad.correct_answer = "unknown";
    CHECK_THROWS_AS(label_case(model, vocab, bad), InvalidArgument);
}

TEST_CASE("JSONL round trip and errors") {
    const auto cases = generate_cases(Topic::StockTrading, 5, 9);
    auto labeled = cases;
    labeled[1].label = 1;
    labeled[2].label = 0;
    const auto text = cases_to_jsonl(labeled);
    CHECK(std::count(text.begin(), text.end(), '\n') == 5);
    CHECK(parse_cases_jsonl(text) == labeled);

    CHECK(parse_cases_jsonl("").empty());
    CHECK(parse_cases_jsonl("\n  \n").empty());
    const auto one = parse_cases_jsonl(R"({"prompt": "p 1", "answer": " 2%"})");
    REQUIRE(one.size() == 1);
    CHECK(one[0].topic.empty());
    CHECK_FALSE(one[0].operands.has_value());

    auto error_at = [](std::string_view input) -> std::string {
        try {
            parse_cases_jsonl(input, "cases.jsonl");
        } catch (const FormatError& e) {
            return e.what();
        }
        return "no error";
    };
    const std::string good = R"({"prompt": "a", "answer": " 1%"})";
    CHECK(error_at(good + "\n" + R"({"prompt": "b"})").starts_with("cases.jsonl:2: missing required field \"answer\""));
    CHECK(error_at(good + "\n\n{oops").starts_with("cases.jsonl:3: malformed JSON"));
    CHECK(error_at("[1, 2]").starts_with("cases.jsonl:1: expected a JSON object"));
    CHECK(error_at(R"({"prompt": "a", "answer": " 1%", "topic": "crypto"})").starts_with("cases.jsonl:1: unknown topic"));
    CHECK(error_at(R"({"prompt": "a", "answer": " 1%", "label": 2})").starts_with("cases.jsonl:1: field \"label\""));
    CHECK(error_at(R"({"prompt": "a", "answer": " 10%", "operands": {"old": 50, "new": 30}})")
              .starts_with("cases.jsonl:1: answer \" 10%\" does not match"));
    CHECK(error_at(R"({"prompt": "a", "answer": " 10%", "operands": {"old": 0, "new": 30}})")
              .starts_with("cases.jsonl:1: growth is undefined"));
    CHECK(error_at(R"({"prompt": "a", "answer": " 10%", "operands": [50, 30]})")
              .starts_with("cases.jsonl:1: \"operands\""));
    CHECK(error_at(R"({"prompt": 5, "answer": " 1%"})").starts_with("cases.jsonl:1: field \"prompt\""));
}

TEST_CASE("JSONL files") {
    const auto dir = std::filesystem::temp_directory_path() / "finterp_findata_test";
    std::filesystem::create_directories(dir);
    const auto cases = generate_cases(Topic::CorporateFinance, 5, 4);
    write_cases_jsonl(dir / "cases.jsonl", cases);
    CHECK(load_cases_jsonl(dir / "cases.jsonl") == cases);
    CHECK_THROWS_AS(load_cases_jsonl(dir / "missing.jsonl"), IoError);
    std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
