// SPDX-License-Identifier: Apache-2.0

#include "finterp/tracing.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>

#include <nlohmann/json.hpp>
#include <unicode/utf8.h>

#include "finterp/error.hpp"
#include "finterp/random.hpp"

namespace finterp {

namespace {

// Replaces ill-formed UTF-8 (e.g. a token holding half a code point) with
// U+FFFD so labels survive JSON and SVG output.
std::string printable(std::string_view bytes) {
    std::string out;
    const auto* s = reinterpret_cast<const std::uint8_t*>(bytes.data());
    const auto length = static_cast<std::int32_t>(bytes.size());
    std::int32_t i = 0;
    while (i < length) {
        const std::int32_t start = i;
        UChar32 c = 0;
        U8_NEXT(s, i, length, c);
        if (c < 0) {
            out += "\xEF\xBF\xBD";
        } else {
            out.append(bytes.substr(static_cast<std::size_t>(start), static_cast<std::size_t>(i - start)));
        }
    }
    return out;
}

std::string fmt9(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string csv_quote(std::string_view s) {
    std::string out = "\"";
    for (const char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + '"';
}

double answer_probability(const Matrix& logits, TokenId answer) { return next_token_probs(logits)[answer]; }

}  // namespace

TokenId answer_token(const Vocabulary& vocab, std::string_view answer) {
    const auto seq = vocab.encode(answer);
    if (seq.empty()) {
        throw InvalidArgument{"answer is empty"};
    }
    return seq.ids.front();
}

TraceCase TraceCase::create(const Vocabulary& vocab, std::string prompt, std::string answer,
                            std::size_t corrupt_begin, std::size_t corrupt_end) {
    TraceCase tc;
    tc.tokens = vocab.encode(prompt).ids;
    if (tc.tokens.empty()) {
        throw InvalidArgument{"prompt is empty"};
    }
    tc.answer_token = finterp::answer_token(vocab, answer);
    if (corrupt_begin >= corrupt_end || corrupt_end > tc.tokens.size()) {
        throw InvalidArgument{"corrupt span [" + std::to_string(corrupt_begin) + ", " + std::to_string(corrupt_end) +
                              ") is empty or exceeds the " + std::to_string(tc.tokens.size()) + " prompt tokens"};
    }
    tc.prompt = std::move(prompt);
    tc.answer = std::move(answer);
    tc.corrupt_begin = corrupt_begin;
    tc.corrupt_end = corrupt_end;
    return tc;
}

void CorruptionSpec::validate() const {
    if (!std::isfinite(noise_sigma_multiplier) || noise_sigma_multiplier <= 0.0) {
        throw InvalidArgument{"noise multiplier must be positive, got " + fmt9(noise_sigma_multiplier)};
    }
}

double embedding_std(const ModelBundle& model) {
    const auto v = model.token_embedding.flat();
    if (v.empty()) {
        return 0.0;
    }
    double mean = 0.0;
    for (const float x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (const float x : v) {
        ss += (x - mean) * (x - mean);
    }
    return std::sqrt(ss / static_cast<double>(v.size()));
}

std::vector<Intervention> corruption_interventions(const ModelBundle& model, const TraceCase& tc,
                                                   const CorruptionSpec& spec) {
    spec.validate();
    if (tc.corrupt_begin >= tc.corrupt_end || tc.corrupt_end > tc.tokens.size()) {
        throw InvalidArgument{"corrupt span is empty or out of range"};
    }
    const std::size_t d = model.config.d_model;
    const double sigma = spec.noise_sigma_multiplier * embedding_std(model);
    Rng rng{spec.seed};
    std::vector<Intervention> out;
    for (std::size_t p = tc.corrupt_begin; p < tc.corrupt_end; ++p) {
        if (tc.tokens[p] >= model.config.vocab_size || p >= model.config.n_ctx) {
            throw InvalidArgument{"prompt does not fit the model"};
        }
        const auto te = model.token_embedding.row(tc.tokens[p]);
        const auto pe = model.position_embedding.row(p);
        std::vector<float> row(d);
        for (std::size_t k = 0; k < d; ++k) {
            const float clean = te[k] + pe[k];
            row[k] = static_cast<float>(clean + sigma * rng.normal());
        }
        out.push_back(Intervention::replace(HookPoint::embed_out(), p, std::move(row)));
    }
    return out;
}

namespace {

RunResult traced_run(const ModelBundle& model, const TraceCase& tc, std::span<const Intervention> ivs) {
    std::vector<HookPoint> hooks;
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        hooks.push_back(HookPoint::resid_pre(l));
    }
    auto res = forward(model, tc.tokens, ivs, hooks, LogitsScope::LastPosition);
    RunResult r;
    r.probability = answer_probability(res.logits, tc.answer_token);
    r.cache = std::move(res.cache);
    return r;
}

}  // namespace

RunResult clean_run(const ModelBundle& model, const TraceCase& tc) { return traced_run(model, tc, {}); }

RunResult corrupt_run(const ModelBundle& model, const TraceCase& tc, const CorruptionSpec& spec) {
    const auto ivs = corruption_interventions(model, tc, spec);
    return traced_run(model, tc, ivs);
}

Tracer::Tracer(const ModelBundle& model, TraceCase tc, CorruptionSpec spec, const Vocabulary* vocab)
    : model_{&model}, case_{std::move(tc)}, spec_{spec} {
    if (case_.answer_token >= model.config.vocab_size) {
        throw InvalidArgument{"answer token " + std::to_string(case_.answer_token) + " is outside the model vocabulary"};
    }
    corruption_ = corruption_interventions(model, case_, spec_);
    clean_ = traced_run(model, case_, {});
    corrupt_ = traced_run(model, case_, corruption_);
    token_texts_.reserve(case_.tokens.size());
    for (const TokenId id : case_.tokens) {
        token_texts_.push_back(vocab && id < vocab->size() ? printable(vocab->token_bytes(id)) : "#" + std::to_string(id));
    }
}

double Tracer::run_with(std::vector<Intervention> extra) const {
    std::vector<Intervention> ivs = corruption_;
    ivs.insert(ivs.end(), std::make_move_iterator(extra.begin()), std::make_move_iterator(extra.end()));
    const auto res = forward(*model_, case_.tokens, ivs, {}, LogitsScope::LastPosition);
    return answer_probability(res.logits, case_.answer_token);
}

double Tracer::patched_prob_from(const ActivationCache& source, std::size_t layer, std::size_t position) const {
    if (layer >= model_->config.n_layers) {
        throw InvalidArgument{"layer " + std::to_string(layer) + " out of range"};
    }
    if (position >= case_.tokens.size()) {
        throw InvalidArgument{"position " + std::to_string(position) + " out of range"};
    }
    const auto hook = HookPoint::resid_pre(layer);
    const auto row = source.at(hook).row(position);
    return run_with({Intervention::replace(hook, position, {row.begin(), row.end()})});
}

double Tracer::patched_prob(std::size_t layer, std::size_t position) const {
    return patched_prob_from(clean_.cache, layer, position);
}

double Tracer::restore_all() const {
    std::vector<Intervention> ivs;
    for (std::size_t l = 0; l < model_->config.n_layers; ++l) {
        const auto hook = HookPoint::resid_pre(l);
        const Matrix& act = clean_.cache.at(hook);
        for (std::size_t p = 0; p < case_.tokens.size(); ++p) {
            ivs.push_back(Intervention::replace(hook, p, {act.row(p).begin(), act.row(p).end()}));
        }
    }
    return run_with(std::move(ivs));
}

ImpactMap Tracer::grid(unsigned threads) const {
    const std::size_t n_layers = model_->config.n_layers;
    const std::size_t n_tokens = case_.tokens.size();
    ImpactMap map;
    map.values = MatrixD(n_layers, n_tokens);
    map.p_clean = p_clean();
    map.p_corrupt = p_corrupt();
    map.token_texts = token_texts_;
    map.prompt = case_.prompt;
    map.answer = case_.answer;
    map.answer_token = case_.answer_token;
    map.corrupt_begin = case_.corrupt_begin;
    map.corrupt_end = case_.corrupt_end;
    map.spec = spec_;
    map.column_counts.assign(n_tokens, 1);

    const std::size_t cells = n_layers * n_tokens;
    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, cells));
    auto cell = [&](std::size_t c) {
        const std::size_t l = c / n_tokens, p = c % n_tokens;
        map.values(l, p) = impact(patched_prob(l, p), p_corrupt());
    };
    if (threads <= 1) {
        for (std::size_t c = 0; c < cells; ++c) {
            cell(c);
        }
        return map;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t c = next++; c < cells && !failed; c = next++) {
                try {
                    cell(c);
                } catch (...) {
                    if (!failed.exchange(true)) {
                        failure = std::current_exception();
                    }
                }
            }
        });
    }
    pool.clear();
    if (failure) {
        std::rethrow_exception(failure);
    }
    return map;
}

ImpactMap trace_grid(const ModelBundle& model, const TraceCase& tc, const CorruptionSpec& spec,
                     const Vocabulary* vocab, unsigned threads) {
    return Tracer{model, tc, spec, vocab}.grid(threads);
}

ImpactMap average_maps(std::span<const ImpactMap> maps) {
    if (maps.empty()) {
        throw InvalidArgument{"cannot average an empty list of maps"};
    }
    if (maps.size() == 1) {
        return maps.front();
    }
    const std::size_t n_layers = maps.front().n_layers();
    std::size_t width = 0;
    const ImpactMap* longest = &maps.front();
    for (const auto& m : maps) {
        if (m.n_layers() != n_layers) {
            throw InvalidArgument{"maps disagree on the layer count (" + std::to_string(m.n_layers()) + " vs " +
                                  std::to_string(n_layers) + ")"};
        }
        if (m.n_tokens() > width) {
            width = m.n_tokens();
            longest = &m;
        }
    }

    ImpactMap avg;
    avg.values = MatrixD(n_layers, width);
    avg.site = maps.front().site;
    avg.token_texts = longest->token_texts;
    avg.spec = maps.front().spec;
    avg.n_maps = 0;
    avg.column_counts.assign(width, 0);
    for (const auto& m : maps) {
        const std::size_t shift = width - m.n_tokens();
        for (std::size_t l = 0; l < n_layers; ++l) {
            for (std::size_t p = 0; p < m.n_tokens(); ++p) {
                avg.values(l, shift + p) += m.values(l, p);
            }
        }
        for (std::size_t p = shift; p < width; ++p) {
            ++avg.column_counts[p];
        }
        avg.p_clean += m.p_clean;
        avg.p_corrupt += m.p_corrupt;
        avg.n_maps += m.n_maps;
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        for (std::size_t p = 0; p < width; ++p) {
            avg.values(l, p) /= static_cast<double>(avg.column_counts[p]);
        }
    }
    avg.p_clean /= static_cast<double>(maps.size());
    avg.p_corrupt /= static_cast<double>(maps.size());
    return avg;
}

SiteValue argmax_site(const ImpactMap& map) {
    if (map.values.empty()) {
        throw InvalidArgument{"impact map is empty"};
    }
    SiteValue best{0, 0, map.values(0, 0)};
    for (std::size_t l = 0; l < map.n_layers(); ++l) {
        for (std::size_t p = 0; p < map.n_tokens(); ++p) {
            if (map.values(l, p) > best.value) {
                best = {l, p, map.values(l, p)};
            }
        }
    }
    return best;
}

std::string impact_csv(const ImpactMap& map) {
    std::string out = "layer,position,token_text,impact\n";
    for (std::size_t l = 0; l < map.n_layers(); ++l) {
        for (std::size_t p = 0; p < map.n_tokens(); ++p) {
            const std::string text = p < map.token_texts.size() ? map.token_texts[p] : std::string{};
            out += std::to_string(l) + ',' + std::to_string(p) + ',' + csv_quote(text) + ',' +
                   fmt9(map.values(l, p)) + '\n';
        }
    }
    return out;
}

nlohmann::ordered_json impact_json(const ImpactMap& map) {
    nlohmann::ordered_json values = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < map.n_layers(); ++l) {
        auto row = nlohmann::ordered_json::array();
        for (std::size_t p = 0; p < map.n_tokens(); ++p) {
            row.push_back(map.values(l, p));
        }
        values.push_back(std::move(row));
    }
    const auto best = argmax_site(map);
    nlohmann::ordered_json doc;
    doc["site"] = map.site;
    doc["n_layers"] = map.n_layers();
    doc["n_tokens"] = map.n_tokens();
    doc["p_clean"] = map.p_clean;
    doc["p_corrupt"] = map.p_corrupt;
    doc["spec"] = {{"noise_sigma_multiplier", map.spec.noise_sigma_multiplier}, {"seed", map.spec.seed}};
    doc["case"] = {{"prompt", map.prompt},
                   {"answer", map.answer},
                   {"answer_token", map.answer_token},
                   {"corrupt_span", {map.corrupt_begin, map.corrupt_end}},
                   {"n_maps", map.n_maps}};
    doc["tokens"] = map.token_texts;
    doc["column_counts"] = map.column_counts;
    doc["argmax"] = {{"layer", best.layer}, {"position", best.position}, {"value", best.value}};
    doc["values"] = std::move(values);
    return doc;
}

}  // namespace finterp
