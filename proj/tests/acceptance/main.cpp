// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one line per criterion:
//   [PASS|FAIL|SKIPPED] <id> <title> (<elapsed>): <detail>
// Exits nonzero when a gating criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "finterp/ablation.hpp"
#include "finterp/cli.hpp"
#include "finterp/findata.hpp"
#include "finterp/model.hpp"
#include "finterp/probes.hpp"
#include "finterp/random.hpp"
#include "finterp/tokenizer.hpp"
#include "finterp/tracing.hpp"
#include "fixtures.hpp"
#include "numeric_oracle.hpp"
#include "oracle.hpp"
#include "scratch.hpp"

using namespace finterp;
namespace fs = std::filesystem;

namespace {

enum class Status { Pass, Fail, Skipped };

struct Outcome {
    Status status = Status::Fail;
    std::string detail;
};

Outcome pass(std::string d) { return {Status::Pass, std::move(d)}; }
Outcome fail(std::string d) { return {Status::Fail, std::move(d)}; }
Outcome skip(std::string d) { return {Status::Skipped, std::move(d)}; }
Outcome check(bool ok, std::string d) { return {ok ? Status::Pass : Status::Fail, std::move(d)}; }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Criterion {
    int id;
    std::string title;
    double budget_seconds;
    bool gating;
    std::function<Outcome()> body;
};

// ---------------------------------------------------------------- tiny setups

struct TinyCase {
    ModelBundle model;
    TraceCase tc;
    CorruptionSpec spec;
};

// Seeded 2-layer model (d_model 16, vocab 32) with a random prompt and span.
TinyCase tiny_case(std::uint64_t seed) {
    Rng rng{seed * 7919 + 1};
    TinyCase t;
    t.model = make_tiny_model(seed, fixtures::tiny_config(), 0.3);
    const std::size_t n = 5 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) {
        t.tc.tokens.push_back(static_cast<TokenId>(rng.below(32)));
    }
    t.tc.prompt = "tiny";
    t.tc.answer_token = static_cast<TokenId>(rng.below(32));
    t.tc.answer = "#" + std::to_string(t.tc.answer_token);
    t.tc.corrupt_begin = rng.below(n - 1);
    t.tc.corrupt_end = t.tc.corrupt_begin + 1 + rng.below(n - t.tc.corrupt_begin);
    t.spec = {3.0, seed + 100};
    return t;
}

oracle::Dense dense(const MatrixD& m) {
    oracle::Dense out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        out[i].assign(m.row(i).begin(), m.row(i).end());
    }
    return out;
}

MatrixD random_matrix(Rng& rng, std::size_t n, std::size_t d) {
    MatrixD m(n, d);
    for (auto& v : m.flat()) {
        v = rng.normal();
    }
    return m;
}

// ---------------------------------------------------------------- criteria

Outcome c1_reduction_arithmetic() {
    const auto r = relative_reduction(0.0522, 0.0095);
    if (!r) {
        return fail("reduction undefined");
    }
    const double pct = 100.0 * *r;
    const std::string shown = format_percent(*r);
    return check(std::abs(pct - 81.8) <= 0.05 && shown == "81.8%",
                 "0.0522 -> 0.0095 gives " + shown + " (" + fmt("%.4f", pct) + "%)");
}

Outcome c2_full_restoration() {
    double worst_restore = 0.0, worst_self = 0.0;
    std::size_t cells = 0;
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        const TinyCase t = tiny_case(seed);
        const Tracer tracer{t.model, t.tc, t.spec};
        worst_restore = std::max(worst_restore, std::abs(tracer.restore_all() - tracer.p_clean()));
        for (std::size_t l = 0; l < t.model.config.n_layers; ++l) {
            for (std::size_t p = 0; p < t.tc.tokens.size(); ++p) {
                const double self = tracer.patched_prob_from(tracer.corrupted().cache, l, p);
                worst_self = std::max(worst_self, std::abs(impact(self, tracer.p_corrupt())));
                ++cells;
            }
        }
    }
    return check(worst_restore <= 1e-5 && worst_self <= 1e-6,
                 "8 cases: restore-all error " + fmt("%.2e", worst_restore) + ", worst self-patch impact " +
                     fmt("%.2e", worst_self) + " over " + std::to_string(cells) + " cells");
}

Outcome c3_splice_oracle() {
    double worst_grid = 0.0, worst_ablate = 0.0;
    std::size_t cells = 0, dists = 0;
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        const TinyCase t = tiny_case(seed);
        const ImpactMap map = trace_grid(t.model, t.tc, t.spec, nullptr, 2);

        const auto corrupted = oracle::corrupted_embeddings(t.model, t.tc.tokens, t.tc.corrupt_begin,
                                                            t.tc.corrupt_end, t.spec.noise_sigma_multiplier,
                                                            t.spec.seed);
        const auto clean = oracle::run(t.model, t.tc.tokens);
        oracle::Edits corrupt_edits;
        corrupt_edits.embed = corrupted;
        const double p_corrupt = oracle::run(t.model, t.tc.tokens, corrupt_edits).last_probs[t.tc.answer_token];
        for (std::size_t l = 0; l < map.n_layers(); ++l) {
            for (std::size_t p = 0; p < map.n_tokens(); ++p) {
                oracle::Edits e = corrupt_edits;
                e.resid_pre[{l, p}] = clean.resid_pre[l][p];
                const double p_patch = oracle::run(t.model, t.tc.tokens, e).last_probs[t.tc.answer_token];
                worst_grid = std::max(worst_grid, std::abs(map.values(l, p) - (p_patch - p_corrupt)));
                ++cells;
            }
        }

        for (std::size_t l = 0; l < t.model.config.n_layers; ++l) {
            for (const bool final_only : {false, true}) {
                const auto got = ablate_layer(t.model, t.tc.tokens, l,
                                              final_only ? AblationScope::FinalToken : AblationScope::AllPositions);
                oracle::Edits e;
                e.skip_layers = {l};
                e.skip_final_only = final_only;
                const auto want = oracle::run(t.model, t.tc.tokens, e).last_probs;
                for (std::size_t v = 0; v < want.size(); ++v) {
                    worst_ablate = std::max(worst_ablate, std::abs(got[v] - want[v]));
                }
                ++dists;
            }
        }
    }
    return check(worst_grid <= 1e-5 && worst_ablate <= 1e-5,
                 std::to_string(cells) + " grid cells, worst " + fmt("%.2e", worst_grid) + "; " +
                     std::to_string(dists) + " ablated distributions, worst " + fmt("%.2e", worst_ablate));
}

Outcome c4_tokenizer_parity() {
    const auto& vocab = fixtures::gpt2_vocab();
    std::ifstream in{fixtures::path("tokenizer_parity.jsonl")};
    if (!in) {
        return fail("fixture missing");
    }
    std::size_t total = 0, exact = 0;
    bool has_prompt = false;
    std::string first_mismatch;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) {
            continue;
        }
        const auto doc = nlohmann::json::parse(line);
        const auto text = doc.at("text").get<std::string>();
        const auto ids = doc.at("ids").get<std::vector<TokenId>>();
        ++total;
        has_prompt = has_prompt || text == "Revenue growth from 50M to 30M";
        if (vocab.encode(text).ids == ids) {
            ++exact;
        } else if (first_mismatch.empty()) {
            first_mismatch = nlohmann::json(text).dump();
        }
    }
    std::string detail = std::to_string(exact) + "/" + std::to_string(total) + " exact";
    if (!has_prompt) {
        detail += ", reference prompt missing from fixture";
    }
    if (!first_mismatch.empty()) {
        detail += ", first mismatch " + first_mismatch;
    }
    return check(total >= 200 && exact == total && has_prompt, detail);
}

fs::path env_dir(const char* var, const fs::path& fallback) {
    const char* v = std::getenv(var);
    return v != nullptr && *v != '\0' ? fs::path{v} : fallback;
}

Outcome c5_checkpoint_fidelity() {
    const fs::path dir = env_dir("FINTERP_GPT2_DIR", fs::path{FINTERP_SOURCE_DIR} / "models" / "gpt2");
    for (const char* f : {"model.safetensors", "config.json", "vocab.json", "merges.txt"}) {
        if (!fs::exists(dir / f)) {
            return skip("GPT-2 small weights not found in " + dir.string() + " (set FINTERP_GPT2_DIR)");
        }
    }
    const fs::path ref_path = dir / "reference_continuations.json";
    if (!fs::exists(ref_path)) {
        return skip("no reference_continuations.json in " + dir.string() +
                    "; create it with tools/scripts/reference_continuations.py");
    }
    const auto model = load_model(dir / "model.safetensors", dir / "config.json");
    const auto vocab = load_vocabulary(dir / "vocab.json", dir / "merges.txt");
    std::ifstream pin{fixtures::path("gpt2_prompts.json")};
    std::ifstream refin{ref_path};
    const auto prompts = nlohmann::json::parse(pin).get<std::vector<std::string>>();
    std::map<std::string, nlohmann::json> refs;
    for (const auto& r : nlohmann::json::parse(refin)) {
        refs[r.at("prompt").get<std::string>()] = r;
    }

    std::size_t matched = 0;
    double worst_mean = 0.0, worst_var = 0.0, worst_sum = 0.0;
    bool negative = false;
    std::string problems;
    for (const std::string& prompt : prompts) {
        const auto it = refs.find(prompt);
        if (it == refs.end()) {
            problems += " missing reference for " + nlohmann::json(prompt).dump() + ";";
            continue;
        }
        const auto ids = vocab.encode(prompt).ids;
        if (ids != it->second.at("prompt_ids").get<std::vector<TokenId>>()) {
            problems += " prompt ids differ for " + nlohmann::json(prompt).dump() + ";";
            continue;
        }
        const auto cont = greedy_continuation(model, ids, 8);
        if (cont == it->second.at("continuation").get<std::vector<TokenId>>()) {
            ++matched;
        } else {
            problems += " continuation differs for " + nlohmann::json(prompt).dump() + ";";
        }

        std::vector<HookPoint> hooks;
        for (std::size_t l = 0; l < model.config.n_layers; ++l) {
            hooks.push_back(HookPoint::resid_pre(l));
        }
        const auto res = forward(model, ids, {}, hooks, LogitsScope::LastPosition);
        for (const auto& h : hooks) {
            const Matrix normed = layer_norm_normalize(res.cache.at(h), model.config.layernorm_epsilon);
            for (std::size_t i = 0; i < normed.rows(); ++i) {
                double mean = 0.0, var = 0.0;
                const auto row = normed.row(i);
                for (const float v : row) {
                    mean += v;
                }
                mean /= static_cast<double>(row.size());
                for (const float v : row) {
                    var += (v - mean) * (v - mean);
                }
                var /= static_cast<double>(row.size());
                worst_mean = std::max(worst_mean, std::abs(mean));
                worst_var = std::max(worst_var, std::abs(var - 1.0));
            }
        }
        const auto probs = next_token_probs(res.logits);
        worst_sum = std::max(worst_sum, std::abs(std::accumulate(probs.begin(), probs.end(), 0.0) - 1.0));
        negative = negative || std::any_of(probs.begin(), probs.end(), [](double p) { return p < 0.0; });
    }
    const bool ok = matched == prompts.size() && worst_mean <= 1e-4 && worst_var <= 1e-4 && worst_sum <= 1e-6 &&
                    !negative;
    return check(ok, std::to_string(matched) + "/" + std::to_string(prompts.size()) +
                         " continuations match; LayerNorm worst |mean| " + fmt("%.1e", worst_mean) + ", |var-1| " +
                         fmt("%.1e", worst_var) + "; softmax worst |sum-1| " + fmt("%.1e", worst_sum) + (problems.empty() ? "" : ";" + problems));
}

Outcome c6_probe_correctness() {
    // analytic vs central-difference gradient
    Rng rng{606};
    double worst_rel = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 3 + rng.below(20), d = 1 + rng.below(8);
        const MatrixD x = random_matrix(rng, n, d);
        std::vector<int> y(n);
        for (auto& v : y) {
            v = static_cast<int>(rng.below(2));
        }
        std::vector<double> w(d);
        for (auto& v : w) {
            v = rng.normal();
        }
        const double b = rng.normal(), l2 = rng.uniform();
        const auto lg = logistic_loss(x, y, w, b, l2);
        auto analytic = lg.grad_w;
        analytic.push_back(lg.grad_b);
        const auto fd = oracle::logistic_gradient_fd(dense(x), y, w, b, l2, 1e-4);
        double diff = 0.0, norm = 0.0;
        for (std::size_t k = 0; k < fd.size(); ++k) {
            diff += (analytic[k] - fd[k]) * (analytic[k] - fd[k]);
            norm += fd[k] * fd[k];
        }
        worst_rel = std::max(worst_rel, std::sqrt(diff) / std::max(std::sqrt(norm), 1e-12));
    }

    // separable blobs
    ActivationDataset blobs;
    blobs.features = MatrixD(400, 4);
    for (std::size_t i = 0; i < 400; ++i) {
        const int label = i < 200 ? 0 : 1;
        for (std::size_t k = 0; k < 4; ++k) {
            blobs.features(i, k) = 0.5 * rng.normal() + (k == 0 ? (label ? 3.0 : -3.0) : 0.0);
        }
        blobs.labels.push_back(label);
        blobs.topics.push_back("blobs");
    }
    const double blob_acc = evaluate(train_logistic(blobs), blobs).accuracy;

    // shared label direction injected into tiny-model activations
    const auto& vocab = fixtures::gpt2_vocab();
    auto cfg = fixtures::tiny_config();
    cfg.vocab_size = vocab.size();
    cfg.n_ctx = 64;
    const auto model = make_tiny_model(21, cfg, 0.1);
    std::vector<PromptCase> cases;
    for (const Topic t : kTopics) {
        auto c = generate_cases(t, 60, 4);
        cases.insert(cases.end(), c.begin(), c.end());
    }
    for (std::size_t i = 0; i < cases.size(); ++i) {
        cases[i].label = static_cast<int>(i % 2);
    }
    auto data = collect_activations(model, vocab, cases, 1, HookSite::ResidPost, 0);
    std::vector<double> mean, sd;
    feature_stats(data.features, mean, sd);
    const double typical = std::accumulate(sd.begin(), sd.end(), 0.0) / static_cast<double>(sd.size());
    inject_label_direction(data, 3.0 * typical, 99);
    const auto report = cross_topic_eval(data, "corporate_finance", "stock_trading");
    const double held_out = report.held_out_eval.accuracy;

    return check(worst_rel <= 1e-5 && blob_acc >= 0.99 && held_out >= 0.95,
                 "gradient rel. err " + fmt("%.1e", worst_rel) + "; blob accuracy " + fmt("%.3f", blob_acc) +
                     "; held-out stock_trading accuracy " + fmt("%.3f", held_out));
}

Outcome c7_pca() {
    Rng rng{707};
    double worst_vec = 0.0, worst_orth = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
        MatrixD x = random_matrix(rng, 40, 5);
        for (std::size_t i = 0; i < 40; ++i) {
            for (std::size_t k = 0; k < 5; ++k) {
                x(i, k) *= 1.0 + 1.5 * static_cast<double>(k);
            }
        }
        const auto mix = random_matrix(rng, 5, 5);
        MatrixD y(40, 5);
        for (std::size_t i = 0; i < 40; ++i) {
            for (std::size_t j = 0; j < 5; ++j) {
                for (std::size_t k = 0; k < 5; ++k) {
                    y(i, j) += x(i, k) * mix(k, j);
                }
            }
        }
        const auto ref = oracle::jacobi_eigen(oracle::covariance(dense(y)));
        const auto p = pca_fit(y, static_cast<std::uint64_t>(trial));
        for (std::size_t c = 0; c < 2; ++c) {
            double plus = 0.0, minus = 0.0;
            for (std::size_t k = 0; k < 5; ++k) {
                plus = std::max(plus, std::abs(p.components(c, k) - ref.vectors[c][k]));
                minus = std::max(minus, std::abs(p.components(c, k) + ref.vectors[c][k]));
            }
            worst_vec = std::max(worst_vec, std::min(plus, minus));
        }
        double n0 = 0.0, n1 = 0.0, cross = 0.0;
        for (std::size_t k = 0; k < 5; ++k) {
            n0 += p.components(0, k) * p.components(0, k);
            n1 += p.components(1, k) * p.components(1, k);
            cross += p.components(0, k) * p.components(1, k);
        }
        worst_orth = std::max({worst_orth, std::abs(n0 - 1.0), std::abs(n1 - 1.0), std::abs(cross)});
    }
    return check(worst_vec <= 1e-6 && worst_orth <= 1e-6,
                 "40 covariances: worst component error " + fmt("%.1e", worst_vec) + ", orthonormality " +
                     fmt("%.1e", worst_orth));
}

Outcome c8_growth_arithmetic() {
    const double g = growth_percent(50, 30);
    std::size_t total = 0, consistent = 0;
    for (const Topic t : kTopics) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            for (const PromptCase& pc : generate_cases(t, 200, seed)) {
                ++total;
                if (!pc.operands) {
                    continue;
                }
                const auto [old_v, new_v] = *pc.operands;
                const auto parsed = parse_first_number(pc.correct_answer);
                const auto fmt_int = [](double v) { return std::to_string(static_cast<long long>(v)); };
                const bool ok = pc.correct_answer == render_growth_answer(old_v, new_v) && parsed &&
                                std::abs(*parsed - growth_percent(old_v, new_v)) <= 0.5 &&
                                pc.prompt.find(fmt_int(old_v)) != std::string::npos &&
                                pc.prompt.find(fmt_int(new_v)) != std::string::npos &&
                                pc.topic == topic_name(t);
                consistent += ok;
            }
        }
    }
    return check(g == -40.0 && consistent == total, "growth_percent(50, 30) = " + fmt("%.17g", g) + "; " +
                                                        std::to_string(consistent) + "/" + std::to_string(total) +
                                                        " generated cases self-consistent");
}

int cli(const std::vector<std::string>& args, std::string& log) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    log += err.str();
    return code;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        files[e.path().filename().string()] = scratch::read_file(e.path());
    }
    return files;
}

Outcome c9_determinism() {
    const std::vector<std::string> vocab_args = {"--vocab", fixtures::path("gpt2/vocab.json").string(), "--merges",
                                                 fixtures::path("gpt2/merges.txt").string()};
    std::vector<std::map<std::string, std::string>> runs;
    scratch::TempDir a{"accept_a"}, b{"accept_b"};
    for (const scratch::TempDir* dir : {&a, &b}) {
        const std::string out = dir->str();
        const std::string cases = dir->str("cases.jsonl");
        std::string log;
        const std::vector<std::vector<std::string>> steps = {
            {"gen", "--count", "12", "--synthetic-labels", "--seed", "7", "--out", out},
            {"trace", "--cases", cases, "--limit", "5", "--average", "--seed", "7", "--out", out},
            {"ablate", "--cases", cases, "--sweep", "--out", out},
            {"probe", "--cases", cases, "--label-source", "file", "--inject", "1.0", "--seed", "7", "--out", out},
        };
        for (auto step : steps) {
            step.insert(step.end(), vocab_args.begin(), vocab_args.end());
            if (cli(step, log) != 0) {
                return fail(step.front() + " failed: " + log);
            }
        }
        runs.push_back(snapshot(dir->path()));
    }
    if (runs[0].size() != runs[1].size()) {
        return fail("runs wrote different file sets");
    }
    std::size_t bytes = 0;
    for (const auto& [name, content] : runs[0]) {
        const auto it = runs[1].find(name);
        if (it == runs[1].end() || it->second != content) {
            return fail(name + " differs between runs");
        }
        bytes += content.size();
    }
    return pass(std::to_string(runs[0].size()) + " files, " + std::to_string(bytes) + " bytes identical");
}

Outcome c10_full_scale() {
    const char* env = std::getenv("FINTERP_GPT2XL_DIR");
    if (env == nullptr || *env == '\0') {
        return skip("manual experiment; set FINTERP_GPT2XL_DIR to a GPT-2 XL checkpoint (multi-hour CPU run)");
    }
    const fs::path dir = env;
    const auto model = load_model(dir / "model.safetensors", dir / "config.json");
    const auto vocab = load_vocabulary(dir / "vocab.json", dir / "merges.txt");
    std::vector<ImpactMap> maps;
    for (const PromptCase& pc : generate_cases(Topic::CorporateFinance, 5, 0)) {
        maps.push_back(trace_grid(model, make_trace_case(vocab, pc), CorruptionSpec{}, &vocab, 0));
    }
    const ImpactMap avg = average_maps(maps);
    const SiteValue top = argmax_site(avg);
    const bool upper = 4 * top.layer >= 3 * avg.n_layers();
    const bool final_token = top.position + 1 == avg.n_tokens();
    return check(upper && final_token, "averaged argmax at layer " + std::to_string(top.layer) + " of " +
                                           std::to_string(avg.n_layers()) + ", column " +
                                           std::to_string(top.position) + " of " + std::to_string(avg.n_tokens()) +
                                           ", impact " + fmt("%.4g", top.value));
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {1, "ablation reduction arithmetic", 0.001, true, c1_reduction_arithmetic},
        {2, "full restoration and self-patch", 5, true, c2_full_restoration},
        {3, "splice-oracle equivalence", 10, true, c3_splice_oracle},
        {4, "tokenizer parity", 1, true, c4_tokenizer_parity},
        {5, "checkpoint fidelity (GPT-2 small)", 120, true, c5_checkpoint_fidelity},
        {6, "probe correctness", 30, true, c6_probe_correctness},
        {7, "PCA correctness", 1, true, c7_pca},
        {8, "growth arithmetic", 1, true, c8_growth_arithmetic},
        {9, "pipeline determinism", 60, true, c9_determinism},
        {10, "full-scale trace (optional, GPT-2 XL)", 1e9, false, c10_full_scale},
    };

    int gating_failures = 0;
    for (const Criterion& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.body();
        } catch (const std::exception& e) {
            o = fail(std::string{"exception: "} + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (o.status == Status::Pass && secs > c.budget_seconds) {
            o = fail(o.detail + "; took longer than the " + fmt("%g", c.budget_seconds) + " s budget");
        }
        const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Fail ? "FAIL" : "SKIPPED";
        const std::string elapsed = secs < 1.0 ? fmt("%.2f ms", secs * 1e3) : fmt("%.2f s", secs);
        std::printf("[%s] %d %s (%s): %s%s\n", tag, c.id, c.title.c_str(), elapsed.c_str(), o.detail.c_str(),
                    c.gating ? "" : " [non-gating]");
        std::fflush(stdout);
        if (o.status == Status::Fail && c.gating) {
            ++gating_failures;
        }
    }
    return gating_failures == 0 ? 0 : 1;
}
