// SPDX-License-Identifier: Apache-2.0

#include "finterp/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "finterp/ablation.hpp"
#include "finterp/error.hpp"
#include "finterp/findata.hpp"
#include "finterp/model.hpp"
#include "finterp/probes.hpp"
#include "finterp/random.hpp"
#include "finterp/tokenizer.hpp"
#include "finterp/tracing.hpp"

namespace fs = std::filesystem;

namespace finterp::cli {

namespace {

// Bad flag values or combinations detected after parsing.
class UsageError : public Error {
public:
    using Error::Error;
};

// Reads a JSON object as a config file. Top-level scalars and arrays set
// root options; a nested object sets the options of the subcommand with
// that name. Keys may use '_' in place of '-'.
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
        return dump(app, default_also).dump(2) + "\n";
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(input);
        } catch (const nlohmann::json::exception& e) {
            throw CLI::ConversionError(std::string{"config file is not valid JSON: "} + e.what());
        }
        if (!doc.is_object()) {
            throw CLI::ConversionError("config file must hold a JSON object");
        }
        std::vector<CLI::ConfigItem> items;
        collect(doc, {}, items);
        return items;
    }

private:
    static std::string option_name(std::string key) {
        std::replace(key.begin(), key.end(), '_', '-');
        return key;
    }

    static std::string scalar(const nlohmann::json& v) {
        if (v.is_string()) {
            return v.get<std::string>();
        }
        if (v.is_boolean()) {
            return v.get<bool>() ? "true" : "false";
        }
        if (v.is_number_unsigned()) {
            return std::to_string(v.get<std::uint64_t>());
        }
        if (v.is_number_integer()) {
            return std::to_string(v.get<std::int64_t>());
        }
        if (v.is_number_float()) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
            return buf;
        }
        throw CLI::ConversionError("config values must be strings, numbers, booleans or arrays of those");
    }

    static void collect(const nlohmann::json& obj, const std::vector<std::string>& parents,
                        std::vector<CLI::ConfigItem>& items) {
        for (const auto& [key, value] : obj.items()) {
            if (value.is_null()) {
                continue;
            }
            if (value.is_object()) {
                auto sub = parents;
                sub.push_back(key);
                collect(value, sub, items);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = option_name(key);
            if (value.is_array()) {
                for (const auto& v : value) {
                    item.inputs.push_back(scalar(v));
                }
            } else {
                item.inputs.push_back(scalar(value));
            }
            items.push_back(std::move(item));
        }
    }

    static nlohmann::ordered_json dump(const CLI::App* app, bool default_also) {
        nlohmann::ordered_json doc = nlohmann::ordered_json::object();
        for (const CLI::Option* opt : app->get_options()) {
            if (opt->get_lnames().empty() || !opt->get_configurable()) {
                continue;
            }
            const std::string& name = opt->get_lnames().front();
            if (opt->count() > 0) {
                const auto& results = opt->results();
                if (results.size() == 1) {
                    doc[name] = results.front();
                } else {
                    doc[name] = results;
                }
            } else if (default_also && !opt->get_default_str().empty()) {
                doc[name] = opt->get_default_str();
            }
        }
        for (const CLI::App* sub : app->get_subcommands({})) {
            auto child = dump(sub, default_also);
            if (!child.empty()) {
                doc[sub->get_name()] = std::move(child);
            }
        }
        return doc;
    }
};

struct Shared {
    std::string model = "tiny";
    std::string vocab;
    std::string merges;
    std::uint64_t seed = 0;
    double noise_mult = 3.0;
    std::string out = "out";
    std::size_t layer = 0;
    bool layer_set = false;
    std::string site;
    unsigned threads = 0;
};

struct CaseSource {
    std::string cases;
    std::string prompt;
    std::string answer;
};

struct TraceOpts {
    CaseSource src;
    bool average = false;
    std::size_t limit = 0;
    std::vector<std::size_t> span;
};

struct AblateOpts {
    CaseSource src;
    std::size_t case_index = 0;
    bool sweep = false;
    bool final_only = false;
    std::string target;
};

struct ProbeOpts {
    std::string cases;
    std::string train_topic = "corporate_finance";
    std::string test_topic = "stock_trading";
    std::string label_source = "model";
    double inject = 0.0;
    ProbeHyperparams hp;
};

struct GenOpts {
    std::string topic = "all";
    std::size_t count = 5;
    int min = 10;
    int max = 200;
    bool synthetic_labels = false;
};

struct TokenizeOpts {
    std::string text;
};

struct Loaded {
    Vocabulary vocab;
    ModelBundle model;
};

void require_file(const fs::path& p, const char* what) {
    std::error_code ec;
    if (!fs::is_regular_file(p, ec)) {
        throw IoError(std::string{what} + " not found: " + p.string());
    }
}

// "tiny" or "tiny:SEED" builds a seeded random model over the given vocab.
std::optional<std::uint64_t> tiny_seed(const std::string& model) {
    if (model == "tiny") {
        return 0;
    }
    if (model.rfind("tiny:", 0) == 0) {
        const std::string digits = model.substr(5);
        if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            throw UsageError("--model tiny:SEED needs a decimal seed, got \"" + model + "\"");
        }
        try {
            return std::stoull(digits);
        } catch (const std::out_of_range&) {
            throw UsageError("--model seed out of range: " + digits);
        }
    }
    return std::nullopt;
}

Vocabulary load_vocab(const Shared& sh) {
    fs::path vocab = sh.vocab;
    fs::path merges = sh.merges;
    if (!tiny_seed(sh.model)) {
        const fs::path dir = fs::is_directory(sh.model) ? fs::path{sh.model} : fs::path{sh.model}.parent_path();
        if (vocab.empty()) {
            vocab = dir / "vocab.json";
        }
        if (merges.empty()) {
            merges = dir / "merges.txt";
        }
    }
    if (vocab.empty() || merges.empty()) {
        throw UsageError("--vocab and --merges are required with a tiny model");
    }
    require_file(vocab, "vocabulary file");
    require_file(merges, "merges file");
    return load_vocabulary(vocab, merges);
}

Loaded load(const Shared& sh) {
    Vocabulary vocab = load_vocab(sh);
    if (const auto seed = tiny_seed(sh.model)) {
        ModelConfig cfg;
        cfg.n_layers = 2;
        cfg.d_model = 16;
        cfg.n_heads = 4;
        cfg.d_mlp = 64;
        cfg.vocab_size = vocab.size();
        cfg.n_ctx = 64;
        return {std::move(vocab), make_tiny_model(*seed, cfg)};
    }
    fs::path weights = sh.model;
    if (fs::is_directory(weights)) {
        weights /= "model.safetensors";
    }
    const fs::path config = weights.parent_path() / "config.json";
    require_file(weights, "model weights");
    require_file(config, "model config");
    ModelBundle model = load_model(weights, config);
    if (model.config.vocab_size != vocab.size()) {
        throw FormatError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model expects " +
                          std::to_string(model.config.vocab_size));
    }
    return {std::move(vocab), std::move(model)};
}

void check_shared(const Shared& sh) {
    if (!(sh.noise_mult > 0.0) || !std::isfinite(sh.noise_mult)) {
        throw UsageError("--noise-mult must be a positive finite number");
    }
    if (sh.out.empty()) {
        throw UsageError("--out must not be empty");
    }
}

void check_layer(const Shared& sh, const ModelBundle& model) {
    if (sh.layer_set && sh.layer >= model.config.n_layers) {
        throw UsageError("--layer " + std::to_string(sh.layer) + " is out of range; the model has " +
                         std::to_string(model.config.n_layers) + " layers");
    }
}

fs::path out_dir(const Shared& sh) {
    const fs::path dir = sh.out;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    }
    return dir;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    f << content;
    f.close();
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

std::string num(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::vector<PromptCase> read_cases(const CaseSource& src, bool need_answer) {
    const bool inline_case = !src.prompt.empty() || !src.answer.empty();
    if (!src.cases.empty() && inline_case) {
        throw UsageError("give either --cases or --prompt/--answer, not both");
    }
    if (!src.cases.empty()) {
        require_file(src.cases, "cases file");
        auto cases = load_cases_jsonl(src.cases);
        if (cases.empty()) {
            throw FormatError(src.cases + ": no cases");
        }
        return cases;
    }
    if (src.prompt.empty()) {
        throw UsageError("a case source is required: --cases FILE or --prompt TEXT");
    }
    if (need_answer && src.answer.empty()) {
        throw UsageError("--answer is required with --prompt");
    }
    PromptCase pc;
    pc.prompt = src.prompt;
    pc.correct_answer = src.answer;
    return {pc};
}

void write_trace(const fs::path& dir, const std::string& stem, const ImpactMap& map) {
    write_file(dir / (stem + ".csv"), impact_csv(map));
    write_file(dir / (stem + ".json"), impact_json(map).dump(2) + "\n");
    write_file(dir / (stem + ".svg"), heatmap_svg(map));
}

void cmd_trace(const Shared& sh, const TraceOpts& opt, std::ostream& out) {
    check_shared(sh);
    if (!sh.site.empty() && sh.site != "resid_pre") {
        throw UsageError("trace patches resid_pre only; got --site " + sh.site);
    }
    if (sh.layer_set) {
        throw UsageError("trace covers every layer; --layer does not apply");
    }
    if (!opt.span.empty() && (opt.span.size() != 2 || opt.span[0] >= opt.span[1])) {
        throw UsageError("--span takes BEGIN END with BEGIN < END");
    }
    auto cases = read_cases(opt.src, true);
    if (opt.limit > 0 && cases.size() > opt.limit) {
        cases.resize(opt.limit);
    }
    const Loaded ld = load(sh);
    const fs::path dir = out_dir(sh);
    const CorruptionSpec spec{sh.noise_mult, sh.seed};

    std::vector<ImpactMap> maps;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const TraceCase tc = opt.span.empty()
                                 ? make_trace_case(ld.vocab, cases[i])
                                 : TraceCase::create(ld.vocab, cases[i].prompt, cases[i].correct_answer,
                                                     opt.span[0], opt.span[1]);
        ImpactMap map = trace_grid(ld.model, tc, spec, &ld.vocab, sh.threads);
        char stem[32];
        std::snprintf(stem, sizeof stem, "trace_%03zu", i);
        write_trace(dir, stem, map);
        const SiteValue top = argmax_site(map);
        out << stem << ": p_clean " << num("%.6g", map.p_clean) << ", p_corrupt " << num("%.6g", map.p_corrupt)
            << ", max impact " << num("%.6g", top.value) << " at layer " << top.layer << ", position "
            << top.position << "\n";
        maps.push_back(std::move(map));
    }
    if (opt.average) {
        const ImpactMap avg = average_maps(maps);
        write_trace(dir, "trace_average", avg);
        const SiteValue top = argmax_site(avg);
        out << "trace_average (" << avg.n_maps << " cases): max impact " << num("%.6g", top.value) << " at layer "
            << top.layer << ", " << avg.n_tokens() - 1 - top.position << " positions before the final token\n";
    }
}

void cmd_ablate(const Shared& sh, const AblateOpts& opt, std::ostream& out) {
    check_shared(sh);
    if (!sh.site.empty()) {
        throw UsageError("ablate suppresses whole blocks; --site does not apply");
    }
    if (opt.sweep == sh.layer_set) {
        throw UsageError("ablate needs exactly one of --layer N or --sweep");
    }
    const auto cases = read_cases(opt.src, false);
    if (opt.case_index >= cases.size()) {
        throw UsageError("--case-index " + std::to_string(opt.case_index) + " is out of range; there are " +
                         std::to_string(cases.size()) + " cases");
    }
    const PromptCase& pc = cases[opt.case_index];
    const Loaded ld = load(sh);
    check_layer(sh, ld.model);
    const auto tokens = ld.vocab.encode(pc.prompt).ids;
    if (tokens.empty()) {
        throw UsageError("the prompt encodes to no tokens");
    }

    TokenId target = 0;
    if (!opt.target.empty()) {
        target = answer_token(ld.vocab, opt.target);
    } else if (!pc.correct_answer.empty()) {
        target = answer_token(ld.vocab, pc.correct_answer);
    } else {
        target = argmax_last(forward(ld.model, tokens, {}, {}, LogitsScope::LastPosition).logits);
    }
    const AblationScope scope = opt.final_only ? AblationScope::FinalToken : AblationScope::AllPositions;
    std::vector<AblationResult> results;
    if (opt.sweep) {
        results = ablation_sweep(ld.model, tokens, target, scope);
    } else {
        results.push_back(confidence_reduction(ld.model, tokens, target, sh.layer, scope));
    }
    write_file(out_dir(sh) / "ablation.csv", ablation_csv(results));
    out << "target token " << target << " (" << ld.vocab.token(target) << ")\n";
    for (const AblationResult& r : results) {
        out << "layer " << r.layer << ": p " << num("%.4g", r.p_base) << " -> " << num("%.4g", r.p_ablated)
            << ", reduction "
            << (r.relative_reduction ? format_percent(*r.relative_reduction) : std::string{"undefined"}) << "\n";
    }
}

void cmd_probe(const Shared& sh, const ProbeOpts& opt, std::ostream& out) {
    check_shared(sh);
    if (opt.label_source != "model" && opt.label_source != "file") {
        throw UsageError("--label-source must be model or file");
    }
    if (opt.inject < 0.0 || !std::isfinite(opt.inject)) {
        throw UsageError("--inject must be a non-negative number");
    }
    HookSite site = HookSite::ResidPost;
    if (!sh.site.empty()) {
        try {
            site = parse_block_site(sh.site);
        } catch (const InvalidArgument& e) {
            throw UsageError(e.what());
        }
    }
    for (const std::string& t : {opt.train_topic, opt.test_topic}) {
        try {
            parse_topic(t);
        } catch (const InvalidArgument& e) {
            throw UsageError(e.what());
        }
    }
    if (opt.cases.empty()) {
        throw UsageError("probe needs --cases FILE");
    }
    require_file(opt.cases, "cases file");
    const auto cases = load_cases_jsonl(opt.cases);
    const Loaded ld = load(sh);
    check_layer(sh, ld.model);
    const std::size_t layer =
        sh.layer_set ? sh.layer : (ld.model.config.n_layers >= 2 ? ld.model.config.n_layers - 2 : 0);

    std::vector<PromptCase> labeled;
    nlohmann::ordered_json label_counts;
    if (opt.label_source == "file") {
        for (std::size_t i = 0; i < cases.size(); ++i) {
            if (!cases[i].label) {
                throw FormatError(opt.cases + ": case " + std::to_string(i + 1) +
                                  " has no label; use --label-source model");
            }
        }
        labeled = cases;
    } else {
        std::size_t clean = 0, hallucinated = 0, unparseable = 0;
        for (const PromptCase& pc : cases) {
            LabelOutcome o = label_case(ld.model, ld.vocab, pc);
            switch (o.status) {
                case LabelStatus::Clean: ++clean; break;
                case LabelStatus::Hallucinated: ++hallucinated; break;
                case LabelStatus::Unparseable: ++unparseable; continue;
            }
            labeled.push_back(std::move(o.labeled));
        }
        label_counts = {{"clean", clean}, {"hallucinated", hallucinated}, {"unparseable", unparseable}};
        if (labeled.empty()) {
            throw InvalidArgument("none of the " + std::to_string(cases.size()) +
                                  " continuations contained a number, so no case could be labeled");
        }
    }

    ActivationDataset data = collect_activations(ld.model, ld.vocab, labeled, layer, site, sh.threads);
    if (opt.inject > 0.0) {
        inject_label_direction(data, opt.inject, sh.seed);
    }
    const CrossTopicReport report = cross_topic_eval(data, opt.train_topic, opt.test_topic, opt.hp);
    const PCAProjection pca = pca_fit(data.features, sh.seed);
    const MatrixD coords = pca_transform(pca, data.features);

    nlohmann::ordered_json doc;
    doc["cases"] = cases.size();
    doc["labeled"] = labeled.size();
    doc["layer"] = layer;
    doc["site"] = data.site;
    doc["label_source"] = opt.label_source;
    if (opt.label_source == "model") {
        doc["labels"] = label_counts;
    }
    doc["inject_strength"] = opt.inject;
    doc["evaluation"] = report.to_json();
    doc["pca_explained_variance"] = {pca.explained_variance[0], pca.explained_variance[1]};

    const fs::path dir = out_dir(sh);
    write_file(dir / "probe.json", report.probe.to_json().dump(2) + "\n");
    write_file(dir / "probe_report.json", doc.dump(2) + "\n");
    write_file(dir / "pca_scatter.csv", scatter_csv(coords, data));

    const Evaluation& ev = report.held_out_eval;
    out << "probe on blocks." << layer << "." << data.site << ": train " << report.train_topic << ", test "
        << report.test_topic << (report.held_out ? "" : " (not held out)") << "\n";
    out << "accuracy " << num("%.4f", ev.accuracy) << " (tp " << ev.confusion.true_positive << ", fp "
        << ev.confusion.false_positive << ", tn " << ev.confusion.true_negative << ", fn "
        << ev.confusion.false_negative << ")\n";
}

void cmd_gen(const Shared& sh, const GenOpts& opt, std::ostream& out) {
    check_shared(sh);
    std::vector<Topic> topics;
    if (opt.topic == "all") {
        topics.assign(std::begin(kTopics), std::end(kTopics));
    } else {
        try {
            topics.push_back(parse_topic(opt.topic));
        } catch (const InvalidArgument& e) {
            throw UsageError(e.what());
        }
    }
    if (opt.count == 0) {
        throw UsageError("--count must be positive");
    }
    if (opt.min <= 0 || opt.min > opt.max) {
        throw UsageError("--min and --max must satisfy 0 < min <= max");
    }
    std::vector<PromptCase> all;
    for (const Topic t : topics) {
        auto cases = generate_cases(t, opt.count, sh.seed, ValueRange{opt.min, opt.max});
        if (opt.synthetic_labels) {
            // Balanced labels in a seeded order.
            std::vector<int> labels(cases.size());
            for (std::size_t i = 0; i < labels.size(); ++i) {
                labels[i] = static_cast<int>(i % 2);
            }
            Rng rng{sh.seed ^ 0x6c6162656c73ULL ^ static_cast<std::uint64_t>(t)};
            for (std::size_t i = labels.size(); i > 1; --i) {
                std::swap(labels[i - 1], labels[rng.below(i)]);
            }
            for (std::size_t i = 0; i < cases.size(); ++i) {
                cases[i].label = labels[i];
            }
        }
        all.insert(all.end(), cases.begin(), cases.end());
    }
    const fs::path path = out_dir(sh) / "cases.jsonl";
    write_file(path, cases_to_jsonl(all));
    out << "wrote " << all.size() << " cases to " << path.string() << "\n";
}

void cmd_tokenize(const Shared& sh, const TokenizeOpts& opt, std::ostream& out) {
    const Vocabulary vocab = load_vocab(sh);
    const TokenSequence seq = vocab.encode(opt.text);
    nlohmann::ordered_json doc;
    doc["ids"] = seq.ids;
    nlohmann::json tokens = nlohmann::json::array();
    for (const TokenId id : seq.ids) {
        tokens.push_back(vocab.token(id));
    }
    doc["tokens"] = std::move(tokens);
    out << doc.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
}

void add_case_source(CLI::App* sub, CaseSource& src) {
    sub->add_option("--cases", src.cases, "JSONL case file");
    sub->add_option("--prompt", src.prompt, "single prompt instead of --cases");
    sub->add_option("--answer", src.answer, "correct answer for --prompt, e.g. \" -40%\"");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Causal tracing, layer ablation and linear probes for GPT-2 style models", "finterp"};
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--config", "", "JSON config file; command-line flags override its values");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1);
    app.fallthrough();

    Shared sh;
    app.add_option("--model", sh.model, "model directory, .safetensors file, or tiny[:SEED]")->capture_default_str();
    app.add_option("--vocab", sh.vocab, "vocab.json (defaults to the model directory)");
    app.add_option("--merges", sh.merges, "merges.txt (defaults to the model directory)");
    app.add_option("--seed", sh.seed, "seed for corruption noise, generation, injection and PCA")->capture_default_str();
    app.add_option("--noise-mult", sh.noise_mult, "noise std as a multiple of the embedding std")->capture_default_str();
    app.add_option("--out", sh.out, "output directory")->capture_default_str();
    CLI::Option* layer_opt = app.add_option("--layer", sh.layer, "layer index");
    app.add_option("--site", sh.site, "hook site: resid_pre, attn_out, mlp_out or resid_post");
    app.add_option("--threads", sh.threads, "worker threads, 0 = all cores")->capture_default_str();

    TraceOpts trace;
    auto* trace_cmd = app.add_subcommand("trace", "causal-trace heatmaps over layers x tokens");
    add_case_source(trace_cmd, trace.src);
    trace_cmd->add_flag("--average", trace.average, "also write the right-aligned mean map");
    trace_cmd->add_option("--limit", trace.limit, "use only the first N cases (0 = all)");
    trace_cmd->add_option("--span", trace.span, "token range to corrupt: BEGIN END (default: operand tokens)")
        ->expected(2);

    AblateOpts ablate;
    auto* ablate_cmd = app.add_subcommand("ablate", "suppress one block or every block in turn");
    add_case_source(ablate_cmd, ablate.src);
    ablate_cmd->add_option("--case-index", ablate.case_index, "case to use from --cases");
    ablate_cmd->add_flag("--sweep", ablate.sweep, "ablate every layer");
    ablate_cmd->add_flag("--final-only", ablate.final_only, "suppress only the final prompt position");
    ablate_cmd->add_option("--target", ablate.target, "target text; its first token is measured");

    ProbeOpts probe;
    auto* probe_cmd = app.add_subcommand("probe", "train a linear probe on one topic and test on another");
    probe_cmd->add_option("--cases", probe.cases, "JSONL case file");
    probe_cmd->add_option("--train-topic", probe.train_topic)->capture_default_str();
    probe_cmd->add_option("--test-topic", probe.test_topic)->capture_default_str();
    probe_cmd->add_option("--label-source", probe.label_source, "model (greedy continuation) or file")
        ->capture_default_str();
    probe_cmd->add_option("--inject", probe.inject, "add a shared label direction of this norm to every row")
        ->capture_default_str();
    probe_cmd->add_option("--lr", probe.hp.learning_rate)->capture_default_str();
    probe_cmd->add_option("--l2", probe.hp.l2_strength)->capture_default_str();
    probe_cmd->add_option("--max-iters", probe.hp.max_iters)->capture_default_str();
    probe_cmd->add_option("--tol", probe.hp.tolerance)->capture_default_str();

    GenOpts gen;
    auto* gen_cmd = app.add_subcommand("gen", "generate synthetic growth-rate prompts");
    gen_cmd->add_option("--topic", gen.topic, "corporate_finance, stock_trading or all")->capture_default_str();
    gen_cmd->add_option("--count", gen.count, "cases per topic")->capture_default_str();
    gen_cmd->add_option("--min", gen.min)->capture_default_str();
    gen_cmd->add_option("--max", gen.max)->capture_default_str();
    gen_cmd->add_flag("--synthetic-labels", gen.synthetic_labels, "attach balanced seeded labels");

    TokenizeOpts tok;
    auto* tok_cmd = app.add_subcommand("tokenize", "print token ids as JSON");
    tok_cmd->add_option("text", tok.text, "text to encode")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::FileError& e) {
        err << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    sh.layer_set = layer_opt->count() > 0;

    try {
        if (*trace_cmd) {
            cmd_trace(sh, trace, out);
        } else if (*ablate_cmd) {
            cmd_ablate(sh, ablate, out);
        } else if (*probe_cmd) {
            cmd_probe(sh, probe, out);
        } else if (*gen_cmd) {
            cmd_gen(sh, gen, out);
        } else if (*tok_cmd) {
            cmd_tokenize(sh, tok, out);
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitEngine;
    }
    return kExitOk;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace finterp::cli
