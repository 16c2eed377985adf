// SPDX-License-Identifier: Apache-2.0
//
// Model construction: GPT-2 checkpoint I/O and seeded random models.

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "finterp/error.hpp"
#include "finterp/model.hpp"
#include "finterp/random.hpp"
#include "finterp/safetensors.hpp"

namespace finterp {

namespace {

std::size_t positive_count(const nlohmann::json& doc, std::initializer_list<const char*> keys) {
    for (const char* key : keys) {
        if (doc.contains(key) && !doc.at(key).is_null()) {
            const auto& v = doc.at(key);
            if (!v.is_number_unsigned()) {
                throw FormatError{std::string{"model config: \""} + key + "\" must be a non-negative integer"};
            }
            return v.get<std::size_t>();
        }
    }
    throw FormatError{std::string{"model config: missing \""} + *keys.begin() + "\""};
}

}  // namespace

ModelConfig ModelConfig::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) {
        throw FormatError{"model config must be a JSON object"};
    }
    ModelConfig cfg;
    cfg.n_layers = positive_count(doc, {"n_layer"});
    cfg.d_model = positive_count(doc, {"n_embd"});
    cfg.n_heads = positive_count(doc, {"n_head"});
    cfg.vocab_size = positive_count(doc, {"vocab_size"});
    cfg.n_ctx = positive_count(doc, {"n_positions", "n_ctx"});
    cfg.d_mlp = doc.contains("n_inner") && !doc.at("n_inner").is_null() ? positive_count(doc, {"n_inner"})
                                                                       : 4 * cfg.d_model;
    if (doc.contains("layer_norm_epsilon")) {
        cfg.layernorm_epsilon = doc.at("layer_norm_epsilon").get<float>();
    }
    // GPT-2 checkpoints default to the tanh approximation ("gelu_new").
    const std::string act = doc.value("activation_function", std::string{"gelu_new"});
    if (act == "gelu_new" || act == "gelu_pytorch_tanh" || act == "gelu_fast") {
        cfg.activation = Activation::GeluTanh;
    } else if (act == "gelu") {
        cfg.activation = Activation::GeluErf;
    } else {
        throw FormatError{"model config: unsupported activation_function \"" + act + "\""};
    }
    try {
        cfg.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError{e.what()};
    }
    return cfg;
}

nlohmann::json ModelConfig::to_json() const {
    return {
        {"model_type", "gpt2"},
        {"n_layer", n_layers},
        {"n_embd", d_model},
        {"n_head", n_heads},
        {"n_inner", d_mlp},
        {"vocab_size", vocab_size},
        {"n_positions", n_ctx},
        {"layer_norm_epsilon", layernorm_epsilon},
        {"activation_function", activation == Activation::GeluErf ? "gelu" : "gelu_new"},
        {"tie_word_embeddings", true},
    };
}

ModelBundle make_tiny_model(std::uint64_t seed, const ModelConfig& config, double init_std) {
    config.validate();
    Rng rng{seed};
    auto gaussian = [&](std::size_t count, double mean) {
        std::vector<float> v(count);
        for (auto& x : v) {
            x = static_cast<float>(mean + init_std * rng.normal());
        }
        return v;
    };
    auto matrix = [&](std::size_t rows, std::size_t cols) { return Matrix(rows, cols, gaussian(rows * cols, 0.0)); };
    auto norm = [&](std::size_t dim) { return LayerNormParams{gaussian(dim, 1.0), gaussian(dim, 0.0)}; };
    auto linear = [&](std::size_t in, std::size_t out) {
        Linear lin;
        lin.weight = matrix(in, out);
        lin.bias = gaussian(out, 0.0);
        return lin;
    };

    const std::size_t d = config.d_model;
    ModelBundle m;
    m.config = config;
    m.token_embedding = matrix(config.vocab_size, d);
    m.position_embedding = matrix(config.n_ctx, d);
    m.blocks.reserve(config.n_layers);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        BlockWeights b;
        b.ln1 = norm(d);
        b.qkv = linear(d, 3 * d);
        b.attn_out = linear(d, d);
        b.ln2 = norm(d);
        b.mlp_in = linear(d, config.d_mlp);
        b.mlp_out = linear(config.d_mlp, d);
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = norm(d);
    return m;
}

namespace {

class TensorSource {
public:
    explicit TensorSource(safetensors::TensorMap tensors, std::string file)
        : tensors_{std::move(tensors)}, file_{std::move(file)} {
        if (!tensors_.contains("wte.weight") && tensors_.contains("transformer.wte.weight")) {
            prefix_ = "transformer.";
        }
    }

    std::vector<float> take(const std::string& name, std::vector<std::int64_t> shape) {
        const auto it = tensors_.find(prefix_ + name);
        if (it == tensors_.end()) {
            throw FormatError{file_ + ": missing tensor " + name};
        }
        if (it->second.shape != shape) {
            throw FormatError{file_ + ": tensor " + name + " has shape " + describe(it->second.shape) +
                              ", expected " + describe(shape)};
        }
        return std::move(it->second.values);
    }

    Matrix matrix(const std::string& name, std::size_t rows, std::size_t cols) {
        return Matrix(rows, cols, take(name, {static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)}));
    }
    std::vector<float> vector(const std::string& name, std::size_t n) {
        return take(name, {static_cast<std::int64_t>(n)});
    }
    LayerNormParams norm(const std::string& base, std::size_t d) {
        return {vector(base + ".weight", d), vector(base + ".bias", d)};
    }
    Linear linear(const std::string& base, std::size_t in, std::size_t out) {
        Linear lin;
        lin.weight = matrix(base + ".weight", in, out);
        lin.bias = vector(base + ".bias", out);
        return lin;
    }

private:
    static std::string describe(const std::vector<std::int64_t>& shape) {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            s += (i ? ", " : "") + std::to_string(shape[i]);
        }
        return s + "]";
    }

    safetensors::TensorMap tensors_;
    std::string file_;
    std::string prefix_;
};

}  // namespace

ModelBundle load_model(const std::filesystem::path& weights_path, const std::filesystem::path& config_path) {
    std::ifstream cfg_in{config_path};
    if (!cfg_in) {
        throw IoError{"cannot open " + config_path.string()};
    }
    nlohmann::json cfg_doc;
    try {
        cfg_doc = nlohmann::json::parse(cfg_in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError{config_path.string() + ": malformed JSON: " + e.what()};
    }

    ModelBundle m;
    m.config = ModelConfig::from_json(cfg_doc);
    const ModelConfig& c = m.config;
    const std::size_t d = c.d_model;

    // GPT-2 stores its projections as Conv1D weights, i.e. already [in x out].
    TensorSource src{safetensors::read(weights_path), weights_path.string()};
    m.token_embedding = src.matrix("wte.weight", c.vocab_size, d);
    m.position_embedding = src.matrix("wpe.weight", c.n_ctx, d);
    m.blocks.reserve(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string h = "h." + std::to_string(l) + ".";
        BlockWeights b;
        b.ln1 = src.norm(h + "ln_1", d);
        b.qkv = src.linear(h + "attn.c_attn", d, 3 * d);
        b.attn_out = src.linear(h + "attn.c_proj", d, d);
        b.ln2 = src.norm(h + "ln_2", d);
        b.mlp_in = src.linear(h + "mlp.c_fc", d, c.d_mlp);
        b.mlp_out = src.linear(h + "mlp.c_proj", c.d_mlp, d);
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = src.norm("ln_f", d);
    return m;
}

void save_model(const ModelBundle& model, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError{"cannot create " + dir.string() + ": " + ec.message()};
    }
    safetensors::TensorMap t;
    auto put_matrix = [&](const std::string& name, const Matrix& m) {
        t[name] = {"F32", {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())},
                   std::vector<float>(m.flat().begin(), m.flat().end())};
    };
    auto put_vector = [&](const std::string& name, const std::vector<float>& v) {
        t[name] = {"F32", {static_cast<std::int64_t>(v.size())}, v};
    };
    auto put_norm = [&](const std::string& base, const LayerNormParams& p) {
        put_vector(base + ".weight", p.scale);
        put_vector(base + ".bias", p.shift);
    };
    auto put_linear = [&](const std::string& base, const Linear& lin) {
        put_matrix(base + ".weight", lin.weight);
        put_vector(base + ".bias", lin.bias);
    };

    put_matrix("wte.weight", model.token_embedding);
    put_matrix("wpe.weight", model.position_embedding);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const std::string h = "h." + std::to_string(l) + ".";
        const auto& b = model.blocks[l];
        put_norm(h + "ln_1", b.ln1);
        put_linear(h + "attn.c_attn", b.qkv);
        put_linear(h + "attn.c_proj", b.attn_out);
        put_norm(h + "ln_2", b.ln2);
        put_linear(h + "mlp.c_fc", b.mlp_in);
        put_linear(h + "mlp.c_proj", b.mlp_out);
    }
    put_norm("ln_f", model.final_norm);
    safetensors::write(dir / "model.safetensors", t);

    std::ofstream cfg{dir / "config.json", std::ios::trunc};
    if (!cfg) {
        throw IoError{"cannot write " + (dir / "config.json").string()};
    }
    cfg << model.config.to_json().dump(2) << '\n';
}

}  // namespace finterp
