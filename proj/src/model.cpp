// SPDX-License-Identifier: Apache-2.0

#include "finterp/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>

#include "finterp/error.hpp"

namespace finterp {

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || vocab_size == 0 || n_ctx == 0) {
        throw InvalidArgument{"model config: all counts must be at least 1"};
    }
    if (d_model % n_heads != 0) {
        throw InvalidArgument{"model config: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                              std::to_string(n_heads)};
    }
    if (!(layernorm_epsilon > 0.0f)) {
        throw InvalidArgument{"model config: layernorm_epsilon must be positive"};
    }
}

// ---------------------------------------------------------------- hooks

std::string_view site_name(HookSite site) {
    switch (site) {
        case HookSite::EmbedOut: return "embed_out";
        case HookSite::ResidPre: return "resid_pre";
        case HookSite::AttnOut: return "attn_out";
        case HookSite::MlpOut: return "mlp_out";
        case HookSite::ResidPost: return "resid_post";
        case HookSite::FinalResid: return "final_resid";
    }
    return "?";
}

HookSite parse_block_site(std::string_view name) {
    for (const auto site : {HookSite::ResidPre, HookSite::AttnOut, HookSite::MlpOut, HookSite::ResidPost}) {
        if (site_name(site) == name) {
            return site;
        }
    }
    throw InvalidArgument{"unknown hook site \"" + std::string{name} +
                          "\" (expected resid_pre, attn_out, mlp_out or resid_post)"};
}

HookPoint HookPoint::block(std::size_t layer, HookSite site) {
    if (site == HookSite::EmbedOut || site == HookSite::FinalResid) {
        throw InvalidArgument{"hook site " + std::string{site_name(site)} + " is not a per-block site"};
    }
    return HookPoint{site, layer};
}

HookPoint HookPoint::parse(std::string_view name) {
    if (name == "embed_out") {
        return embed_out();
    }
    if (name == "final_resid") {
        return final_resid();
    }
    constexpr std::string_view prefix = "blocks.";
    if (name.starts_with(prefix)) {
        const auto rest = name.substr(prefix.size());
        const auto dot = rest.find('.');
        if (dot != std::string_view::npos && dot > 0) {
            std::size_t layer = 0;
            const auto digits = rest.substr(0, dot);
            const auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), layer);
            if (ec == std::errc{} && end == digits.data() + digits.size()) {
                return block(layer, parse_block_site(rest.substr(dot + 1)));
            }
        }
    }
    throw InvalidArgument{"malformed hook point name \"" + std::string{name} + "\""};
}

bool HookPoint::is_block_site() const noexcept {
    return site_ != HookSite::EmbedOut && site_ != HookSite::FinalResid;
}

std::string HookPoint::name() const {
    if (!is_block_site()) {
        return std::string{site_name(site_)};
    }
    return "blocks." + std::to_string(layer_) + "." + std::string{site_name(site_)};
}

void HookPoint::validate(const ModelConfig& config) const {
    if (is_block_site() && layer_ >= config.n_layers) {
        throw InvalidArgument{"hook point " + name() + " references layer " + std::to_string(layer_) +
                              " but the model has " + std::to_string(config.n_layers) + " layers"};
    }
}

std::size_t HookPoint::index(std::size_t n_layers) const noexcept {
    switch (site_) {
        case HookSite::EmbedOut: return 0;
        case HookSite::FinalResid: return 4 * n_layers + 1;
        case HookSite::ResidPre: return 1 + 4 * layer_;
        case HookSite::AttnOut: return 2 + 4 * layer_;
        case HookSite::MlpOut: return 3 + 4 * layer_;
        case HookSite::ResidPost: return 4 + 4 * layer_;
    }
    return 0;
}

std::vector<HookPoint> all_hook_points(const ModelConfig& config) {
    std::vector<HookPoint> out;
    out.reserve(4 * config.n_layers + 2);
    out.push_back(HookPoint::embed_out());
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        for (const auto site : {HookSite::ResidPre, HookSite::AttnOut, HookSite::MlpOut, HookSite::ResidPost}) {
            out.push_back(HookPoint::block(l, site));
        }
    }
    out.push_back(HookPoint::final_resid());
    return out;
}

void ActivationCache::insert(const HookPoint& hook, Matrix activation) {
    if (!entries_.empty() && entries_.begin()->second.rows() != activation.rows()) {
        throw InvalidArgument{"activation cache: " + hook.name() + " has a different position count"};
    }
    entries_.insert_or_assign(hook.name(), std::move(activation));
}

const Matrix& ActivationCache::at(const HookPoint& hook) const { return at(hook.name()); }

const Matrix& ActivationCache::at(std::string_view name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) {
        throw InvalidArgument{"activation cache has no entry for " + std::string{name}};
    }
    return it->second;
}

// ---------------------------------------------------------------- math

float gelu_erf(float x) {
    return 0.5f * x * (1.0f + std::erf(x * static_cast<float>(std::numbers::sqrt2 / 2.0)));
}

float gelu_tanh(float x) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2 / pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

namespace {

void layer_norm_into(const Matrix& x, const LayerNormParams* params, float epsilon, Matrix& out) {
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto in = x.row(i);
        double mean = 0.0;
        for (const float v : in) {
            mean += v;
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (const float v : in) {
            const double c = v - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
        auto o = out.row(i);
        for (std::size_t k = 0; k < d; ++k) {
            const auto normalized = static_cast<float>((in[k] - mean) * inv);
            o[k] = params ? normalized * params->scale[k] + params->shift[k] : normalized;
        }
    }
}

/// out = x W + b; row-major i-k-j order.
void linear_into(const Matrix& x, const Linear& lin, Matrix& out) {
    const std::size_t in_dim = lin.weight.rows();
    const std::size_t out_dim = lin.weight.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        float* o = out.row(i).data();
        std::copy(lin.bias.begin(), lin.bias.end(), o);
        const float* xi = x.row(i).data();
        for (std::size_t k = 0; k < in_dim; ++k) {
            const float a = xi[k];
            const float* w = lin.weight.row(k).data();
            for (std::size_t j = 0; j < out_dim; ++j) {
                o[j] += a * w[j];
            }
        }
    }
}

void causal_attention(const Matrix& qkv, std::size_t n_heads, Matrix& out) {
    const std::size_t n = qkv.rows();
    const std::size_t d_model = qkv.cols() / 3;
    const std::size_t d_head = d_model / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d_head));
    std::vector<float> scores(n);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t qo = h * d_head;
        const std::size_t ko = d_model + h * d_head;
        const std::size_t vo = 2 * d_model + h * d_head;
        for (std::size_t i = 0; i < n; ++i) {
            const float* q = qkv.row(i).data() + qo;
            float max_score = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                const float* k = qkv.row(j).data() + ko;
                float s = 0.0f;
                for (std::size_t d = 0; d < d_head; ++d) {
                    s += q[d] * k[d];
                }
                scores[j] = s * scale;
                max_score = std::max(max_score, scores[j]);
            }
            float total = 0.0f;
            for (std::size_t j = 0; j <= i; ++j) {
                scores[j] = std::exp(scores[j] - max_score);
                total += scores[j];
            }
            float* o = out.row(i).data() + qo;
            std::fill(o, o + d_head, 0.0f);
            for (std::size_t j = 0; j <= i; ++j) {
                const float p = scores[j] / total;
                const float* v = qkv.row(j).data() + vo;
                for (std::size_t d = 0; d < d_head; ++d) {
                    o[d] += p * v[d];
                }
            }
        }
    }
}

void add_into(Matrix& x, const Matrix& delta) {
    auto dst = x.flat();
    const auto src = delta.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

void check_interventions(const ModelConfig& config, std::size_t n_pos, std::span<const Intervention> interventions) {
    for (const auto& iv : interventions) {
        iv.hook.validate(config);
        if (iv.position >= n_pos) {
            throw InvalidArgument{"intervention at " + iv.hook.name() + " targets position " +
                                  std::to_string(iv.position) + " but the sequence has " + std::to_string(n_pos) +
                                  " tokens"};
        }
        if (const auto* r = std::get_if<ReplaceWith>(&iv.action); r && r->values.size() != config.d_model) {
            throw InvalidArgument{"intervention at " + iv.hook.name() + " has replacement of length " +
                                  std::to_string(r->values.size()) + ", expected d_model " +
                                  std::to_string(config.d_model)};
        }
    }
}

}  // namespace

Matrix layer_norm_normalize(const Matrix& x, float epsilon) {
    Matrix out(x.rows(), x.cols());
    layer_norm_into(x, nullptr, epsilon, out);
    return out;
}

ForwardResult forward(const ModelBundle& model, std::span<const TokenId> tokens,
                      std::span<const Intervention> interventions, std::span<const HookPoint> capture,
                      LogitsScope scope) {
    const ModelConfig& cfg = model.config;
    const std::size_t n = tokens.size();
    const std::size_t d = cfg.d_model;
    if (n == 0) {
        throw InvalidArgument{"forward: empty token sequence"};
    }
    if (n > cfg.n_ctx) {
        throw InvalidArgument{"forward: sequence of " + std::to_string(n) + " tokens exceeds n_ctx " +
                              std::to_string(cfg.n_ctx)};
    }
    for (const TokenId t : tokens) {
        if (t >= cfg.vocab_size) {
            throw InvalidArgument{"forward: token id " + std::to_string(t) + " out of range for vocabulary of " +
                                  std::to_string(cfg.vocab_size)};
        }
    }
    check_interventions(cfg, n, interventions);

    const std::size_t n_hooks = 4 * cfg.n_layers + 2;
    std::vector<std::vector<const Intervention*>> edits(n_hooks);
    for (const auto& iv : interventions) {
        edits[iv.hook.index(cfg.n_layers)].push_back(&iv);
    }
    std::vector<bool> captured(n_hooks, false);
    for (const auto& hp : capture) {
        hp.validate(cfg);
        captured[hp.index(cfg.n_layers)] = true;
    }

    ForwardResult result;
    auto at_hook = [&](const HookPoint& hp, Matrix& act) {
        const std::size_t idx = hp.index(cfg.n_layers);
        for (const Intervention* iv : edits[idx]) {
            auto row = act.row(iv->position);
            std::visit(
                [&](const auto& action) {
                    using A = std::decay_t<decltype(action)>;
                    if constexpr (std::is_same_v<A, ReplaceWith>) {
                        std::copy(action.values.begin(), action.values.end(), row.begin());
                    } else if constexpr (std::is_same_v<A, ZeroOut>) {
                        std::fill(row.begin(), row.end(), 0.0f);
                    } else {
                        for (auto& v : row) {
                            v *= action.factor;
                        }
                    }
                },
                iv->action);
        }
        if (captured[idx]) {
            result.cache.insert(hp, act);
        }
    };

    Matrix x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto te = model.token_embedding.row(tokens[i]);
        const auto pe = model.position_embedding.row(i);
        auto xi = x.row(i);
        for (std::size_t k = 0; k < d; ++k) {
            xi[k] = te[k] + pe[k];
        }
    }
    at_hook(HookPoint::embed_out(), x);

    Matrix normed(n, d);
    Matrix qkv(n, 3 * d);
    Matrix heads(n, d);
    Matrix delta(n, d);
    Matrix hidden(n, cfg.d_mlp);
    const auto act = cfg.activation == Activation::GeluErf ? gelu_erf : gelu_tanh;

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const BlockWeights& blk = model.blocks[l];
        at_hook(HookPoint::resid_pre(l), x);

        layer_norm_into(x, &blk.ln1, cfg.layernorm_epsilon, normed);
        linear_into(normed, blk.qkv, qkv);
        causal_attention(qkv, cfg.n_heads, heads);
        linear_into(heads, blk.attn_out, delta);
        at_hook(HookPoint::attn_out(l), delta);
        add_into(x, delta);

        layer_norm_into(x, &blk.ln2, cfg.layernorm_epsilon, normed);
        linear_into(normed, blk.mlp_in, hidden);
        for (auto& v : hidden.flat()) {
            v = act(v);
        }
        linear_into(hidden, blk.mlp_out, delta);
        at_hook(HookPoint::mlp_out(l), delta);
        add_into(x, delta);

        at_hook(HookPoint::resid_post(l), x);
    }
    at_hook(HookPoint::final_resid(), x);

    layer_norm_into(x, &model.final_norm, cfg.layernorm_epsilon, normed);
    const std::size_t first = scope == LogitsScope::LastPosition ? n - 1 : 0;
    result.logits = Matrix(n - first, cfg.vocab_size);
    for (std::size_t i = first; i < n; ++i) {
        const float* h = normed.row(i).data();
        auto out = result.logits.row(i - first);
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
            const float* e = model.token_embedding.row(v).data();
            float s = 0.0f;
            for (std::size_t k = 0; k < d; ++k) {
                s += h[k] * e[k];
            }
            out[v] = s;
        }
    }
    return result;
}

std::vector<double> softmax(std::span<const float> logits) {
    std::vector<double> p(logits.size());
    if (logits.empty()) {
        return p;
    }
    const double max_logit = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) - max_logit);
        total += p[i];
    }
    for (auto& v : p) {
        v /= total;
    }
    return p;
}

std::vector<double> next_token_probs(const Matrix& logits) {
    if (logits.rows() == 0 || logits.cols() == 0) {
        throw InvalidArgument{"next_token_probs: empty logits"};
    }
    return softmax(logits.row(logits.rows() - 1));
}

TokenId argmax_last(const Matrix& logits) {
    if (logits.rows() == 0 || logits.cols() == 0) {
        throw InvalidArgument{"argmax_last: empty logits"};
    }
    const auto row = logits.row(logits.rows() - 1);
    return static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::vector<TokenId> greedy_continuation(const ModelBundle& model, std::span<const TokenId> prompt,
                                         std::size_t count) {
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    std::vector<TokenId> out;
    while (out.size() < count && seq.size() < model.config.n_ctx) {
        const auto res = forward(model, seq, {}, {}, LogitsScope::LastPosition);
        const TokenId next = argmax_last(res.logits);
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

}  // namespace finterp
