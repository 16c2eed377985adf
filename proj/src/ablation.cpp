// SPDX-License-Identifier: Apache-2.0

#include "finterp/ablation.hpp"

#include <cstdio>

#include "finterp/error.hpp"

namespace finterp {

namespace {

std::vector<Intervention> suppression(const ModelConfig& cfg, std::size_t n_tokens, std::size_t layer,
                                      AblationScope scope) {
    if (layer >= cfg.n_layers) {
        throw InvalidArgument{"layer " + std::to_string(layer) + " out of range for a " +
                              std::to_string(cfg.n_layers) + "-layer model"};
    }
    std::vector<Intervention> ivs;
    const std::size_t first = scope == AblationScope::FinalToken && n_tokens > 0 ? n_tokens - 1 : 0;
    for (std::size_t p = first; p < n_tokens; ++p) {
        ivs.push_back(Intervention::zero(HookPoint::attn_out(layer), p));
        ivs.push_back(Intervention::zero(HookPoint::mlp_out(layer), p));
    }
    return ivs;
}

double target_prob(const std::vector<double>& probs, TokenId target) {
    if (target >= probs.size()) {
        throw InvalidArgument{"target token " + std::to_string(target) + " is outside the vocabulary"};
    }
    return probs[target];
}

std::string fmt9(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

std::vector<double> ablate_layer(const ModelBundle& model, std::span<const TokenId> tokens, std::size_t layer,
                                 AblationScope scope) {
    const auto ivs = suppression(model.config, tokens.size(), layer, scope);
    return next_token_probs(forward(model, tokens, ivs, {}, LogitsScope::LastPosition).logits);
}

std::optional<double> relative_reduction(double p_base, double p_ablated) {
    if (!(p_base > 0.0)) {
        return std::nullopt;
    }
    return (p_base - p_ablated) / p_base;
}

AblationResult confidence_reduction(const ModelBundle& model, std::span<const TokenId> tokens, TokenId target,
                                    std::size_t layer, AblationScope scope) {
    AblationResult r;
    r.layer = layer;
    r.target_token = target;
    r.p_ablated = target_prob(ablate_layer(model, tokens, layer, scope), target);
    r.p_base = target_prob(next_token_probs(forward(model, tokens, {}, {}, LogitsScope::LastPosition).logits), target);
    r.relative_reduction = relative_reduction(r.p_base, r.p_ablated);
    return r;
}

std::vector<AblationResult> ablation_sweep(const ModelBundle& model, std::span<const TokenId> tokens,
                                           TokenId target, AblationScope scope) {
    const double p_base =
        target_prob(next_token_probs(forward(model, tokens, {}, {}, LogitsScope::LastPosition).logits), target);
    std::vector<AblationResult> out;
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        AblationResult r;
        r.layer = l;
        r.target_token = target;
        r.p_base = p_base;
        r.p_ablated = target_prob(ablate_layer(model, tokens, l, scope), target);
        r.relative_reduction = relative_reduction(p_base, r.p_ablated);
        out.push_back(r);
    }
    return out;
}

std::string format_percent(double fraction) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * fraction);
    return buf;
}

std::string ablation_csv(std::span<const AblationResult> results) {
    std::string out = "layer,p_base,p_ablated,relative_reduction\n";
    for (const auto& r : results) {
        out += std::to_string(r.layer) + ',' + fmt9(r.p_base) + ',' + fmt9(r.p_ablated) + ',' +
               (r.relative_reduction ? fmt9(*r.relative_reduction) : std::string{}) + '\n';
    }
    return out;
}

}  // namespace finterp
