// SPDX-License-Identifier: Apache-2.0
//
// Layer suppression: zero a block's attention and MLP outputs so the
// residual stream passes through it unchanged, then measure how the
// probability of a target token moves.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "finterp/model.hpp"

namespace finterp {

enum class AblationScope {
    AllPositions,
    FinalToken,  // only the last prompt position is suppressed
};

/// Next-token distribution with block `layer` suppressed. Throws
/// InvalidArgument when the layer does not exist.
std::vector<double> ablate_layer(const ModelBundle& model, std::span<const TokenId> tokens, std::size_t layer,
                                 AblationScope scope = AblationScope::AllPositions);

/// (p_base - p_ablated) / p_base, or nullopt when p_base is not positive.
std::optional<double> relative_reduction(double p_base, double p_ablated);

struct AblationResult {
    std::size_t layer = 0;
    TokenId target_token = 0;
    double p_base = 0.0;
    double p_ablated = 0.0;
    std::optional<double> relative_reduction;

    bool operator==(const AblationResult&) const = default;
};

AblationResult confidence_reduction(const ModelBundle& model, std::span<const TokenId> tokens, TokenId target,
                                    std::size_t layer, AblationScope scope = AblationScope::AllPositions);

/// One result per layer, sharing a single base pass.
std::vector<AblationResult> ablation_sweep(const ModelBundle& model, std::span<const TokenId> tokens,
                                           TokenId target, AblationScope scope = AblationScope::AllPositions);

/// A fraction as a percentage with one decimal, e.g. 0.818 -> "81.8%".
std::string format_percent(double fraction);

/// CSV with header `layer,p_base,p_ablated,relative_reduction`; an undefined
/// reduction is written as an empty field.
std::string ablation_csv(std::span<const AblationResult> results);

}  // namespace finterp
