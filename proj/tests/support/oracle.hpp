// SPDX-License-Identifier: Apache-2.0
//
// Independent reference forward pass used only by tests.
//
// It reads the raw weights of a ModelBundle but shares no code with the
// library's forward pass: everything is double precision, attention builds
// the full masked score matrix, and edits are expressed as plain splices
// instead of hook interventions.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "finterp/model.hpp"

namespace oracle {

using Vec = std::vector<double>;
using States = std::vector<Vec>;  // [position][d_model]

struct Edits {
    /// Embedding rows replaced before block 0: position -> vector.
    std::map<std::size_t, Vec> embed;
    /// Residual rows replaced on entry to a block: (layer, position) -> vector.
    std::map<std::pair<std::size_t, std::size_t>, Vec> resid_pre;
    /// Blocks whose attention and MLP outputs are dropped.
    std::set<std::size_t> skip_layers;
    /// When set, skipping only affects this position.
    bool skip_final_only = false;
};

struct Run {
    std::vector<States> resid_pre;  // [layer]
    States final_resid;
    Vec last_probs;
    std::vector<Vec> logits;  // [position][vocab]
};

Run run(const finterp::ModelBundle& model, const std::vector<finterp::TokenId>& tokens, const Edits& edits = {});

/// Embedding rows of `tokens` (token + position), in double.
States embeddings(const finterp::ModelBundle& model, const std::vector<finterp::TokenId>& tokens);

/// Population standard deviation of all token-embedding entries.
double embedding_std(const finterp::ModelBundle& model);

/// Noise-corrupted embedding rows over [begin, end): for each position in
/// ascending order, d_model draws of sigma * N(0,1) from Rng(seed).
std::map<std::size_t, Vec> corrupted_embeddings(const finterp::ModelBundle& model,
                                                const std::vector<finterp::TokenId>& tokens, std::size_t begin,
                                                std::size_t end, double multiplier, std::uint64_t seed);

}  // namespace oracle
