// SPDX-License-Identifier: Apache-2.0
//
// Shared test fixtures.

#pragma once

#include <filesystem>
#include <string>

#include "finterp/model.hpp"
#include "finterp/tokenizer.hpp"

namespace fixtures {

inline std::filesystem::path path(const std::string& name) {
    return std::filesystem::path{FINTERP_FIXTURES} / name;
}

inline const finterp::Vocabulary& gpt2_vocab() {
    static const finterp::Vocabulary vocab =
        finterp::load_vocabulary(path("gpt2/vocab.json"), path("gpt2/merges.txt"));
    return vocab;
}

/// The desk-scale test model: 2 layers, d_model 16, vocabulary 32.
inline finterp::ModelConfig tiny_config() {
    finterp::ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 4;
    c.d_mlp = 64;
    c.vocab_size = 32;
    c.n_ctx = 16;
    return c;
}

}  // namespace fixtures
