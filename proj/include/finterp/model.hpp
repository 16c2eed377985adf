// SPDX-License-Identifier: Apache-2.0
//
// GPT-2 style decoder-only transformer with named hook points.
//
// Every forward pass is a full, single-prompt evaluation (no batch axis, no
// KV cache). At each hook point the matching interventions are applied in
// list order and then, if requested, the activation is captured, so a cache
// always holds what downstream computation actually consumed.
//
// Hook points along the residual stream of a model with L blocks:
//
//   embed_out -> blocks.0.resid_pre -> [attn] blocks.0.attn_out (added)
//             -> [mlp] blocks.0.mlp_out (added) -> blocks.0.resid_post
//             -> blocks.1.resid_pre -> ... -> blocks.{L-1}.resid_post
//             -> final_resid -> final LayerNorm -> unembedding

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "finterp/matrix.hpp"
#include "finterp/tokenizer.hpp"

namespace finterp {

enum class Activation { GeluErf, GeluTanh };

struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_mlp = 0;
    std::size_t vocab_size = 0;
    std::size_t n_ctx = 0;
    float layernorm_epsilon = 1e-5f;
    Activation activation = Activation::GeluErf;

    std::size_t d_head() const noexcept { return n_heads == 0 ? 0 : d_model / n_heads; }
    /// Throws InvalidArgument when a count is zero, d_model is not divisible
    /// by n_heads or epsilon is not positive.
    void validate() const;

    /// Reads a published GPT-2 config.json document.
    static ModelConfig from_json(const nlohmann::json& doc);
    nlohmann::json to_json() const;

    bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
    std::vector<float> scale;
    std::vector<float> shift;
};

/// y = x W + b with W stored [in x out], row-major.
struct Linear {
    Matrix weight;
    std::vector<float> bias;
};

struct BlockWeights {
    LayerNormParams ln1;
    Linear qkv;       // [d_model x 3 d_model], columns ordered q | k | v
    Linear attn_out;  // [d_model x d_model]
    LayerNormParams ln2;
    Linear mlp_in;   // [d_model x d_mlp]
    Linear mlp_out;  // [d_mlp x d_model]
};

/// Immutable once built; safe to share between threads.
struct ModelBundle {
    ModelConfig config;
    Matrix token_embedding;     // [vocab x d_model]; also the unembedding
    Matrix position_embedding;  // [n_ctx x d_model]
    std::vector<BlockWeights> blocks;
    LayerNormParams final_norm;
};

enum class HookSite { EmbedOut, ResidPre, AttnOut, MlpOut, ResidPost, FinalResid };

std::string_view site_name(HookSite site);
/// Parses a per-block site name ("resid_pre", "attn_out", "mlp_out", "resid_post").
HookSite parse_block_site(std::string_view name);

class HookPoint {
public:
    static HookPoint embed_out() { return HookPoint{HookSite::EmbedOut, 0}; }
    static HookPoint final_resid() { return HookPoint{HookSite::FinalResid, 0}; }
    /// Per-block site; `site` must be one of the four block sites.
    static HookPoint block(std::size_t layer, HookSite site);
    static HookPoint resid_pre(std::size_t layer) { return block(layer, HookSite::ResidPre); }
    static HookPoint attn_out(std::size_t layer) { return block(layer, HookSite::AttnOut); }
    static HookPoint mlp_out(std::size_t layer) { return block(layer, HookSite::MlpOut); }
    static HookPoint resid_post(std::size_t layer) { return block(layer, HookSite::ResidPost); }

    /// Parses "embed_out", "final_resid" or "blocks.{layer}.{site}".
    static HookPoint parse(std::string_view name);

    HookSite site() const noexcept { return site_; }
    std::size_t layer() const noexcept { return layer_; }
    bool is_block_site() const noexcept;
    std::string name() const;

    /// Throws InvalidArgument if the layer does not exist in `config`.
    void validate(const ModelConfig& config) const;
    /// Dense index in [0, 4 * n_layers + 2), in forward-pass order.
    std::size_t index(std::size_t n_layers) const noexcept;

    auto operator<=>(const HookPoint&) const = default;

private:
    HookPoint(HookSite site, std::size_t layer) : site_{site}, layer_{layer} {}
    HookSite site_;
    std::size_t layer_;
};

/// Every hook point of a model, in forward-pass order.
std::vector<HookPoint> all_hook_points(const ModelConfig& config);

struct ReplaceWith {
    std::vector<float> values;
};
struct ZeroOut {};
struct ScaleBy {
    float factor = 1.0f;
};

/// Edit applied to one position of one hook point's activation.
struct Intervention {
    HookPoint hook;
    std::size_t position = 0;
    std::variant<ReplaceWith, ZeroOut, ScaleBy> action;

    static Intervention replace(HookPoint hook, std::size_t position, std::vector<float> values) {
        return {hook, position, ReplaceWith{std::move(values)}};
    }
    static Intervention zero(HookPoint hook, std::size_t position) { return {hook, position, ZeroOut{}}; }
    static Intervention scale(HookPoint hook, std::size_t position, float factor) {
        return {hook, position, ScaleBy{factor}};
    }
};

/// Captured activations of one forward pass, keyed by hook point name.
/// Every tensor is [n_pos x d_model].
class ActivationCache {
public:
    void insert(const HookPoint& hook, Matrix activation);
    bool contains(const HookPoint& hook) const { return entries_.contains(hook.name()); }
    const Matrix& at(const HookPoint& hook) const;
    const Matrix& at(std::string_view name) const;
    std::size_t size() const noexcept { return entries_.size(); }
    const std::map<std::string, Matrix, std::less<>>& entries() const noexcept { return entries_; }

private:
    std::map<std::string, Matrix, std::less<>> entries_;
};

enum class LogitsScope { AllPositions, LastPosition };

struct ForwardResult {
    Matrix logits;  // [n_pos x vocab], or [1 x vocab] for LastPosition
    ActivationCache cache;
};

/// Runs the model on `tokens`. Throws InvalidArgument for empty or too-long
/// inputs, out-of-range token ids, and interventions that reference a
/// nonexistent layer or position or carry a wrong-sized replacement.
ForwardResult forward(const ModelBundle& model, std::span<const TokenId> tokens,
                      std::span<const Intervention> interventions = {},
                      std::span<const HookPoint> capture = {},
                      LogitsScope scope = LogitsScope::AllPositions);

/// Softmax of the final row of `logits`, computed in double with max
/// subtraction.
std::vector<double> next_token_probs(const Matrix& logits);
std::vector<double> softmax(std::span<const float> logits);

/// Index of the largest logit in the final row; ties go to the lower id.
TokenId argmax_last(const Matrix& logits);

/// Greedy continuation of up to `count` tokens (stops early at n_ctx).
std::vector<TokenId> greedy_continuation(const ModelBundle& model, std::span<const TokenId> prompt,
                                         std::size_t count);

/// Normalizes each row of `x` to zero mean, unit variance (no scale/shift).
Matrix layer_norm_normalize(const Matrix& x, float epsilon);

float gelu_erf(float x);
float gelu_tanh(float x);

/// Seeded random model. Weights and biases are N(0, init_std^2); LayerNorm
/// scales are 1 + N(0, init_std^2). Same seed gives a bit-identical bundle.
ModelBundle make_tiny_model(std::uint64_t seed, const ModelConfig& config, double init_std = 0.02);

/// Loads a GPT-2 checkpoint: safetensors weights plus the JSON config.
/// Tensor names may carry a "transformer." prefix. Throws IoError on
/// unreadable files and FormatError naming the tensor on missing tensors or
/// shape mismatches.
ModelBundle load_model(const std::filesystem::path& weights_path, const std::filesystem::path& config_path);

/// Writes model.safetensors and config.json into `dir` in the GPT-2 layout.
void save_model(const ModelBundle& model, const std::filesystem::path& dir);

}  // namespace finterp
