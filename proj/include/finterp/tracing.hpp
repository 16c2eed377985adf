// SPDX-License-Identifier: Apache-2.0
//
// Causal tracing: clean run, noise-corrupted run and single-site restoration
// patches of blocks.{l}.resid_pre over the (layer x position) grid.
//
// Corruption adds seeded Gaussian noise to the embedding output over the
// case's corrupt span. The noise is drawn from Rng(seed) position by
// position in ascending order, d_model draws per position, with standard
// deviation multiplier * (population std of all token-embedding entries).

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "finterp/matrix.hpp"
#include "finterp/model.hpp"
#include "finterp/tokenizer.hpp"

namespace finterp {

/// A prompt, its correct continuation and the token range to corrupt.
struct TraceCase {
    std::string prompt;
    std::string answer;
    std::vector<TokenId> tokens;  // encoded prompt
    TokenId answer_token = 0;     // first token of the encoded answer
    std::size_t corrupt_begin = 0;
    std::size_t corrupt_end = 0;  // exclusive

    /// Encodes prompt and answer. Throws InvalidArgument when the prompt or
    /// answer is empty or the span is empty or exceeds the prompt.
    static TraceCase create(const Vocabulary& vocab, std::string prompt, std::string answer,
                            std::size_t corrupt_begin, std::size_t corrupt_end);
};

/// First token of encode(answer). Throws InvalidArgument on an empty answer.
TokenId answer_token(const Vocabulary& vocab, std::string_view answer);

struct CorruptionSpec {
    double noise_sigma_multiplier = 3.0;
    std::uint64_t seed = 0;

    /// Throws InvalidArgument unless the multiplier is finite and positive.
    void validate() const;
};

struct RunResult {
    ActivationCache cache;  // every blocks.{l}.resid_pre
    double probability = 0.0;
};

/// Population standard deviation of the token-embedding entries.
double embedding_std(const ModelBundle& model);

/// The embed_out replacements that implement the corruption for `tc`.
std::vector<Intervention> corruption_interventions(const ModelBundle& model, const TraceCase& tc,
                                                   const CorruptionSpec& spec);

RunResult clean_run(const ModelBundle& model, const TraceCase& tc);
RunResult corrupt_run(const ModelBundle& model, const TraceCase& tc, const CorruptionSpec& spec);

/// p_patch - p_corrupt, unclamped.
inline double impact(double p_patch, double p_corrupt) { return p_patch - p_corrupt; }

struct ImpactMap {
    MatrixD values;  // [n_layers x n_tokens]
    double p_clean = 0.0;
    double p_corrupt = 0.0;
    std::string site = "resid_pre";
    std::vector<std::string> token_texts;  // column labels

    // Case metadata. An averaged map has empty prompt/answer; column_counts
    // holds how many input maps cover each column.
    std::string prompt;
    std::string answer;
    TokenId answer_token = 0;
    std::size_t corrupt_begin = 0;
    std::size_t corrupt_end = 0;
    CorruptionSpec spec;
    std::size_t n_maps = 1;
    std::vector<std::size_t> column_counts;

    std::size_t n_layers() const noexcept { return values.rows(); }
    std::size_t n_tokens() const noexcept { return values.cols(); }
};

/// Precomputes the clean and corrupted runs of one case so that many patched
/// runs can share them. Read-only after construction and safe to use from
/// several threads. Column labels come from `vocab` when given, else "#id".
class Tracer {
public:
    Tracer(const ModelBundle& model, TraceCase tc, CorruptionSpec spec, const Vocabulary* vocab = nullptr);

    const TraceCase& trace_case() const noexcept { return case_; }
    const CorruptionSpec& spec() const noexcept { return spec_; }
    const RunResult& clean() const noexcept { return clean_; }
    const RunResult& corrupted() const noexcept { return corrupt_; }
    double p_clean() const noexcept { return clean_.probability; }
    double p_corrupt() const noexcept { return corrupt_.probability; }

    /// Corrupted run with blocks.{layer}.resid_pre at `position` restored
    /// from the clean cache. Throws InvalidArgument on out-of-range indices.
    double patched_prob(std::size_t layer, std::size_t position) const;

    /// Same, taking the replacement from an arbitrary cache over this case.
    double patched_prob_from(const ActivationCache& source, std::size_t layer, std::size_t position) const;

    /// Corrupted run with every resid_pre site restored at once.
    double restore_all() const;

    /// Fills every cell; `threads` = 0 uses the hardware concurrency. The
    /// result is identical for any thread count.
    ImpactMap grid(unsigned threads = 1) const;

private:
    double run_with(std::vector<Intervention> extra) const;

    const ModelBundle* model_;
    TraceCase case_;
    CorruptionSpec spec_;
    std::vector<Intervention> corruption_;
    RunResult clean_;
    RunResult corrupt_;
    std::vector<std::string> token_texts_;
};

ImpactMap trace_grid(const ModelBundle& model, const TraceCase& tc, const CorruptionSpec& spec,
                     const Vocabulary* vocab = nullptr, unsigned threads = 1);

/// Cell-wise mean after right-aligning the maps on their final token.
/// Positions a shorter map does not have are left out of that column's mean.
/// Throws InvalidArgument on an empty list or differing layer counts.
ImpactMap average_maps(std::span<const ImpactMap> maps);

struct SiteValue {
    std::size_t layer = 0;
    std::size_t position = 0;
    double value = 0.0;
    auto operator<=>(const SiteValue&) const = default;
};

/// Maximum cell; ties go to the lowest layer, then the lowest position.
/// Throws InvalidArgument on an empty map.
SiteValue argmax_site(const ImpactMap& map);

/// CSV with header `layer,position,token_text,impact`, 9 significant digits.
std::string impact_csv(const ImpactMap& map);
nlohmann::ordered_json impact_json(const ImpactMap& map);

}  // namespace finterp
