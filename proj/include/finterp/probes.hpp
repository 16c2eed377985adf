// SPDX-License-Identifier: Apache-2.0
//
// Linear probes over residual-stream activations: dataset collection,
// L2-regularized logistic regression, evaluation and a two-component PCA.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "finterp/findata.hpp"
#include "finterp/matrix.hpp"
#include "finterp/model.hpp"
#include "finterp/tokenizer.hpp"

namespace finterp {

struct ActivationDataset {
    MatrixD features;  // [n_examples x d_model]
    std::vector<int> labels;  // 1 = hallucination, 0 = truth
    std::vector<std::string> topics;
    std::size_t layer = 0;
    std::string site = "resid_post";
    std::string position_rule = "final_token";

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t width() const noexcept { return features.cols(); }
    /// Throws InvalidArgument when row, label and topic counts disagree or a
    /// label is not 0/1.
    void validate() const;
    /// Rows whose topic equals `topic`, in order.
    ActivationDataset subset(const std::string& topic) const;
};

/// One forward pass per labeled case; the feature is blocks.{layer}.{site}
/// at the final prompt token. Cases without a label are rejected. Rows keep
/// the input order for any thread count (0 = hardware concurrency).
ActivationDataset collect_activations(const ModelBundle& model, const Vocabulary& vocab,
                                      std::span<const PromptCase> cases, std::size_t layer,
                                      HookSite site = HookSite::ResidPost, unsigned threads = 1);

/// Adds strength * (2 * label - 1) * u to every row, where u is a seeded
/// random unit vector shared by all topics.
void inject_label_direction(ActivationDataset& data, double strength, std::uint64_t seed);

struct ProbeHyperparams {
    double learning_rate = 0.1;
    double l2_strength = 1e-3;
    std::size_t max_iters = 5000;
    double tolerance = 1e-6;
    bool operator==(const ProbeHyperparams&) const = default;
};

struct ProbeModel {
    std::vector<double> weights;
    double bias = 0.0;
    std::vector<double> feature_mean;
    std::vector<double> feature_std;
    ProbeHyperparams hyperparams;
    std::vector<std::string> trained_topics;
    std::size_t layer = 0;
    std::string site;
    std::size_t iterations = 0;
    bool converged = false;
    double gradient_max_norm = 0.0;
    double final_loss = 0.0;

    bool operator==(const ProbeModel&) const = default;
    nlohmann::ordered_json to_json() const;
    static ProbeModel from_json(const nlohmann::json& doc);
};

struct LossGradient {
    double loss = 0.0;
    std::vector<double> grad_w;
    double grad_b = 0.0;
    double max_norm() const;
};

/// Mean negative log-likelihood plus (l2 / 2) * |w|^2 on already
/// standardized features, with its gradient. The bias is not regularized.
LossGradient logistic_loss(const MatrixD& x, std::span<const int> labels, std::span<const double> w, double b,
                           double l2_strength);

/// Per-dimension mean and population std; std is clamped to >= 1e-8.
void feature_stats(const MatrixD& x, std::vector<double>& mean, std::vector<double>& std);

/// Full-batch gradient descent from zero. `loss_history`, when given,
/// receives the loss before every update. Throws InvalidArgument for fewer
/// than two examples or a single class.
ProbeModel train_logistic(const ActivationDataset& data, const ProbeHyperparams& hp = {},
                          std::vector<double>* loss_history = nullptr);

/// Probability of class 1 for each row. Throws InvalidArgument when the
/// width differs from the probe's.
std::vector<double> predict(const ProbeModel& probe, const MatrixD& features);

/// 1 when p > 0.5, else 0.
inline int decide(double p) { return p > 0.5 ? 1 : 0; }

struct Confusion {
    std::size_t true_positive = 0;
    std::size_t false_positive = 0;
    std::size_t true_negative = 0;
    std::size_t false_negative = 0;
    bool operator==(const Confusion&) const = default;
};

struct GroupAccuracy {
    std::size_t count = 0;
    std::size_t correct = 0;
    double accuracy() const { return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count); }
    bool operator==(const GroupAccuracy&) const = default;
};

struct Evaluation {
    double accuracy = 0.0;
    std::map<std::string, GroupAccuracy> per_topic;
    Confusion confusion;
    nlohmann::ordered_json to_json() const;
};

/// Throws InvalidArgument on an empty dataset.
Evaluation evaluate(const ProbeModel& probe, const ActivationDataset& data);

struct CrossTopicReport {
    std::string train_topic;
    std::string test_topic;
    bool held_out = true;  // false when both topics are the same
    ProbeModel probe;
    Evaluation in_topic;
    Evaluation held_out_eval;
    nlohmann::ordered_json to_json() const;
};

/// Trains on `train_topic` rows only and evaluates on `test_topic` rows.
/// Throws InvalidArgument naming a topic that has no rows.
CrossTopicReport cross_topic_eval(const ActivationDataset& data, const std::string& train_topic,
                                  const std::string& test_topic, const ProbeHyperparams& hp = {});

/// Collects activations and runs the dataset-level evaluation.
CrossTopicReport cross_topic_eval(const ModelBundle& model, const Vocabulary& vocab,
                                  std::span<const PromptCase> cases, const std::string& train_topic,
                                  const std::string& test_topic, std::size_t layer,
                                  HookSite site = HookSite::ResidPost, const ProbeHyperparams& hp = {});

struct PCAProjection {
    std::vector<double> mean;
    MatrixD components;  // [2 x d], orthonormal rows
    std::array<double, 2> explained_variance{};
};

/// Top two principal components of the sample covariance by power iteration
/// with deflation (seeded start, tolerance 1e-10). Each component's largest
/// magnitude entry is made positive. Throws InvalidArgument for fewer than
/// three rows or data without variance.
PCAProjection pca_fit(const MatrixD& features, std::uint64_t seed = 0);

/// (x - mean) * components^T, [n x 2].
MatrixD pca_transform(const PCAProjection& projection, const MatrixD& features);

/// CSV with header `pc1,pc2,label,topic`.
std::string scatter_csv(const MatrixD& coords, const ActivationDataset& data);

}  // namespace finterp
