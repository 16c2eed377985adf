// SPDX-License-Identifier: Apache-2.0

#include "finterp/probes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "finterp/error.hpp"
#include "finterp/random.hpp"

namespace finterp {

namespace {

constexpr double kMinStd = 1e-8;
constexpr double kPcaTolerance = 1e-10;
constexpr std::size_t kPcaMaxIters = 200000;

double sigmoid(double z) {
    if (z >= 0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

void normalize(std::vector<double>& v) {
    const double n = std::sqrt(dot(v, v));
    for (auto& x : v) {
        x /= n;
    }
}

// Removes the components of `v` along each (unit) row of `basis`.
void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
    for (const auto& b : basis) {
        const double p = dot(v, b);
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] -= p * b[i];
        }
    }
}

std::string fmt9(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

void ActivationDataset::validate() const {
    if (features.rows() != labels.size() || labels.size() != topics.size()) {
        throw InvalidArgument{"dataset has " + std::to_string(features.rows()) + " rows, " +
                              std::to_string(labels.size()) + " labels and " + std::to_string(topics.size()) +
                              " topics"};
    }
    for (const int y : labels) {
        if (y != 0 && y != 1) {
            throw InvalidArgument{"labels must be 0 or 1, got " + std::to_string(y)};
        }
    }
}

ActivationDataset ActivationDataset::subset(const std::string& topic) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < topics.size(); ++i) {
        if (topics[i] == topic) {
            rows.push_back(i);
        }
    }
    ActivationDataset out;
    out.layer = layer;
    out.site = site;
    out.position_rule = position_rule;
    out.features = MatrixD(rows.size(), width());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(features.row(rows[r]).begin(), width(), out.features.row(r).begin());
        out.labels.push_back(labels[rows[r]]);
        out.topics.push_back(topics[rows[r]]);
    }
    return out;
}

ActivationDataset collect_activations(const ModelBundle& model, const Vocabulary& vocab,
                                      std::span<const PromptCase> cases, std::size_t layer, HookSite site,
                                      unsigned threads) {
    if (cases.empty()) {
        throw InvalidArgument{"no cases to collect activations from"};
    }
    const HookPoint hook = HookPoint::block(layer, site);
    hook.validate(model.config);
    for (std::size_t i = 0; i < cases.size(); ++i) {
        if (!cases[i].label) {
            throw InvalidArgument{"case " + std::to_string(i) + " has no label"};
        }
    }

    ActivationDataset data;
    data.layer = layer;
    data.site = std::string{site_name(site)};
    data.features = MatrixD(cases.size(), model.config.d_model);
    auto collect = [&](std::size_t i) {
        const auto tokens = vocab.encode(cases[i].prompt).ids;
        const auto res = forward(model, tokens, {}, std::span{&hook, 1}, LogitsScope::LastPosition);
        const auto last = res.cache.at(hook).row(tokens.size() - 1);
        std::copy(last.begin(), last.end(), data.features.row(i).begin());
    };

    if (threads == 0) {
        threads = std::max(1u, std::thread::hardware_concurrency());
    }
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, cases.size()));
    if (threads <= 1) {
        for (std::size_t i = 0; i < cases.size(); ++i) {
            collect(i);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::atomic<bool> failed{false};
        std::exception_ptr failure;
        {
            std::vector<std::jthread> pool;
            for (unsigned t = 0; t < threads; ++t) {
                pool.emplace_back([&] {
                    for (std::size_t i = next++; i < cases.size() && !failed; i = next++) {
                        try {
                            collect(i);
                        } catch (...) {
                            if (!failed.exchange(true)) {
                                failure = std::current_exception();
                            }
                        }
                    }
                });
            }
        }
        if (failure) {
            std::rethrow_exception(failure);
        }
    }
    for (const auto& pc : cases) {
        data.labels.push_back(*pc.label);
        data.topics.push_back(pc.topic);
    }
    return data;
}

void inject_label_direction(ActivationDataset& data, double strength, std::uint64_t seed) {
    data.validate();
    Rng rng{seed};
    std::vector<double> u(data.width());
    for (auto& x : u) {
        x = rng.normal();
    }
    normalize(u);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double s = strength * (2.0 * data.labels[i] - 1.0);
        auto row = data.features.row(i);
        for (std::size_t k = 0; k < u.size(); ++k) {
            row[k] += s * u[k];
        }
    }
}

double LossGradient::max_norm() const {
    double m = std::abs(grad_b);
    for (const double g : grad_w) {
        m = std::max(m, std::abs(g));
    }
    return m;
}

LossGradient logistic_loss(const MatrixD& x, std::span<const int> labels, std::span<const double> w, double b,
                           double l2_strength) {
    const std::size_t n = x.rows(), d = x.cols();
    LossGradient out;
    out.grad_w.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = x.row(i);
        const double z = dot(row, w) + b;
        // -log p(y | z) = softplus(z) for y = 0 and softplus(-z) for y = 1
        out.loss += labels[i] == 1 ? softplus(-z) : softplus(z);
        const double r = sigmoid(z) - labels[i];
        for (std::size_t k = 0; k < d; ++k) {
            out.grad_w[k] += r * row[k];
        }
        out.grad_b += r;
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    out.loss = out.loss * inv_n + 0.5 * l2_strength * dot(w, w);
    for (std::size_t k = 0; k < d; ++k) {
        out.grad_w[k] = out.grad_w[k] * inv_n + l2_strength * w[k];
    }
    out.grad_b *= inv_n;
    return out;
}

void feature_stats(const MatrixD& x, std::vector<double>& mean, std::vector<double>& std) {
    const std::size_t n = x.rows(), d = x.cols();
    mean.assign(d, 0.0);
    std.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            mean[k] += x(i, k);
        }
    }
    for (auto& m : mean) {
        m /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            const double c = x(i, k) - mean[k];
            std[k] += c * c;
        }
    }
    for (auto& s : std) {
        s = std::max(std::sqrt(s / static_cast<double>(n)), kMinStd);
    }
}

namespace {

MatrixD standardize(const MatrixD& x, const std::vector<double>& mean, const std::vector<double>& std) {
    MatrixD out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t k = 0; k < x.cols(); ++k) {
            out(i, k) = (x(i, k) - mean[k]) / std[k];
        }
    }
    return out;
}

}  // namespace

ProbeModel train_logistic(const ActivationDataset& data, const ProbeHyperparams& hp,
                          std::vector<double>* loss_history) {
    data.validate();
    if (data.size() < 2) {
        throw InvalidArgument{"need at least two examples to train a probe, got " + std::to_string(data.size())};
    }
    const auto positives = std::count(data.labels.begin(), data.labels.end(), 1);
    if (positives == 0 || static_cast<std::size_t>(positives) == data.size()) {
        throw InvalidArgument{std::string{"training data contains only "} +
                              (positives == 0 ? "truthful (label 0)" : "hallucinated (label 1)") +
                              " examples; a probe needs both classes"};
    }
    if (!(hp.learning_rate > 0.0) || hp.l2_strength < 0.0 || !(hp.tolerance > 0.0)) {
        throw InvalidArgument{"learning rate and tolerance must be positive and l2 strength non-negative"};
    }

    ProbeModel probe;
    probe.hyperparams = hp;
    probe.layer = data.layer;
    probe.site = data.site;
    const std::set<std::string> topics(data.topics.begin(), data.topics.end());
    probe.trained_topics.assign(topics.begin(), topics.end());
    feature_stats(data.features, probe.feature_mean, probe.feature_std);
    const MatrixD x = standardize(data.features, probe.feature_mean, probe.feature_std);

    probe.weights.assign(data.width(), 0.0);
    for (std::size_t it = 0;; ++it) {
        const auto lg = logistic_loss(x, data.labels, probe.weights, probe.bias, hp.l2_strength);
        probe.final_loss = lg.loss;
        probe.gradient_max_norm = lg.max_norm();
        probe.iterations = it;
        if (probe.gradient_max_norm < hp.tolerance) {
            probe.converged = true;
            break;
        }
        if (it == hp.max_iters) {
            break;
        }
        if (loss_history) {
            loss_history->push_back(lg.loss);
        }
        for (std::size_t k = 0; k < probe.weights.size(); ++k) {
            probe.weights[k] -= hp.learning_rate * lg.grad_w[k];
        }
        probe.bias -= hp.learning_rate * lg.grad_b;
    }
    if (loss_history) {
        loss_history->push_back(probe.final_loss);
    }
    return probe;
}

std::vector<double> predict(const ProbeModel& probe, const MatrixD& features) {
    if (features.cols() != probe.weights.size()) {
        throw InvalidArgument{"feature width " + std::to_string(features.cols()) + " does not match the probe's " +
                              std::to_string(probe.weights.size())};
    }
    std::vector<double> out(features.rows());
    for (std::size_t i = 0; i < features.rows(); ++i) {
        double z = probe.bias;
        for (std::size_t k = 0; k < features.cols(); ++k) {
            z += probe.weights[k] * (features(i, k) - probe.feature_mean[k]) / probe.feature_std[k];
        }
        out[i] = sigmoid(z);
    }
    return out;
}

Evaluation evaluate(const ProbeModel& probe, const ActivationDataset& data) {
    data.validate();
    if (data.size() == 0) {
        throw InvalidArgument{"cannot evaluate on an empty dataset"};
    }
    const auto probs = predict(probe, data.features);
    Evaluation ev;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int y = data.labels[i], yhat = decide(probs[i]);
        const bool ok = y == yhat;
        correct += ok;
        auto& g = ev.per_topic[data.topics[i]];
        ++g.count;
        g.correct += ok;
        auto& c = ev.confusion;
        ++(y == 1 ? (ok ? c.true_positive : c.false_negative) : (ok ? c.true_negative : c.false_positive));
    }
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return ev;
}

CrossTopicReport cross_topic_eval(const ActivationDataset& data, const std::string& train_topic,
                                  const std::string& test_topic, const ProbeHyperparams& hp) {
    data.validate();
    const auto train = data.subset(train_topic);
    const auto test = data.subset(test_topic);
    for (const auto* part : {&train, &test}) {
        if (part->size() == 0) {
            throw InvalidArgument{"topic \"" + (part == &train ? train_topic : test_topic) + "\" has no examples"};
        }
    }
    CrossTopicReport r;
    r.train_topic = train_topic;
    r.test_topic = test_topic;
    r.held_out = train_topic != test_topic;
    r.probe = train_logistic(train, hp);
    r.in_topic = evaluate(r.probe, train);
    r.held_out_eval = evaluate(r.probe, test);
    return r;
}

CrossTopicReport cross_topic_eval(const ModelBundle& model, const Vocabulary& vocab,
                                  std::span<const PromptCase> cases, const std::string& train_topic,
                                  const std::string& test_topic, std::size_t layer, HookSite site,
                                  const ProbeHyperparams& hp) {
    for (const auto& topic : {train_topic, test_topic}) {
        if (std::none_of(cases.begin(), cases.end(), [&](const PromptCase& pc) { return pc.topic == topic; })) {
            throw InvalidArgument{"topic \"" + topic + "\" has no examples"};
        }
    }
    return cross_topic_eval(collect_activations(model, vocab, cases, layer, site), train_topic, test_topic, hp);
}

PCAProjection pca_fit(const MatrixD& features, std::uint64_t seed) {
    const std::size_t n = features.rows(), d = features.cols();
    if (n < 3) {
        throw InvalidArgument{"PCA needs at least 3 rows, got " + std::to_string(n)};
    }
    if (d < 2) {
        throw InvalidArgument{"PCA needs at least 2 feature dimensions"};
    }
    PCAProjection proj;
    proj.mean.assign(d, 0.0);
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            proj.mean[k] += features(i, k);
            scale = std::max(scale, std::abs(features(i, k)));
        }
    }
    for (auto& m : proj.mean) {
        m /= static_cast<double>(n);
    }
    MatrixD xc(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            xc(i, k) = features(i, k) - proj.mean[k];
        }
    }

    // Iterate on the smaller of the covariance (d x d) and Gram (n x n)
    // matrices; both share their nonzero eigenvalues.
    const bool gram = n < d;
    const std::size_t m = gram ? n : d;
    MatrixD s(m, m);
    const double inv = 1.0 / static_cast<double>(n - 1);
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a; b < m; ++b) {
            double acc = 0.0;
            if (gram) {
                for (std::size_t k = 0; k < d; ++k) {
                    acc += xc(a, k) * xc(b, k);
                }
            } else {
                for (std::size_t i = 0; i < n; ++i) {
                    acc += xc(i, a) * xc(i, b);
                }
            }
            s(a, b) = s(b, a) = acc * inv;
        }
    }
    double trace = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
        trace += s(a, a);
    }
    if (!(trace > 1e-24 * scale * scale * static_cast<double>(d))) {
        throw InvalidArgument{"features have no variance; principal components are undefined"};
    }

    Rng rng{seed};
    auto random_unit = [&](std::size_t len, const std::vector<std::vector<double>>& against) {
        std::vector<double> v(len);
        for (auto& x : v) {
            x = rng.normal();
        }
        orthogonalize(v, against);
        normalize(v);
        return v;
    };

    std::vector<std::vector<double>> vecs;
    std::array<double, 2> lambda{};
    for (std::size_t c = 0; c < 2; ++c) {
        std::vector<double> v = random_unit(m, vecs);
        std::vector<double> w(m);
        lambda[c] = 0.0;
        for (std::size_t it = 0; it < kPcaMaxIters; ++it) {
            for (std::size_t a = 0; a < m; ++a) {
                w[a] = dot(s.row(a), v);
            }
            orthogonalize(w, vecs);
            lambda[c] = dot(v, w);
            const double norm = std::sqrt(dot(w, w));
            // Nothing left beyond the earlier components: keep v as is.
            if (c > 0 && norm <= 1e-12 * lambda[0]) {
                break;
            }
            double diff = 0.0;
            for (std::size_t a = 0; a < m; ++a) {
                w[a] /= norm;
                diff = std::max(diff, std::abs(w[a] - v[a]));
            }
            std::swap(v, w);
            if (diff < kPcaTolerance) {
                break;
            }
        }
        vecs.push_back(std::move(v));
    }

    proj.components = MatrixD(2, d);
    std::vector<std::vector<double>> comps;
    for (std::size_t c = 0; c < 2; ++c) {
        std::vector<double> comp(d);
        if (gram) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < d; ++k) {
                    comp[k] += vecs[c][i] * xc(i, k);
                }
            }
        } else {
            comp = vecs[c];
        }
        orthogonalize(comp, comps);
        if (std::sqrt(dot(comp, comp)) <= 1e-12 * std::sqrt(std::abs(trace))) {
            comp = random_unit(d, comps);
        } else {
            normalize(comp);
        }
        const auto big = std::max_element(comp.begin(), comp.end(),
                                          [](double a, double b) { return std::abs(a) < std::abs(b); });
        if (*big < 0) {
            for (auto& x : comp) {
                x = -x;
            }
        }
        std::copy(comp.begin(), comp.end(), proj.components.row(c).begin());
        comps.push_back(std::move(comp));
    }
    proj.explained_variance = {std::max(lambda[0], 0.0), std::clamp(lambda[1], 0.0, std::max(lambda[0], 0.0))};
    return proj;
}

MatrixD pca_transform(const PCAProjection& projection, const MatrixD& features) {
    const std::size_t d = projection.mean.size();
    if (features.cols() != d) {
        throw InvalidArgument{"feature width " + std::to_string(features.cols()) + " does not match the projection's " +
                              std::to_string(d)};
    }
    MatrixD out(features.rows(), 2);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        for (std::size_t c = 0; c < 2; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                acc += (features(i, k) - projection.mean[k]) * projection.components(c, k);
            }
            out(i, c) = acc;
        }
    }
    return out;
}

std::string scatter_csv(const MatrixD& coords, const ActivationDataset& data) {
    if (coords.rows() != data.size() || coords.cols() != 2) {
        throw InvalidArgument{"scatter coordinates do not match the dataset"};
    }
    std::string out = "pc1,pc2,label,topic\n";
    for (std::size_t i = 0; i < coords.rows(); ++i) {
        out += fmt9(coords(i, 0)) + ',' + fmt9(coords(i, 1)) + ',' + std::to_string(data.labels[i]) + ',' +
               data.topics[i] + '\n';
    }
    return out;
}

nlohmann::ordered_json ProbeModel::to_json() const {
    nlohmann::ordered_json doc;
    doc["layer"] = layer;
    doc["site"] = site;
    doc["trained_topics"] = trained_topics;
    doc["hyperparams"] = {{"learning_rate", hyperparams.learning_rate},
                          {"l2_strength", hyperparams.l2_strength},
                          {"max_iters", hyperparams.max_iters},
                          {"tolerance", hyperparams.tolerance}};
    doc["training"] = {{"iterations", iterations},
                       {"converged", converged},
                       {"gradient_max_norm", gradient_max_norm},
                       {"final_loss", final_loss}};
    doc["bias"] = bias;
    doc["weights"] = weights;
    doc["feature_mean"] = feature_mean;
    doc["feature_std"] = feature_std;
    return doc;
}

ProbeModel ProbeModel::from_json(const nlohmann::json& doc) {
    try {
        ProbeModel p;
        p.layer = doc.at("layer").get<std::size_t>();
        p.site = doc.at("site").get<std::string>();
        p.trained_topics = doc.at("trained_topics").get<std::vector<std::string>>();
        const auto& hp = doc.at("hyperparams");
        p.hyperparams = {hp.at("learning_rate").get<double>(), hp.at("l2_strength").get<double>(),
                         hp.at("max_iters").get<std::size_t>(), hp.at("tolerance").get<double>()};
        const auto& tr = doc.at("training");
        p.iterations = tr.at("iterations").get<std::size_t>();
        p.converged = tr.at("converged").get<bool>();
        p.gradient_max_norm = tr.at("gradient_max_norm").get<double>();
        p.final_loss = tr.at("final_loss").get<double>();
        p.bias = doc.at("bias").get<double>();
        p.weights = doc.at("weights").get<std::vector<double>>();
        p.feature_mean = doc.at("feature_mean").get<std::vector<double>>();
        p.feature_std = doc.at("feature_std").get<std::vector<double>>();
        if (p.feature_mean.size() != p.weights.size() || p.feature_std.size() != p.weights.size()) {
            throw FormatError{"probe: weights, feature_mean and feature_std differ in length"};
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError{std::string{"probe: "} + e.what()};
    }
}

nlohmann::ordered_json Evaluation::to_json() const {
    nlohmann::ordered_json doc;
    doc["accuracy"] = accuracy;
    doc["confusion"] = {{"true_positive", confusion.true_positive},
                        {"false_positive", confusion.false_positive},
                        {"true_negative", confusion.true_negative},
                        {"false_negative", confusion.false_negative}};
    auto topics = nlohmann::ordered_json::object();
    for (const auto& [topic, g] : per_topic) {
        topics[topic] = {{"count", g.count}, {"correct", g.correct}, {"accuracy", g.accuracy()}};
    }
    doc["per_topic"] = std::move(topics);
    return doc;
}

nlohmann::ordered_json CrossTopicReport::to_json() const {
    nlohmann::ordered_json doc;
    doc["train_topic"] = train_topic;
    doc["test_topic"] = test_topic;
    doc["held_out"] = held_out;
    if (!held_out) {
        doc["note"] = "train and test topics are the same; this is not a held-out evaluation";
    }
    doc["in_topic"] = in_topic.to_json();
    doc["held_out_eval"] = held_out_eval.to_json();
    doc["probe_training"] = {{"iterations", probe.iterations},
                             {"converged", probe.converged},
                             {"gradient_max_norm", probe.gradient_max_norm}};
    return doc;
}

}  // namespace finterp
