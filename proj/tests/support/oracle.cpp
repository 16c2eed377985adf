// SPDX-License-Identifier: Apache-2.0

#include "oracle.hpp"

#include <cmath>
#include <limits>

#include "finterp/random.hpp"

namespace oracle {

namespace {

Vec layer_norm(const Vec& x, const std::vector<float>& scale, const std::vector<float>& shift, double eps) {
    const double n = static_cast<double>(x.size());
    double sum = 0.0, sum_sq = 0.0;
    for (const double v : x) {
        sum += v;
    }
    const double mean = sum / n;
    for (const double v : x) {
        sum_sq += (v - mean) * (v - mean);
    }
    const double denom = std::sqrt(sum_sq / n + eps);
    Vec out(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        out[k] = (x[k] - mean) / denom * scale[k] + shift[k];
    }
    return out;
}

// Column-wise: out[j] = b[j] + sum_k x[k] W[k][j].
Vec affine(const Vec& x, const finterp::Linear& lin) {
    const std::size_t out_dim = lin.weight.cols();
    Vec out(out_dim);
    for (std::size_t j = 0; j < out_dim; ++j) {
        double acc = lin.bias[j];
        for (std::size_t k = 0; k < x.size(); ++k) {
            acc += x[k] * static_cast<double>(lin.weight(k, j));
        }
        out[j] = acc;
    }
    return out;
}

double gelu(double x, finterp::Activation a) {
    if (a == finterp::Activation::GeluErf) {
        return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    }
    const double k = std::sqrt(2.0 / 3.141592653589793238462643);
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

States attention(const finterp::ModelBundle& m, const finterp::BlockWeights& b, const States& x) {
    const auto& c = m.config;
    const std::size_t n = x.size(), d = c.d_model, dh = c.d_head();
    std::vector<Vec> qkv(n);
    for (std::size_t i = 0; i < n; ++i) {
        qkv[i] = affine(layer_norm(x[i], b.ln1.scale, b.ln1.shift, c.layernorm_epsilon), b.qkv);
    }
    States concat(n, Vec(d, 0.0));
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        // full score matrix with a causal mask
        std::vector<Vec> scores(n, Vec(n, -std::numeric_limits<double>::infinity()));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) {
                    s += qkv[i][h * dh + t] * qkv[j][d + h * dh + t];
                }
                scores[i][j] = s / std::sqrt(static_cast<double>(dh));
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (const double s : scores[i]) {
                mx = std::max(mx, s);
            }
            double z = 0.0;
            Vec w(n);
            for (std::size_t j = 0; j < n; ++j) {
                w[j] = std::exp(scores[i][j] - mx);
                z += w[j];
            }
            for (std::size_t t = 0; t < dh; ++t) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    acc += w[j] / z * qkv[j][2 * d + h * dh + t];
                }
                concat[i][h * dh + t] = acc;
            }
        }
    }
    States out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = affine(concat[i], b.attn_out);
    }
    return out;
}

}  // namespace

States embeddings(const finterp::ModelBundle& m, const std::vector<finterp::TokenId>& tokens) {
    States x(tokens.size(), Vec(m.config.d_model));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        for (std::size_t k = 0; k < m.config.d_model; ++k) {
            x[i][k] = static_cast<double>(m.token_embedding(tokens[i], k)) + m.position_embedding(i, k);
        }
    }
    return x;
}

double embedding_std(const finterp::ModelBundle& m) {
    const auto v = m.token_embedding.flat();
    double mean = 0.0;
    for (const float x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (const float x : v) {
        var += (x - mean) * (x - mean);
    }
    return std::sqrt(var / static_cast<double>(v.size()));
}

std::map<std::size_t, Vec> corrupted_embeddings(const finterp::ModelBundle& m,
                                                const std::vector<finterp::TokenId>& tokens, std::size_t begin,
                                                std::size_t end, double multiplier, std::uint64_t seed) {
    const States clean = embeddings(m, tokens);
    const double sigma = multiplier * embedding_std(m);
    finterp::Rng rng{seed};
    std::map<std::size_t, Vec> out;
    for (std::size_t p = begin; p < end; ++p) {
        Vec row = clean[p];
        for (auto& v : row) {
            v += sigma * rng.normal();
        }
        out.emplace(p, std::move(row));
    }
    return out;
}

Run run(const finterp::ModelBundle& m, const std::vector<finterp::TokenId>& tokens, const Edits& edits) {
    const auto& c = m.config;
    const std::size_t n = tokens.size();
    States x = embeddings(m, tokens);
    for (const auto& [pos, row] : edits.embed) {
        x[pos] = row;
    }

    Run r;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (const auto& [key, row] : edits.resid_pre) {
            if (key.first == l) {
                x[key.second] = row;
            }
        }
        r.resid_pre.push_back(x);
        const auto& b = m.blocks[l];
        const bool skip = edits.skip_layers.contains(l);
        auto keep = [&](std::size_t i) { return !skip || (edits.skip_final_only && i + 1 != n); };

        const States a = attention(m, b, x);
        for (std::size_t i = 0; i < n; ++i) {
            if (keep(i)) {
                for (std::size_t k = 0; k < c.d_model; ++k) {
                    x[i][k] += a[i][k];
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            Vec h = affine(layer_norm(x[i], b.ln2.scale, b.ln2.shift, c.layernorm_epsilon), b.mlp_in);
            for (auto& v : h) {
                v = gelu(v, c.activation);
            }
            const Vec mo = affine(h, b.mlp_out);
            if (keep(i)) {
                for (std::size_t k = 0; k < c.d_model; ++k) {
                    x[i][k] += mo[k];
                }
            }
        }
    }
    r.final_resid = x;

    r.logits.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec h = layer_norm(x[i], m.final_norm.scale, m.final_norm.shift, c.layernorm_epsilon);
        r.logits[i].resize(c.vocab_size);
        for (std::size_t v = 0; v < c.vocab_size; ++v) {
            double s = 0.0;
            for (std::size_t k = 0; k < c.d_model; ++k) {
                s += h[k] * m.token_embedding(v, k);
            }
            r.logits[i][v] = s;
        }
    }
    const Vec& last = r.logits.back();
    double mx = last[0];
    for (const double v : last) {
        mx = std::max(mx, v);
    }
    double z = 0.0;
    r.last_probs.resize(last.size());
    for (std::size_t v = 0; v < last.size(); ++v) {
        r.last_probs[v] = std::exp(last[v] - mx);
        z += r.last_probs[v];
    }
    for (auto& p : r.last_probs) {
        p /= z;
    }
    return r;
}

}  // namespace oracle
