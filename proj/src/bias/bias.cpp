#include "kt/bias.hpp"

#include <algorithm>
#include <cmath>

#include "kt/error.hpp"
#include "kt/tape.hpp"

namespace kt {

std::string to_string(BiasKind kind) {
    switch (kind) {
        case BiasKind::None: return "none";
        case BiasKind::PE: return "pe";
        case BiasKind::Mono: return "mono";
        case BiasKind::RC: return "rc";
        case BiasKind::FoLiBi: return "folibi";
    }
    return "none";
}

BiasKind parse_bias_kind(std::string_view name) {
    if (name == "none") return BiasKind::None;
    if (name == "pe") return BiasKind::PE;
    if (name == "mono") return BiasKind::Mono;
    if (name == "rc") return BiasKind::RC;
    if (name == "folibi") return BiasKind::FoLiBi;
    throw ConfigError("unknown bias kind '" + std::string(name) + "' (none|pe|mono|rc|folibi)");
}

std::string to_string(BiasScope scope) {
    return scope == BiasScope::AllBlocks ? "all_blocks" : "retriever_only";
}

BiasScope parse_bias_scope(std::string_view name) {
    if (name == "all_blocks") return BiasScope::AllBlocks;
    if (name == "retriever_only") return BiasScope::RetrieverOnly;
    throw ConfigError("unknown bias scope '" + std::string(name) + "' (all_blocks|retriever_only)");
}

std::vector<double> folibi_slopes(std::size_t heads) {
    std::vector<double> m(heads);
    for (std::size_t h = 1; h <= heads; ++h)
        m[h - 1] = std::exp2(-8.0 * static_cast<double>(h) / static_cast<double>(heads));
    return m;
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
    if (!(y > 0.0)) throw RangeError("softplus_inverse needs a positive argument");
    // log(exp(y) - 1) = y + log(1 - exp(-y))
    return y + std::log(-std::expm1(-y));
}

Tensor folibi_beta(std::size_t t, std::span<const double> slopes) {
    const std::size_t heads = slopes.size();
    std::vector<double> beta(heads * t * t, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j <= i; ++j)
                beta[(h * t + i) * t + j] = slopes[h] * static_cast<double>(j + 1);
    return Tensor::from({heads, t, t}, std::move(beta));
}

Tensor add_head_bias(const Tensor& scores, const Tensor& beta) {
    if (scores.rank() != 3 || beta.rank() != 3 || scores.dim(1) != beta.dim(1) ||
        scores.dim(2) != beta.dim(2) || scores.dim(0) % beta.dim(0) != 0) {
        throw DimensionError("add_head_bias: scores " + shape_str(scores.shape()) + " vs bias " +
                             shape_str(beta.shape()));
    }
    const std::size_t heads = beta.dim(0);
    const std::size_t block = scores.dim(1) * scores.dim(2);
    OpRecorder rec("add_head_bias", {&scores, &beta});
    const auto x = scores.data();
    const auto b = beta.data();
    std::vector<double> out(x.size());
    for (std::size_t g = 0; g < scores.dim(0); ++g) {
        const double* bh = b.data() + (g % heads) * block;
        for (std::size_t e = 0; e < block; ++e) out[g * block + e] = x[g * block + e] + bh[e];
    }
    Tensor c = rec.output(scores.shape(), std::move(out));
    rec.on_backward(c, [scores, beta, heads, block](const double* g) {
        if (double* gs = grad_target(scores))
            for (std::size_t i = 0; i < scores.size(); ++i) gs[i] += g[i];
        if (double* gb = grad_target(beta))
            for (std::size_t grp = 0; grp < scores.dim(0); ++grp)
                for (std::size_t e = 0; e < block; ++e) gb[(grp % heads) * block + e] += g[grp * block + e];
    });
    return c;
}

double mono_beta_value(double theta, double distance, double qk) {
    if (distance < 0.0) throw RangeError("mono_beta: negative distance");
    return std::expm1(-theta * distance) * qk;
}

double effective_distance(std::span<const double> sim_row, std::size_t query, std::size_t key) {
    if (key >= query) {
        throw RangeError("effective_distance: key position " + std::to_string(key) +
                         " is not strictly before query position " + std::to_string(query));
    }
    if (key >= sim_row.size()) throw RangeError("effective_distance: key outside similarity row");
    const std::size_t last = std::min(query, sim_row.size() - 1);
    double mass = 0.0;
    for (std::size_t j = key; j <= last; ++j) mass += sim_row[j];
    return static_cast<double>(query - key) * mass;
}

std::vector<double> effective_distances(const Tensor& sim_weights) {
    if (sim_weights.rank() != 3 || sim_weights.dim(1) != sim_weights.dim(2)) {
        throw DimensionError("effective_distances: expected [G, L, L], got " +
                             shape_str(sim_weights.shape()));
    }
    const std::size_t groups = sim_weights.dim(0), len = sim_weights.dim(1);
    const auto s = sim_weights.data();
    std::vector<double> dist(s.size(), 0.0);
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t i = 0; i < len; ++i) {
            const double* row = s.data() + (g * len + i) * len;
            double* out = dist.data() + (g * len + i) * len;
            double suffix = 0.0;
            for (std::size_t jj = len; jj-- > 0;) {
                suffix += row[jj];
                if (jj <= i && row[jj] != 0.0) out[jj] = static_cast<double>(i - jj) * suffix;
            }
        }
    }
    return dist;
}

Tensor mono_beta(const Tensor& raw_scores, std::span<const double> distances, const Tensor& theta,
                 std::size_t heads) {
    if (raw_scores.rank() != 3 || distances.size() != raw_scores.size() || theta.size() != heads ||
        heads == 0 || raw_scores.dim(0) % heads != 0) {
        throw DimensionError("mono_beta: scores " + shape_str(raw_scores.shape()) + ", " +
                             std::to_string(distances.size()) + " distances, theta " +
                             shape_str(theta.shape()));
    }
    for (double d : distances)
        if (d < 0.0) throw RangeError("mono_beta: negative distance");
    const std::size_t block = raw_scores.dim(1) * raw_scores.dim(2);
    OpRecorder rec("mono_beta", {&raw_scores, &theta});
    const auto x = raw_scores.data();
    const auto th = theta.data();
    std::vector<double> decay_minus_one(x.size());
    std::vector<double> out(x.size());
    for (std::size_t g = 0; g < raw_scores.dim(0); ++g) {
        const double t = th[g % heads];
        for (std::size_t e = 0; e < block; ++e) {
            const std::size_t i = g * block + e;
            decay_minus_one[i] = std::expm1(-t * distances[i]);
            out[i] = decay_minus_one[i] * x[i];
        }
    }
    Tensor c = rec.output(raw_scores.shape(), std::move(out));
    rec.on_backward(c, [raw_scores, theta, heads, block, decay_minus_one = std::move(decay_minus_one),
                        dist = std::vector<double>(distances.begin(), distances.end())](
                           const double* g) {
        double* gx = grad_target(raw_scores);
        double* gt = grad_target(theta);
        const auto x = raw_scores.data();
        for (std::size_t grp = 0; grp < raw_scores.dim(0); ++grp) {
            double acc = 0.0;
            for (std::size_t e = 0; e < block; ++e) {
                const std::size_t i = grp * block + e;
                if (gx) gx[i] += g[i] * decay_minus_one[i];
                // d/dtheta of (exp(-theta d) - 1) x = -d exp(-theta d) x
                acc -= g[i] * dist[i] * (decay_minus_one[i] + 1.0) * x[i];
            }
            if (gt) gt[grp % heads] += acc;
        }
    });
    return c;
}

std::vector<double> rc_gamma_row(std::span<const double> emb_sim, std::size_t t, double decay) {
    if (!(decay > 0.0)) throw RangeError("rc_gamma: decay rate must be positive");
    if (t < 2 || emb_sim.size() != t - 1) {
        throw DimensionError("rc_gamma: query position " + std::to_string(t) + " needs " +
                             std::to_string(t > 0 ? t - 1 : 0) + " key similarities, got " +
                             std::to_string(emb_sim.size()));
    }
    std::vector<double> z(t - 1);
    for (std::size_t tau = 1; tau < t; ++tau)
        z[tau - 1] = emb_sim[tau - 1] + std::exp(-static_cast<double>(t - tau) / decay);
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double& v : z) total += (v = std::exp(v - mx));
    for (double& v : z) v /= total;
    return z;
}

Tensor recency_matrix(const Tensor& decay, std::size_t len) {
    if (decay.size() != 1) throw DimensionError("recency_matrix: decay must be a scalar");
    const double s = decay.data()[0];
    if (!(s > 0.0)) throw RangeError("recency_matrix: decay rate must be positive");
    OpRecorder rec("recency_matrix", {&decay});
    std::vector<double> out(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            out[i * len + j] = std::exp(-static_cast<double>(i - j) / s);
    Tensor c = rec.output({len, len}, std::move(out));
    rec.on_backward(c, [decay, c, len, s](const double* g) {
        double* gd = grad_target(decay);
        const auto r = c.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j <= i; ++j)
                acc += g[i * len + j] * r[i * len + j] * static_cast<double>(i - j) / (s * s);
        gd[0] += acc;
    });
    return c;
}

Tensor cosine_similarity(const Tensor& embeddings, std::size_t batch, std::size_t len) {
    if (embeddings.rank() != 2 || embeddings.dim(0) != batch * len) {
        throw DimensionError("cosine_similarity: embeddings " + shape_str(embeddings.shape()) +
                             " do not hold " + std::to_string(batch) + " x " + std::to_string(len) +
                             " rows");
    }
    const auto unit = ops::l2_normalize_rows(embeddings);
    const auto seq = ops::reshape(unit, {batch, len, embeddings.dim(1)});
    return ops::batched_matmul(seq, seq, /*transpose_b=*/true);
}

Tensor rc_gamma(const Tensor& emb_sim, const Tensor& recency, const ops::Mask& mask) {
    if (emb_sim.rank() != 3 || recency.rank() != 2 || emb_sim.dim(1) != recency.dim(0) ||
        emb_sim.dim(2) != recency.dim(1)) {
        throw DimensionError("rc_gamma: similarity " + shape_str(emb_sim.shape()) + " vs recency " +
                             shape_str(recency.shape()));
    }
    const std::size_t block = recency.size();
    OpRecorder rec("rc_logits", {&emb_sim, &recency});
    const auto x = emb_sim.data();
    const auto r = recency.data();
    std::vector<double> out(x.size());
    for (std::size_t b = 0; b < emb_sim.dim(0); ++b)
        for (std::size_t e = 0; e < block; ++e) out[b * block + e] = x[b * block + e] + r[e];
    Tensor logits = rec.output(emb_sim.shape(), std::move(out));
    rec.on_backward(logits, [emb_sim, recency, block](const double* g) {
        if (double* gx = grad_target(emb_sim))
            for (std::size_t i = 0; i < emb_sim.size(); ++i) gx[i] += g[i];
        if (double* gr = grad_target(recency))
            for (std::size_t b = 0; b < emb_sim.dim(0); ++b)
                for (std::size_t e = 0; e < block; ++e) gr[e] += g[b * block + e];
    });
    return ops::masked_softmax(logits, mask, 1.0, ops::EmptyRows::Zero);
}

Tensor mix_gamma(const Tensor& alpha, const Tensor& gamma, std::size_t heads) {
    if (alpha.rank() != 3 || gamma.rank() != 3 || heads == 0 ||
        alpha.dim(0) != gamma.dim(0) * heads || alpha.dim(1) != gamma.dim(1) ||
        alpha.dim(2) != gamma.dim(2)) {
        throw DimensionError("mix_gamma: weights " + shape_str(alpha.shape()) + " vs gamma " +
                             shape_str(gamma.shape()));
    }
    const std::size_t block = alpha.dim(1) * alpha.dim(2);
    OpRecorder rec("mix_gamma", {&alpha, &gamma});
    const auto a = alpha.data();
    const auto y = gamma.data();
    std::vector<double> out(a.size());
    for (std::size_t g = 0; g < alpha.dim(0); ++g) {
        const double* yr = y.data() + (g / heads) * block;
        for (std::size_t e = 0; e < block; ++e) out[g * block + e] = 0.5 * (a[g * block + e] + yr[e]);
    }
    Tensor c = rec.output(alpha.shape(), std::move(out));
    rec.on_backward(c, [alpha, gamma, heads, block](const double* g) {
        double* ga = grad_target(alpha);
        double* gy = grad_target(gamma);
        for (std::size_t grp = 0; grp < alpha.dim(0); ++grp)
            for (std::size_t e = 0; e < block; ++e) {
                const double v = 0.5 * g[grp * block + e];
                if (ga) ga[grp * block + e] += v;
                if (gy) gy[(grp / heads) * block + e] += v;
            }
    });
    return c;
}

Tensor positional_embedding(const Tensor& table, std::span<const int> positions) {
    for (int p : positions) {
        if (p < 0 || static_cast<std::size_t>(p) >= table.dim(0)) {
            throw RangeError("positional embedding: position " + std::to_string(p) +
                             " outside table of " + std::to_string(table.dim(0)) + " positions");
        }
    }
    return ops::embedding(table, positions);
}

}  // namespace kt
