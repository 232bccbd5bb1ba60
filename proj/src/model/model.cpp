#include "kt/model.hpp"

#include <algorithm>
#include <cmath>

#include "kt/error.hpp"
#include "kt/ops.hpp"
#include "kt/tape.hpp"

namespace kt {
namespace {

constexpr double kInitStd = 0.02;

std::vector<double> truncated_normal(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, kInitStd);
    std::vector<double> out(n);
    for (double& v : out) {
        do {
            v = dist(rng);
        } while (std::abs(v) > 2.0 * kInitStd);
    }
    return out;
}

// [B, L, L] validity: key j is a real interaction and lies before query i
// (or at i when inclusive).
ops::Mask causal_mask(const Batch& batch, bool inclusive) {
    const std::size_t B = batch.batch, L = batch.len;
    ops::Mask m{{B, L, L}, std::vector<std::uint8_t>(B * L * L, 0)};
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = 0; j < L && (inclusive ? j <= i : j < i); ++j)
                m.valid[(b * L + i) * L + j] = batch.valid[batch.index(b, j)];
    return m;
}

const char* component_prefix(Component c) {
    switch (c) {
        case Component::QuestionEncoder: return "question_encoder";
        case Component::InteractionEncoder: return "interaction_encoder";
        case Component::Retriever: return "retriever";
    }
    return "";
}

}  // namespace

std::string to_string(Component c) { return component_prefix(c); }

void ModelConfig::validate() const {
    if (d_model == 0 || num_heads == 0) throw ConfigError("model: d_model and num_heads must be positive");
    if (d_model % num_heads != 0) {
        throw ConfigError("model: d_model " + std::to_string(d_model) + " is not divisible by " +
                          std::to_string(num_heads) + " heads");
    }
    if (num_blocks == 0) throw ConfigError("model: num_blocks must be positive");
    if (max_len < 2) throw ConfigError("model: max_len must be at least 2");
    if (vocab_size == 0) throw ConfigError("model: vocab_size must be positive");
    if (ffn_multiplier == 0) throw ConfigError("model: ffn_multiplier must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0, 1)");
    if (!bias.slopes.empty() && bias.slopes.size() != num_heads) {
        throw ConfigError("model: " + std::to_string(bias.slopes.size()) + " slopes given for " +
                          std::to_string(num_heads) + " heads");
    }
    if (!(bias.initial_decay > 0.0)) throw ConfigError("model: initial decay must be positive");
}

Tensor KtModel::add_param(const std::string& name, Shape shape, std::vector<double> values) {
    auto t = Tensor::parameter(std::move(shape), std::move(values), name);
    params_.push_back(t);
    return t;
}

KtModel::KtModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.d_model, H = config_.num_heads;
    const std::size_t ff = d * config_.ffn_multiplier;
    const auto& bias = config_.bias;

    auto weight = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        return add_param(name, {rows, cols}, truncated_normal(rows * cols, rng));
    };
    auto zeros = [&](const std::string& name, std::size_t n) {
        return add_param(name, {n}, std::vector<double>(n, 0.0));
    };
    auto ones = [&](const std::string& name, std::size_t n) {
        return add_param(name, {n}, std::vector<double>(n, 1.0));
    };

    question_emb_ = weight("question_emb", config_.vocab_size, d);
    response_emb_ = weight("response_emb", 2, d);
    if (bias.kind == BiasKind::PE) position_emb_ = weight("position_emb", config_.max_len, d);

    const bool bias_blocks =
        bias.kind == BiasKind::Mono || bias.kind == BiasKind::RC || bias.kind == BiasKind::FoLiBi;
    for (Component c : {Component::QuestionEncoder, Component::InteractionEncoder, Component::Retriever}) {
        for (std::size_t i = 0; i < config_.num_blocks; ++i) {
            const std::string p = std::string(component_prefix(c)) + "." + std::to_string(i) + ".";
            Block blk{c, i,
                      bias_blocks && (bias.scope == BiasScope::AllBlocks || c == Component::Retriever),
                      {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}};
            blk.ln1_scale = ones(p + "ln1.scale", d);
            blk.ln1_offset = zeros(p + "ln1.offset", d);
            blk.wq = weight(p + "attn.wq", d, d);
            blk.bq = zeros(p + "attn.bq", d);
            blk.wk = weight(p + "attn.wk", d, d);
            blk.bk = zeros(p + "attn.bk", d);
            blk.wv = weight(p + "attn.wv", d, d);
            blk.bv = zeros(p + "attn.bv", d);
            blk.wo = weight(p + "attn.wo", d, d);
            blk.bo = zeros(p + "attn.bo", d);
            blk.ln2_scale = ones(p + "ln2.scale", d);
            blk.ln2_offset = zeros(p + "ln2.offset", d);
            blk.ff1_w = weight(p + "ffn.w1", d, ff);
            blk.ff1_b = zeros(p + "ffn.b1", ff);
            blk.ff2_w = weight(p + "ffn.w2", ff, d);
            blk.ff2_b = zeros(p + "ffn.b2", d);
            if (blk.biased && bias.kind == BiasKind::Mono) {
                blk.decay_raw = add_param(p + "mono.decay_raw", {H},
                                          std::vector<double>(H, softplus_inverse(bias.initial_decay)));
            } else if (blk.biased && bias.kind == BiasKind::RC) {
                blk.decay_raw = add_param(p + "rc.decay_raw", {1}, {softplus_inverse(bias.initial_decay)});
            }
            blocks_.push_back(std::move(blk));
        }
        const auto k = static_cast<std::size_t>(c);
        const std::string p = std::string(component_prefix(c)) + ".final_ln.";
        final_ln_scale_[k] = ones(p + "scale", d);
        final_ln_offset_[k] = zeros(p + "offset", d);
    }
    head1_w_ = weight("head.w1", 2 * d, d);
    head1_b_ = zeros("head.b1", d);
    head2_w_ = weight("head.w2", d, 1);
    head2_b_ = zeros("head.b2", 1);
    recorded_distances_.resize(blocks_.size());
}

std::size_t KtModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

Tensor KtModel::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name() == name) return p;
    throw RangeError("model has no parameter named '" + name + "'");
}

std::size_t KtModel::copy_shared_parameters_from(const KtModel& other) {
    std::size_t copied = 0;
    for (auto& p : params_) {
        for (const auto& q : other.params_) {
            if (q.name() == p.name() && q.shape() == p.shape()) {
                std::copy(q.data().begin(), q.data().end(), p.data().begin());
                ++copied;
                break;
            }
        }
    }
    return copied;
}

void KtModel::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

std::string KtModel::block_name(std::size_t index) const {
    if (index >= blocks_.size()) {
        throw RangeError("block index " + std::to_string(index) + " out of range (" +
                         std::to_string(blocks_.size()) + " blocks)");
    }
    return std::string(component_prefix(blocks_[index].component)) + "." +
           std::to_string(blocks_[index].index);
}

std::size_t KtModel::resolve_block(const std::string& ref) const {
    const std::size_t per = config_.num_blocks;
    if (ref == "retriever") return 3 * per - 1;
    if (ref == "question") return per - 1;
    if (ref == "interaction") return 2 * per - 1;
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        if (block_name(i) == ref) return i;
    if (!ref.empty() && std::all_of(ref.begin(), ref.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
        const auto i = static_cast<std::size_t>(std::stoull(ref));
        block_name(i);
        return i;
    }
    throw RangeError("unknown attention block '" + ref + "'");
}

bool KtModel::block_is_biased(std::size_t index) const {
    block_name(index);
    return blocks_[index].biased;
}

Tensor KtModel::run_block(std::size_t bi, const Tensor& stream, const Tensor* values,
                          const Batch& batch, const Tensor& question_similarity,
                          const ForwardOptions& options) {
    const Block& blk = blocks_[bi];
    const std::size_t B = batch.batch, L = batch.len, H = config_.num_heads;
    const bool retriever = blk.component == Component::Retriever;
    const auto mask = causal_mask(batch, !retriever);
    const auto empty = retriever ? ops::EmptyRows::Zero : ops::EmptyRows::Error;
    const double scale = 1.0 / std::sqrt(static_cast<double>(config_.head_dim()));

    const auto a = ops::layer_norm(stream, blk.ln1_scale, blk.ln1_offset);
    const auto q = ops::add_row_bias(ops::matmul(a, blk.wq), blk.bq);
    const auto k = ops::add_row_bias(ops::matmul(a, blk.wk), blk.bk);
    const auto v = ops::add_row_bias(ops::matmul(values ? *values : a, blk.wv), blk.bv);
    const auto qh = ops::split_heads(q, B, L, H);
    const auto kh = ops::split_heads(k, B, L, H);
    const auto vh = ops::split_heads(v, B, L, H);

    auto scores = ops::batched_matmul(qh, kh, /*transpose_b=*/true);
    const BiasKind kind = blk.biased ? config_.bias.kind : BiasKind::None;
    if (kind == BiasKind::Mono) {
        std::vector<double> dist;
        if (distance_mode_ == DistanceMode::Replay) {
            dist = recorded_distances_[bi];
            if (dist.size() != scores.size()) throw Error("no recorded distances for " + block_name(bi));
        } else {
            NoGradScope frozen;
            dist = effective_distances(ops::masked_softmax(scores, mask, scale, ops::EmptyRows::Zero));
            if (distance_mode_ == DistanceMode::Record) recorded_distances_[bi] = dist;
        }
        const auto theta = ops::softplus(blk.decay_raw);
        scores = ops::add(scores, mono_beta(scores, dist, theta, H));
    } else if (kind == BiasKind::FoLiBi) {
        const auto slopes = config_.bias.slopes.empty() ? folibi_slopes(H) : config_.bias.slopes;
        scores = add_head_bias(scores, folibi_beta(L, slopes));
    }
    auto weights = ops::masked_softmax(scores, mask, scale, empty);
    if (kind == BiasKind::RC) {
        const auto recency = recency_matrix(ops::softplus(blk.decay_raw), L);
        weights = mix_gamma(weights, rc_gamma(question_similarity, recency, mask), H);
    }

    if (options.trace && options.trace_row) {
        const std::size_t row = *options.trace_row;
        BlockTrace t{block_name(bi), H, L, {}};
        const auto w = weights.data();
        t.weights.assign(w.begin() + static_cast<std::ptrdiff_t>(row * H * L * L),
                         w.begin() + static_cast<std::ptrdiff_t>((row + 1) * H * L * L));
        options.trace->push_back(std::move(t));
    }

    const auto context = ops::merge_heads(ops::batched_matmul(weights, vh), B, H);
    auto attn_out = ops::add_row_bias(ops::matmul(context, blk.wo), blk.bo);
    const bool drop = options.training && config_.dropout > 0.0;
    if (drop) attn_out = ops::dropout(attn_out, config_.dropout, *options.rng);
    const auto mid = ops::add(stream, attn_out);

    const auto f0 = ops::layer_norm(mid, blk.ln2_scale, blk.ln2_offset);
    const auto f1 = ops::relu(ops::add_row_bias(ops::matmul(f0, blk.ff1_w), blk.ff1_b));
    auto f2 = ops::add_row_bias(ops::matmul(f1, blk.ff2_w), blk.ff2_b);
    if (drop) f2 = ops::dropout(f2, config_.dropout, *options.rng);
    return ops::add(mid, f2);
}

Tensor KtModel::forward(const Batch& batch, const ForwardOptions& options) {
    const std::size_t B = batch.batch, L = batch.len;
    if (B == 0 || L == 0 || batch.items.size() != B * L || batch.responses.size() != B * L ||
        batch.valid.size() != B * L) {
        throw DimensionError("forward: inconsistent batch of " + std::to_string(B) + " x " +
                             std::to_string(L));
    }
    if (options.training && config_.dropout > 0.0 && !options.rng) {
        throw ConfigError("forward: dropout in training mode needs a random generator");
    }
    if (options.trace_row && *options.trace_row >= B) {
        throw RangeError("trace row " + std::to_string(*options.trace_row) + " outside batch of " +
                         std::to_string(B));
    }

    const auto questions = ops::embedding(question_emb_, batch.items);
    const auto interactions = ops::add(questions, ops::embedding(response_emb_, batch.responses));
    Tensor q_in = questions, x_in = interactions;
    if (config_.bias.kind == BiasKind::PE) {
        std::vector<int> positions(B * L);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < L; ++t) positions[b * L + t] = static_cast<int>(t);
        const auto pos = positional_embedding(position_emb_, positions);
        q_in = ops::add(questions, pos);
        x_in = ops::add(interactions, pos);
    }
    Tensor similarity;
    if (config_.bias.kind == BiasKind::RC) similarity = cosine_similarity(questions, B, L);

    const std::size_t per = config_.num_blocks;
    Tensor qs = q_in;
    for (std::size_t i = 0; i < per; ++i) qs = run_block(i, qs, nullptr, batch, similarity, options);
    qs = ops::layer_norm(qs, final_ln_scale_[0], final_ln_offset_[0]);

    Tensor xs = x_in;
    for (std::size_t i = per; i < 2 * per; ++i) xs = run_block(i, xs, nullptr, batch, similarity, options);
    xs = ops::layer_norm(xs, final_ln_scale_[1], final_ln_offset_[1]);

    Tensor rs = qs;
    for (std::size_t i = 2 * per; i < 3 * per; ++i) rs = run_block(i, rs, &xs, batch, similarity, options);
    rs = ops::layer_norm(rs, final_ln_scale_[2], final_ln_offset_[2]);

    // The first position has no history: its knowledge state is the zero vector.
    std::vector<std::uint8_t> has_history(B * L, 1);
    for (std::size_t b = 0; b < B; ++b) has_history[b * L] = 0;
    const auto knowledge = ops::mask_rows(rs, has_history);

    const auto joined = ops::concat_cols(knowledge, questions);
    const auto hidden = ops::relu(ops::add_row_bias(ops::matmul(joined, head1_w_), head1_b_));
    const auto logit = ops::add_row_bias(ops::matmul(hidden, head2_w_), head2_b_);
    return ops::sigmoid(ops::reshape(logit, {B * L}));
}

BlockTrace dump_attention(KtModel& model, const Batch& batch, std::size_t row, std::size_t block,
                          std::size_t n) {
    const auto name = model.block_name(block);
    if (row >= batch.batch) {
        throw RangeError("row " + std::to_string(row) + " outside batch of " + std::to_string(batch.batch));
    }
    AttentionTrace trace;
    {
        NoGradScope inference;
        ForwardOptions opts;
        opts.trace_row = row;
        opts.trace = &trace;
        model.forward(batch, opts);
    }
    const auto& full = trace.at(block);
    const std::size_t keep = std::min(n, full.len);
    BlockTrace out{name, full.heads, keep, std::vector<double>(full.heads * keep * keep)};
    for (std::size_t h = 0; h < full.heads; ++h)
        for (std::size_t i = 0; i < keep; ++i)
            for (std::size_t j = 0; j < keep; ++j)
                out.weights[(h * keep + i) * keep + j] = full.at(h, i, j);
    return out;
}

}  // namespace kt
