#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kt/bias.hpp"
#include "kt/data.hpp"
#include "kt/tensor.hpp"

namespace kt {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t num_heads = 8;
    // Attention blocks per component (question encoder, interaction encoder,
    // knowledge retriever).
    std::size_t num_blocks = 2;
    std::size_t max_len = 100;
    std::size_t vocab_size = 0;
    BiasConfig bias;
    std::size_t ffn_multiplier = 4;
    double dropout = 0.0;

    // Throws ConfigError.
    void validate() const;
    std::size_t head_dim() const { return d_model / num_heads; }

    bool operator==(const ModelConfig&) const = default;
};

enum class Component { QuestionEncoder, InteractionEncoder, Retriever };

std::string to_string(Component c);

// Attention weights of one block for a single batch row.
struct BlockTrace {
    std::string block;  // e.g. "retriever.1"
    std::size_t heads = 0;
    std::size_t len = 0;
    std::vector<double> weights;  // [heads, len, len]

    double at(std::size_t head, std::size_t query, std::size_t key) const {
        return weights[(head * len + query) * len + key];
    }
};

using AttentionTrace = std::vector<BlockTrace>;

// How the Mono effective distances are obtained during a forward pass.
// Record keeps the distances of the last pass and Replay reuses them, so a
// finite-difference probe sees the same constants the backward pass assumed.
enum class DistanceMode { Compute, Record, Replay };

struct ForwardOptions {
    bool training = false;
    std::mt19937_64* rng = nullptr;  // dropout randomness; required when training with dropout
    std::optional<std::size_t> trace_row;
    AttentionTrace* trace = nullptr;
};

/// Attentive knowledge-tracing network.
///
/// Question and interaction encoders are stacks of pre-norm self-attention
/// blocks with inclusive causal masks. The knowledge retriever attends from
/// the encoded questions to earlier encoded interactions (no self) and yields
/// the knowledge state o_t, which is concatenated with the raw embedding of
/// question t and fed to a two-layer head with a sigmoid output.
class KtModel {
public:
    KtModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    // Predicted P(correct) for every position, shape [B * L]. Padded
    // positions carry a value but take no part in any valid output.
    Tensor forward(const Batch& batch, const ForwardOptions& options = {});

    // Parameters in a fixed order; names are unique.
    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }
    std::size_t parameter_count() const;
    Tensor find(const std::string& name) const;

    // Copies every parameter whose name and shape also exist in `other`.
    // Returns how many tensors were copied.
    std::size_t copy_shared_parameters_from(const KtModel& other);

    void zero_grad();

    // 3 * num_blocks attention blocks, ordered question encoder, interaction
    // encoder, retriever.
    std::size_t block_count() const { return blocks_.size(); }
    std::string block_name(std::size_t index) const;
    std::size_t final_retriever_block() const { return blocks_.size() - 1; }
    // Index of "retriever", "question", "interaction" (final block of that
    // component), "<component>.<i>", or a flat index. Throws RangeError.
    std::size_t resolve_block(const std::string& ref) const;
    bool block_is_biased(std::size_t index) const;

    void set_distance_mode(DistanceMode mode) { distance_mode_ = mode; }

private:
    struct Block {
        Component component;
        std::size_t index;
        bool biased;
        Tensor ln1_scale, ln1_offset;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_scale, ln2_offset;
        Tensor ff1_w, ff1_b, ff2_w, ff2_b;
        Tensor decay_raw;  // Mono [H] or RC [1]; undefined otherwise
    };

    Tensor add_param(const std::string& name, Shape shape, std::vector<double> values);
    Tensor run_block(std::size_t bi, const Tensor& stream, const Tensor* values,
                     const Batch& batch, const Tensor& question_similarity,
                     const ForwardOptions& options);

    ModelConfig config_;
    std::vector<Tensor> params_;
    std::vector<Block> blocks_;
    Tensor question_emb_, response_emb_, position_emb_;
    Tensor final_ln_scale_[3], final_ln_offset_[3];
    Tensor head1_w_, head1_b_, head2_w_, head2_b_;

    DistanceMode distance_mode_ = DistanceMode::Compute;
    std::vector<std::vector<double>> recorded_distances_;
};

// Attention weights of `block` for one row of `batch`, truncated to the first
// `n` positions (all positions when n exceeds the row). Throws RangeError for
// a bad block or row.
BlockTrace dump_attention(KtModel& model, const Batch& batch, std::size_t row, std::size_t block,
                          std::size_t n = 20);

}  // namespace kt
