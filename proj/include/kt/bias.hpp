#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kt/ops.hpp"
#include "kt/tensor.hpp"

// Forgetting-behaviour strategies for biased attention
//
//   alpha_t = softmax((q_t K^T + beta_t) / sqrt(d)) + gamma_t
//
// PE adds learned absolute positions to the inputs and leaves beta = gamma = 0.
// Mono scales logits by an exponential decay of an effective distance (beta).
// RC mixes in a softmax over embedding similarity plus exponential recency
// (gamma). FoLiBi adds a fixed per-head linear ramp over key positions (beta).
namespace kt {

enum class BiasKind { None, PE, Mono, RC, FoLiBi };

// Serialized as none|pe|mono|rc|folibi.
std::string to_string(BiasKind kind);
BiasKind parse_bias_kind(std::string_view name);

// Which attention blocks carry the bias. PE is an input-level bias and is
// unaffected by scope.
enum class BiasScope { AllBlocks, RetrieverOnly };

std::string to_string(BiasScope scope);
BiasScope parse_bias_scope(std::string_view name);

struct BiasConfig {
    BiasKind kind = BiasKind::None;
    BiasScope scope = BiasScope::AllBlocks;
    // FoLiBi slopes, one per head. Empty means folibi_slopes(num_heads).
    std::vector<double> slopes;
    // Initial value of the Mono decay rates theta_h and of the RC decay S.
    // Stored through a softplus reparameterisation.
    double initial_decay = 1.0;

    bool operator==(const BiasConfig&) const = default;
};

// m_h = 2^(-8h/H) for h = 1..H.
std::vector<double> folibi_slopes(std::size_t heads);

double softplus(double x);
double softplus_inverse(double y);

// [H, t, t] with beta[h][i][j] = slopes[h] * (j + 1) on and below the
// diagonal, 0 above it. Later keys get the larger bias.
Tensor folibi_beta(std::size_t t, std::span<const double> slopes);

// Adds a constant per-head bias [H, L, L] to scores [B*H, L, L].
Tensor add_head_bias(const Tensor& scores, const Tensor& beta);

// (exp(-theta * distance) - 1) * qk. Throws RangeError for distance < 0.
double mono_beta_value(double theta, double distance, double qk);

// Effective distance between query position `query` and an earlier key
// position `key` (0-based): (query - key) times the similarity mass that
// `sim_row` places on keys key..query. Throws RangeError unless key < query.
double effective_distance(std::span<const double> sim_row, std::size_t query, std::size_t key);

// Effective distances for every (row, key) of normalised similarities
// [G, L, L]. Zero wherever the similarity is zero (masked keys).
std::vector<double> effective_distances(const Tensor& sim_weights);

// Mono beta for raw (unscaled) scores [B*H, L, L]: beta = (exp(-theta_h d) - 1) * qk
// with theta [H] positive. `distances` are constants; gradients reach the
// scores and theta only. Throws RangeError for a negative distance.
Tensor mono_beta(const Tensor& raw_scores, std::span<const double> distances, const Tensor& theta,
                 std::size_t heads);

// RC coefficient for the query at 1-based position t over keys 1..t-1:
// softmax(emb_sim[tau] + exp(-(t - tau) / S)). emb_sim holds t-1 entries.
std::vector<double> rc_gamma_row(std::span<const double> emb_sim, std::size_t t, double decay);

// [L, L] recency term exp(-(i - j) / S) on and below the diagonal, 0 above;
// differentiable in the scalar tensor S.
Tensor recency_matrix(const Tensor& decay, std::size_t len);

// Cosine similarity of the rows of embeddings [B*L, d] within each sequence -> [B, L, L].
Tensor cosine_similarity(const Tensor& embeddings, std::size_t batch, std::size_t len);

// softmax(emb_sim [B, L, L] + recency [L, L]) over mask-valid keys; rows with
// no valid key are zero.
Tensor rc_gamma(const Tensor& emb_sim, const Tensor& recency, const ops::Mask& mask);

// (alpha + gamma) / 2 with alpha [B*H, L, L] and gamma [B, L, L] shared by
// the heads. Both operands are distributions over the same valid keys, so the
// result stays normalised.
Tensor mix_gamma(const Tensor& alpha, const Tensor& gamma, std::size_t heads);

// Rows of the learned position table for `positions`; RangeError when a
// position is not below the table size.
Tensor positional_embedding(const Tensor& table, std::span<const int> positions);

}  // namespace kt
