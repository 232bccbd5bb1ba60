#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "kt/tensor.hpp"

// Differentiable tensor operations. Each op records its backward rule on the
// active tape when any input requires grad.
namespace kt::ops {

// Boolean validity pattern for masked_softmax. The last two dimensions are
// [rows, keys]; leading dimensions broadcast over consecutive groups of the
// logits, so a [B, L, L] mask serves [B, H, L, L] logits.
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> valid;

    static Mask all_valid(Shape shape);
    std::size_t size() const { return valid.size(); }
};

enum class EmptyRows {
    Error,  // a row with no valid entry throws DegenerateError
    Zero,   // such a row produces all zeros and passes no gradient
};

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [G,m,k] x [G,k,n] -> [G,m,n]; with transpose_b, b is [G,n,k].
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// x [N,d] + b [d] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);

// Scalar sum of all entries.
Tensor sum(const Tensor& x);

// Per-row layer normalisation of x [N,d] with scale gamma [d] and offset beta [d].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Rows of x [N,d] scaled to unit L2 norm (norm floored at eps).
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// Gathers rows of table [V,d]; throws RangeError for an id outside [0,V).
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& x, Shape shape);
// [B*L, H*dh] -> [B*H, L, dh]
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads);
// [B*H, L, dh] -> [B*L, H*dh]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads);
// Zeroes the rows of x [N,d] whose keep flag is 0.
Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> keep);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

// softmax(scale * logits) over the last dimension, restricted to mask-valid
// entries. Masked entries are exactly 0. Rows are stabilised by subtracting
// the maximum over valid entries.
Tensor masked_softmax(const Tensor& logits, const Mask& mask, double scale = 1.0,
                      EmptyRows empty = EmptyRows::Error);

// Mean over valid positions of -[r log p + (1-r) log(1-p)], with p clamped to
// [eps, 1-eps]. Throws DegenerateError when no position is valid.
Tensor bce_loss(const Tensor& pred, const Tensor& labels, std::span<const std::uint8_t> valid,
                double eps = 1e-7);

// Raw GEMM kernel used by the ops: C (+)= op(A) * op(B), row-major.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b, bool accumulate);

}  // namespace kt::ops
