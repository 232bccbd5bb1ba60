#include "kt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "kt/error.hpp"
#include "kt/tape.hpp"

namespace kt::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + shape_str(t.shape()));
    }
}

template <class F>
std::vector<double> map_values(const Tensor& x, F f) {
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return out;
}

}  // namespace

Mask Mask::all_valid(Shape shape) {
    const auto n = shape_size(shape);
    return Mask{std::move(shape), std::vector<std::uint8_t>(n, 1)};
}

// Eigen peels unaligned leading elements off its vectorised loops, so the
// rounding of a product would depend on where the operands happen to live.
// Operands are staged in aligned scratch buffers to keep results a function
// of the values alone.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
    const auto M = static_cast<Eigen::Index>(m);
    const auto K = static_cast<Eigen::Index>(k);
    const auto N = static_cast<Eigen::Index>(n);
    thread_local RowMat A, B, C;
    if (trans_a) A = ConstMap(a, K, M).transpose();
    else A = ConstMap(a, M, K);
    if (trans_b) B = ConstMap(b, N, K).transpose();
    else B = ConstMap(b, K, N);
    C.resize(M, N);
    C.noalias() = A * B;
    MutMap out(c, M, N);
    if (accumulate) {
        for (Eigen::Index i = 0; i < M; ++i)
            for (Eigen::Index j = 0; j < N; ++j) out(i, j) += C(i, j);
    } else {
        for (Eigen::Index i = 0; i < M; ++i)
            for (Eigen::Index j = 0; j < N; ++j) out(i, j) = C(i, j);
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    OpRecorder rec("matmul", {&a, &b});
    std::vector<double> out(m * n);
    gemm(a.data().data(), b.data().data(), out.data(), m, k, n, false, false, false);
    Tensor c = rec.output({m, n}, std::move(out));
    rec.on_backward(c, [a, b, m, k, n](const double* g) {
        if (double* ga = grad_target(a)) gemm(g, b.data().data(), ga, m, n, k, false, true, true);
        if (double* gb = grad_target(b)) gemm(a.data().data(), g, gb, k, m, n, true, false, true);
    });
    return c;
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    require_rank(a, 3, "batched_matmul");
    require_rank(b, 3, "batched_matmul");
    const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != groups || bk != k) {
        throw DimensionError("batched_matmul: incompatible shapes " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()) + (transpose_b ? "^T" : ""));
    }
    OpRecorder rec("batched_matmul", {&a, &b});
    std::vector<double> out(groups * m * n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t g = 0; g < groups; ++g) {
        gemm(pa + g * m * k, pb + g * k * n, out.data() + g * m * n, m, k, n, false, transpose_b,
             false);
    }
    Tensor c = rec.output({groups, m, n}, std::move(out));
    rec.on_backward(c, [a, b, groups, m, k, n, transpose_b](const double* g) {
        double* ga = grad_target(a);
        double* gb = grad_target(b);
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        for (std::size_t i = 0; i < groups; ++i) {
            const double* gi = g + i * m * n;
            if (ga) gemm(gi, pb + i * k * n, ga + i * m * k, m, n, k, false, !transpose_b, true);
            if (gb) {
                if (transpose_b) {
                    // dB[n,k] = dC^T A
                    gemm(gi, pa + i * m * k, gb + i * k * n, n, m, k, true, false, true);
                } else {
                    gemm(pa + i * m * k, gi, gb + i * k * n, k, m, n, true, false, true);
                }
            }
        }
    });
    return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    OpRecorder rec("add", {&a, &b});
    const auto x = a.data();
    const auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    Tensor c = rec.output(a.shape(), std::move(out));
    rec.on_backward(c, [a, b](const double* g) {
        const auto n = a.size();
        if (double* ga = grad_target(a)) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        if (double* gb = grad_target(b)) for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
    });
    return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    OpRecorder rec("sub", {&a, &b});
    const auto x = a.data();
    const auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    Tensor c = rec.output(a.shape(), std::move(out));
    rec.on_backward(c, [a, b](const double* g) {
        const auto n = a.size();
        if (double* ga = grad_target(a)) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        if (double* gb = grad_target(b)) for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
    });
    return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    OpRecorder rec("mul", {&a, &b});
    const auto x = a.data();
    const auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    Tensor c = rec.output(a.shape(), std::move(out));
    rec.on_backward(c, [a, b](const double* g) {
        const auto n = a.size();
        const auto x = a.data();
        const auto y = b.data();
        if (double* ga = grad_target(a)) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
        if (double* gb = grad_target(b)) for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * x[i];
    });
    return c;
}

Tensor scale(const Tensor& a, double s) {
    OpRecorder rec("scale", {&a});
    Tensor c = rec.output(a.shape(), map_values(a, [s](double v) { return v * s; }));
    rec.on_backward(c, [a, s](const double* g) {
        double* ga = grad_target(a);
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += s * g[i];
    });
    return c;
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    require_rank(x, 2, "add_row_bias");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (b.size() != d) {
        throw DimensionError("add_row_bias: bias " + shape_str(b.shape()) + " vs input " +
                             shape_str(x.shape()));
    }
    OpRecorder rec("add_row_bias", {&x, &b});
    const auto in = x.data();
    const auto bias = b.data();
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[r * d + j] + bias[j];
    Tensor c = rec.output(x.shape(), std::move(out));
    rec.on_backward(c, [x, b, rows, d](const double* g) {
        if (double* gx = grad_target(x)) for (std::size_t i = 0; i < rows * d; ++i) gx[i] += g[i];
        if (double* gb = grad_target(b))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
    });
    return c;
}

Tensor relu(const Tensor& x) {
    OpRecorder rec("relu", {&x});
    Tensor c = rec.output(x.shape(), map_values(x, [](double v) { return v > 0.0 ? v : 0.0; }));
    rec.on_backward(c, [x](const double* g) {
        double* gx = grad_target(x);
        const auto in = x.data();
        for (std::size_t i = 0; i < in.size(); ++i)
            if (in[i] > 0.0) gx[i] += g[i];
    });
    return c;
}

Tensor sigmoid(const Tensor& x) {
    OpRecorder rec("sigmoid", {&x});
    Tensor c = rec.output(x.shape(), map_values(x, [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    }));
    rec.on_backward(c, [x, c](const double* g) {
        double* gx = grad_target(x);
        const auto y = c.data();
        for (std::size_t i = 0; i < y.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
    return c;
}

Tensor softplus(const Tensor& x) {
    OpRecorder rec("softplus", {&x});
    Tensor c = rec.output(x.shape(), map_values(x, [](double v) {
        return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }));
    rec.on_backward(c, [x](const double* g) {
        double* gx = grad_target(x);
        const auto in = x.data();
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double v = in[i];
            const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
            gx[i] += g[i] * s;
        }
    });
    return c;
}

Tensor exp(const Tensor& x) {
    OpRecorder rec("exp", {&x});
    Tensor c = rec.output(x.shape(), map_values(x, [](double v) { return std::exp(v); }));
    rec.on_backward(c, [x, c](const double* g) {
        double* gx = grad_target(x);
        const auto y = c.data();
        for (std::size_t i = 0; i < y.size(); ++i) gx[i] += g[i] * y[i];
    });
    return c;
}

Tensor sum(const Tensor& x) {
    OpRecorder rec("sum", {&x});
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor c = rec.output({1}, {s});
    rec.on_backward(c, [x](const double* g) {
        double* gx = grad_target(x);
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[0];
    });
    return c;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank(x, 2, "layer_norm");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (gamma.size() != d || beta.size() != d) {
        throw DimensionError("layer_norm: affine parameters do not match width " +
                             std::to_string(d));
    }
    OpRecorder rec("layer_norm", {&x, &gamma, &beta});
    const auto in = x.data();
    const auto gm = gamma.data();
    const auto bt = beta.data();
    std::vector<double> out(in.size());
    std::vector<double> xhat(in.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gm[j] + bt[j];
        }
    }
    Tensor c = rec.output(x.shape(), std::move(out));
    rec.on_backward(c, [x, gamma, beta, rows, d, xhat = std::move(xhat),
                        inv_std = std::move(inv_std)](const double* g) {
        double* gx = grad_target(x);
        double* gg = grad_target(gamma);
        double* gb = grad_target(beta);
        const auto gm = gamma.data();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * d;
            const double* hr = xhat.data() + r * d;
            if (gg) for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
            if (gb) for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
            if (!gx) continue;
            double mean_dx = 0.0, mean_dxh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dxhat[j] = gr[j] * gm[j];
                mean_dx += dxhat[j];
                mean_dxh += dxhat[j] * hr[j];
            }
            mean_dx /= static_cast<double>(d);
            mean_dxh /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j)
                gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_dx - hr[j] * mean_dxh);
        }
    });
    return c;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    require_rank(x, 2, "l2_normalize_rows");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    OpRecorder rec("l2_normalize_rows", {&x});
    const auto in = x.data();
    std::vector<double> out(in.size());
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += in[r * d + j] * in[r * d + j];
        norms[r] = std::max(std::sqrt(s), eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[r * d + j] / norms[r];
    }
    Tensor c = rec.output(x.shape(), std::move(out));
    rec.on_backward(c, [x, c, rows, d, norms = std::move(norms), eps](const double* g) {
        double* gx = grad_target(x);
        const auto y = c.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * d;
            if (norms[r] <= eps) {
                for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += gr[j] / eps;
                continue;
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += gr[j] * y[r * d + j];
            for (std::size_t j = 0; j < d; ++j)
                gx[r * d + j] += (gr[j] - y[r * d + j] * dot) / norms[r];
        }
    });
    return c;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    require_rank(table, 2, "embedding");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw RangeError("embedding: index " + std::to_string(id) + " outside table of " +
                             std::to_string(vocab) + " rows" +
                             (table.name().empty() ? "" : " (" + table.name() + ")"));
        }
    }
    OpRecorder rec("embedding", {&table});
    const auto src = table.data();
    std::vector<double> out(ids.size() * d);
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(src.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
    Tensor c = rec.output({ids.size(), d}, std::move(out));
    rec.on_backward(c, [table, d, ids = std::vector<int>(ids.begin(), ids.end())](const double* g) {
        double* gt = grad_target(table);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            double* row = gt + static_cast<std::size_t>(ids[r]) * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += g[r * d + j];
        }
    });
    return c;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "concat_cols");
    require_rank(b, 2, "concat_cols");
    if (a.dim(0) != b.dim(0)) {
        throw DimensionError("concat_cols: row counts differ, " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t rows = a.dim(0), p = a.dim(1), q = b.dim(1);
    OpRecorder rec("concat_cols", {&a, &b});
    std::vector<double> out(rows * (p + q));
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.data() + r * p, p, out.data() + r * (p + q));
        std::copy_n(y.data() + r * q, q, out.data() + r * (p + q) + p);
    }
    Tensor c = rec.output({rows, p + q}, std::move(out));
    rec.on_backward(c, [a, b, rows, p, q](const double* g) {
        double* ga = grad_target(a);
        double* gb = grad_target(b);
        for (std::size_t r = 0; r < rows; ++r) {
            if (ga) for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += g[r * (p + q) + j];
            if (gb) for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += g[r * (p + q) + p + j];
        }
    });
    return c;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    }
    OpRecorder rec("reshape", {&x});
    Tensor c = rec.output(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
    rec.on_backward(c, [x](const double* g) {
        double* gx = grad_target(x);
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i];
    });
    return c;
}

Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t len, std::size_t heads) {
    require_rank(x, 2, "split_heads");
    if (x.dim(0) != batch * len || heads == 0 || x.dim(1) % heads != 0) {
        throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into " +
                             std::to_string(batch) + " x " + std::to_string(len) + " with " +
                             std::to_string(heads) + " heads");
    }
    const std::size_t width = x.dim(1), dh = width / heads;
    OpRecorder rec("split_heads", {&x});
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t h = 0; h < heads; ++h)
                std::copy_n(in.data() + (b * len + i) * width + h * dh, dh,
                            out.data() + ((b * heads + h) * len + i) * dh);
    Tensor c = rec.output({batch * heads, len, dh}, std::move(out));
    rec.on_backward(c, [x, batch, len, heads, width, dh](const double* g) {
        double* gx = grad_target(x);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* src = g + ((b * heads + h) * len + i) * dh;
                    double* dst = gx + (b * len + i) * width + h * dh;
                    for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
    });
    return c;
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
    require_rank(x, 3, "merge_heads");
    if (heads == 0 || x.dim(0) != batch * heads) {
        throw DimensionError("merge_heads: " + shape_str(x.shape()) + " is not " +
                             std::to_string(batch) + " x " + std::to_string(heads) + " groups");
    }
    const std::size_t len = x.dim(1), dh = x.dim(2), width = heads * dh;
    OpRecorder rec("merge_heads", {&x});
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < len; ++i)
                std::copy_n(in.data() + ((b * heads + h) * len + i) * dh, dh,
                            out.data() + (b * len + i) * width + h * dh);
    Tensor c = rec.output({batch * len, width}, std::move(out));
    rec.on_backward(c, [x, batch, heads, len, dh, width](const double* g) {
        double* gx = grad_target(x);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < len; ++i) {
                    const double* src = g + (b * len + i) * width + h * dh;
                    double* dst = gx + ((b * heads + h) * len + i) * dh;
                    for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
    });
    return c;
}

Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> keep) {
    require_rank(x, 2, "mask_rows");
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (keep.size() != rows) {
        throw DimensionError("mask_rows: " + std::to_string(keep.size()) + " flags for " +
                             std::to_string(rows) + " rows");
    }
    OpRecorder rec("mask_rows", {&x});
    const auto in = x.data();
    std::vector<double> out(in.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        if (keep[r]) std::copy_n(in.data() + r * d, d, out.data() + r * d);
    Tensor c = rec.output(x.shape(), std::move(out));
    rec.on_backward(c, [x, rows, d, keep = std::vector<std::uint8_t>(keep.begin(), keep.end())](
                           const double* g) {
        double* gx = grad_target(x);
        for (std::size_t r = 0; r < rows; ++r)
            if (keep[r])
                for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j];
    });
    return c;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be below 1");
    std::bernoulli_distribution keep(1.0 - rate);
    const double s = 1.0 / (1.0 - rate);
    std::vector<double> factor(x.size());
    for (double& f : factor) f = keep(rng) ? s : 0.0;
    OpRecorder rec("dropout", {&x});
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor[i];
    Tensor c = rec.output(x.shape(), std::move(out));
    rec.on_backward(c, [x, factor = std::move(factor)](const double* g) {
        double* gx = grad_target(x);
        for (std::size_t i = 0; i < factor.size(); ++i) gx[i] += g[i] * factor[i];
    });
    return c;
}

Tensor masked_softmax(const Tensor& logits, const Mask& mask, double scale, EmptyRows empty) {
    if (logits.rank() == 0 || mask.shape.empty()) {
        throw DimensionError("masked_softmax: empty shape");
    }
    const std::size_t keys = logits.shape().back();
    if (mask.shape.back() != keys || mask.valid.size() != shape_size(mask.shape) ||
        keys == 0) {
        throw DimensionError("masked_softmax: mask " + shape_str(mask.shape) +
                             " does not match logits " + shape_str(logits.shape()));
    }
    const std::size_t rows = logits.size() / keys;
    const std::size_t mask_rows = mask.valid.size() / keys;
    const std::size_t per_group = mask.shape.size() >= 2 ? mask.shape[mask.shape.size() - 2] : 1;
    if (mask_rows == 0 || rows % mask_rows != 0 || mask_rows % per_group != 0) {
        throw DimensionError("masked_softmax: mask " + shape_str(mask.shape) +
                             " cannot broadcast over logits " + shape_str(logits.shape()));
    }
    const std::size_t repeat = rows / mask_rows;
    auto mask_row = [&](std::size_t r) {
        return ((r / per_group) / repeat) * per_group + r % per_group;
    };

    OpRecorder rec("masked_softmax", {&logits});
    const auto in = logits.data();
    std::vector<double> out(in.size(), 0.0);
    // Entries past a row's last valid key stay 0 in both passes.
    std::vector<std::uint32_t> span_end(rows, 0);
    // Aligned scratch, for the same reason as in gemm.
    Eigen::ArrayXd z(static_cast<Eigen::Index>(keys)), e(static_cast<Eigen::Index>(keys));
    for (std::size_t r = 0; r < rows; ++r) {
        const std::uint8_t* m = mask.valid.data() + mask_row(r) * keys;
        const double* x = in.data() + r * keys;
        double* y = out.data() + r * keys;
        std::size_t end = keys;
        while (end > 0 && !m[end - 1]) --end;
        if (end == 0) {
            if (empty == EmptyRows::Error) {
                throw DegenerateError("masked_softmax: row " + std::to_string(r) +
                                      " has no valid position");
            }
            continue;
        }
        span_end[r] = static_cast<std::uint32_t>(end);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < end; ++j)
            if (m[j]) mx = std::max(mx, scale * x[j]);
        for (std::size_t j = 0; j < end; ++j) z[j] = m[j] ? scale * x[j] - mx : -1e300;
        const auto span = static_cast<Eigen::Index>(end);
        e.head(span) = z.head(span).exp();
        // exp may underflow to a tiny value rather than exactly 0; masked
        // entries are forced to 0.
        double total = 0.0;
        for (std::size_t j = 0; j < end; ++j) {
            y[j] = m[j] ? e[static_cast<Eigen::Index>(j)] : 0.0;
            total += y[j];
        }
        for (std::size_t j = 0; j < end; ++j) y[j] /= total;
    }
    Tensor c = rec.output(logits.shape(), std::move(out));
    rec.on_backward(c, [logits, c, keys, scale, span_end = std::move(span_end)](const double* g) {
        double* gx = grad_target(logits);
        const auto y = c.data();
        for (std::size_t r = 0; r < span_end.size(); ++r) {
            const std::size_t end = span_end[r];
            const double* yr = y.data() + r * keys;
            const double* gr = g + r * keys;
            double dot = 0.0;
            for (std::size_t j = 0; j < end; ++j) dot += yr[j] * gr[j];
            double* out = gx + r * keys;
            for (std::size_t j = 0; j < end; ++j) out[j] += scale * yr[j] * (gr[j] - dot);
        }
    });
    return c;
}

Tensor bce_loss(const Tensor& pred, const Tensor& labels, std::span<const std::uint8_t> valid,
                double eps) {
    require_same_shape(pred, labels, "bce_loss");
    if (valid.size() != pred.size()) {
        throw DimensionError("bce_loss: valid mask has " + std::to_string(valid.size()) +
                             " entries for " + std::to_string(pred.size()) + " predictions");
    }
    std::size_t count = 0;
    for (auto v : valid) count += v ? 1 : 0;
    if (count == 0) throw DegenerateError("bce_loss: no valid position in batch");

    OpRecorder rec("bce_loss", {&pred});
    const auto p = pred.data();
    const auto r = labels.data();
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!valid[i]) continue;
        const double q = std::clamp(p[i], eps, 1.0 - eps);
        total -= r[i] * std::log(q) + (1.0 - r[i]) * std::log(1.0 - q);
    }
    const double n = static_cast<double>(count);
    Tensor c = rec.output({1}, {total / n});
    rec.on_backward(c, [pred, labels, n, eps,
                        valid = std::vector<std::uint8_t>(valid.begin(), valid.end())](
                           const double* g) {
        double* gp = grad_target(pred);
        const auto p = pred.data();
        const auto r = labels.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!valid[i]) continue;
            // Clamped region is flat.
            if (p[i] < eps || p[i] > 1.0 - eps) continue;
            gp[i] += g[0] * (-r[i] / p[i] + (1.0 - r[i]) / (1.0 - p[i])) / n;
        }
    });
    return c;
}

}  // namespace kt::ops
