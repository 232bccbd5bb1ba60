#pragma once

// Independent reference computations used by the unit tests and the
// acceptance binary. Nothing here calls into the code under test except to
// build inputs and read results.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "kt/data.hpp"
#include "kt/tape.hpp"
#include "kt/tensor.hpp"

namespace oracle {

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

// Plain softmax over the valid entries of one row, in long double.
inline std::vector<double> softmax_row(const std::vector<double>& x, const std::vector<int>& valid) {
    long double total = 0.0L;
    for (std::size_t j = 0; j < x.size(); ++j)
        if (valid[j]) total += std::exp(static_cast<long double>(x[j]));
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t j = 0; j < x.size(); ++j)
        if (valid[j]) y[j] = static_cast<double>(std::exp(static_cast<long double>(x[j])) / total);
    return y;
}

// Fraction of (positive, negative) pairs ranked correctly, ties 1/2.
inline double pairwise_auc(const std::vector<double>& p, const std::vector<int>& y) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (y[j] != 0) continue;
            pairs += 1.0;
            wins += p[i] > p[j] ? 1.0 : (p[i] == p[j] ? 0.5 : 0.0);
        }
    }
    return wins / pairs;
}

inline std::vector<double> normal_values(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

struct GradCheck {
    std::size_t checked = 0;
    std::size_t failed = 0;
    double worst_rel = 0.0;
    std::string worst_where;
};

// Compares reverse-mode gradients of `loss` with central differences on
// `coords` coordinates drawn round-robin across `params`. A coordinate passes
// when |a - n| <= rel_tol * max(|a|, |n|), or both are below abs_floor in
// difference (gradients that are zero up to rounding).
inline GradCheck check_gradients(std::vector<kt::Tensor> params, const std::function<kt::Tensor()>& loss,
                                 std::size_t coords, std::mt19937_64& rng, double h = 1e-5,
                                 double rel_tol = 1e-3, double abs_floor = 1e-8,
                                 const std::function<void(bool)>& before_eval = {}) {
    for (auto& p : params) p.zero_grad();
    {
        if (before_eval) before_eval(true);
        kt::Tape tape;
        kt::TapeScope scope(tape);
        const auto l = loss();
        tape.backward(l);
    }
    auto eval = [&] {
        if (before_eval) before_eval(false);
        kt::NoGradScope frozen;
        return loss().item();
    };
    GradCheck out;
    for (std::size_t c = 0; c < coords; ++c) {
        auto& p = params[c % params.size()];
        std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
        const std::size_t i = pick(rng);
        const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
        const double saved = p.data()[i];
        p.data()[i] = saved + h;
        const double up = eval();
        p.data()[i] = saved - h;
        const double down = eval();
        p.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double diff = std::abs(analytic - numeric);
        const double scale = std::max(std::abs(analytic), std::abs(numeric));
        const double rel = scale > 0.0 ? diff / scale : 0.0;
        ++out.checked;
        const bool ok = diff <= rel_tol * scale || diff < abs_floor;
        if (!ok) ++out.failed;
        if (!ok && rel > out.worst_rel) {
            out.worst_rel = rel;
            out.worst_where = p.name() + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) +
                              " numeric " + std::to_string(numeric);
        }
    }
    return out;
}

// Random learner histories over `vocab` items.
inline std::vector<kt::LearnerSequence> random_sequences(std::size_t count, std::size_t min_len,
                                                         std::size_t max_len, std::size_t vocab,
                                                         std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::uniform_int_distribution<int> item(0, static_cast<int>(vocab) - 1);
    std::bernoulli_distribution coin(0.6);
    std::vector<kt::LearnerSequence> out;
    for (std::size_t i = 0; i < count; ++i) {
        kt::LearnerSequence s{"L" + std::to_string(i), {}};
        const auto n = len(rng);
        for (std::size_t t = 0; t < n; ++t) s.steps.push_back({item(rng), coin(rng) ? 1 : 0});
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace oracle
