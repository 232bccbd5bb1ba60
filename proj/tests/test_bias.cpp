#include <doctest.h>

#include <cmath>
#include <random>

#include "kt/adam.hpp"
#include "kt/bias.hpp"
#include "kt/error.hpp"
#include "kt/ops.hpp"
#include "kt/tape.hpp"
#include "oracles.hpp"

using namespace kt;

namespace {

ops::Mask causal(std::size_t groups, std::size_t len, bool strict) {
    ops::Mask m{{groups, len, len}, std::vector<std::uint8_t>(groups * len * len)};
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j < len; ++j) m.valid[(g * len + i) * len + j] = strict ? j < i : j <= i;
    return m;
}

}  // namespace

TEST_CASE("kind and scope names round-trip") {
    for (auto k : {BiasKind::None, BiasKind::PE, BiasKind::Mono, BiasKind::RC, BiasKind::FoLiBi})
        CHECK(parse_bias_kind(to_string(k)) == k);
    CHECK(to_string(BiasKind::FoLiBi) == "folibi");
    CHECK(to_string(BiasKind::PE) == "pe");
    CHECK(parse_bias_scope("retriever_only") == BiasScope::RetrieverOnly);
    CHECK(parse_bias_scope(to_string(BiasScope::AllBlocks)) == BiasScope::AllBlocks);
    CHECK_THROWS_AS(parse_bias_kind("alibi"), ConfigError);
    CHECK_THROWS_AS(parse_bias_scope("encoders"), ConfigError);
}

TEST_CASE("slope schedule") {
    const auto s = folibi_slopes(8);
    REQUIRE(s.size() == 8);
    for (std::size_t h = 0; h < 8; ++h) CHECK(s[h] == std::ldexp(1.0, -static_cast<int>(h + 1)));
    CHECK(s.back() == 0.00390625);
    const auto four = folibi_slopes(4);
    CHECK(four == std::vector<double>{0.25, 0.0625, 0.015625, 0.00390625});
    for (std::size_t h = 1; h < s.size(); ++h) CHECK(s[h] < s[h - 1]);
}

TEST_CASE("folibi_beta example and layout") {
    const std::vector<double> half{0.5};
    const auto beta = folibi_beta(4, half);
    CHECK(beta.shape() == Shape{1, 4, 4});
    CHECK(beta[3 * 4 + 0] == 0.5);
    CHECK(beta[3 * 4 + 1] == 1.0);
    CHECK(beta[3 * 4 + 2] == 1.5);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j) CHECK(beta[i * 4 + j] == 0.0);
    const std::vector<double> zero{0.0};
    const auto flat = folibi_beta(5, zero);
    for (double v : flat.data()) CHECK(v == 0.0);
}

TEST_CASE("folibi shift equivalence, monotonicity and head ordering") {
    std::mt19937_64 rng(6);
    const std::size_t heads = 8, len = 12;
    const auto slopes = folibi_slopes(heads);
    const auto scores = Tensor::from({heads, len, len}, oracle::normal_values(heads * len * len, rng));
    const auto beta = folibi_beta(len, slopes);
    std::vector<double> shifted(heads * len * len, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j <= i; ++j)
                shifted[(h * len + i) * len + j] = -slopes[h] * static_cast<double>(i - j);
    const auto mask = causal(1, len, false);
    const auto a = ops::masked_softmax(add_head_bias(scores, beta), mask, 0.125);
    const auto b = ops::masked_softmax(add_head_bias(scores, Tensor::from({heads, len, len}, shifted)), mask, 0.125);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a[i] - b[i]) <= 1e-12);

    // Equal key logits: weight grows with recency in every head.
    const auto flat = ops::masked_softmax(add_head_bias(Tensor::zeros({heads, len, len}), beta), mask, 0.125);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 1; i < len; ++i)
            for (std::size_t j = 1; j <= i; ++j)
                CHECK(flat[(h * len + i) * len + j] > flat[(h * len + i) * len + j - 1]);

    // Penalty magnitude for a fixed distance shrinks with the head index.
    for (std::size_t delta = 1; delta < len; ++delta)
        for (std::size_t h = 1; h < heads; ++h) {
            const auto row = len - 1, key = row - delta;
            const double pen_prev = beta[((h - 1) * len + row) * len + row] - beta[((h - 1) * len + row) * len + key];
            const double pen = beta[(h * len + row) * len + row] - beta[(h * len + row) * len + key];
            CHECK(pen < pen_prev);
            CHECK(pen == doctest::Approx(slopes[h] * static_cast<double>(delta)).epsilon(1e-15));
        }
}

TEST_CASE("add_head_bias cycles heads over groups and passes gradients") {
    std::mt19937_64 rng(3);
    const std::size_t heads = 2, len = 3;
    auto scores = Tensor::parameter({2 * heads, len, len}, oracle::normal_values(2 * heads * len * len, rng), "s");
    const auto beta = Tensor::from({heads, len, len}, oracle::normal_values(heads * len * len, rng));
    const auto out = add_head_bias(scores, beta);
    for (std::size_t g = 0; g < 2 * heads; ++g)
        for (std::size_t k = 0; k < len * len; ++k)
            CHECK(out[g * len * len + k] == scores[g * len * len + k] + beta[(g % heads) * len * len + k]);
    const auto w = Tensor::from(out.shape(), oracle::normal_values(out.size(), rng));
    const auto r = oracle::check_gradients({scores}, [&] { return ops::sum(ops::mul(add_head_bias(scores, beta), w)); },
                                           20, rng);
    CHECK(r.failed == 0);
    CHECK_THROWS_AS(add_head_bias(scores, Tensor::zeros({3, len, len})), DimensionError);
}

TEST_CASE("mono_beta_value examples") {
    CHECK(mono_beta_value(1.0, 1.0, 2.0) == doctest::Approx(-1.2642411).epsilon(1e-7));
    CHECK(mono_beta_value(1.0, 1.0, 2.0) == doctest::Approx((std::exp(-1.0) - 1.0) * 2.0).epsilon(1e-15));
    CHECK(mono_beta_value(3.7, 0.0, 5.0) == 0.0);
    CHECK(std::abs(mono_beta_value(1e-12, 4.0, 3.0)) < 1e-10);
    CHECK_THROWS_AS(mono_beta_value(1.0, -0.5, 1.0), RangeError);
}

TEST_CASE("effective_distance examples") {
    const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25, 0.0};
    CHECK(effective_distance(uniform, 4, 3) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(effective_distance(uniform, 4, 0) == doctest::Approx(4.0).epsilon(1e-15));
    const std::vector<double> single{1.0, 0.0};
    CHECK(effective_distance(single, 1, 0) == 1.0);
    CHECK_THROWS_AS(effective_distance(uniform, 2, 2), RangeError);
    CHECK_THROWS_AS(effective_distance(uniform, 2, 3), RangeError);
}

TEST_CASE("effective_distances agrees with the scalar rule") {
    std::mt19937_64 rng(10);
    const std::size_t groups = 3, len = 7;
    const auto mask = causal(groups, len, true);
    const auto sim = ops::masked_softmax(Tensor::from({groups, len, len}, oracle::normal_values(groups * len * len, rng)),
                                         mask, 1.0, ops::EmptyRows::Zero);
    const auto d = effective_distances(sim);
    REQUIRE(d.size() == sim.size());
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < len; ++i) {
            const std::span<const double> row(sim.data().data() + (g * len + i) * len, len);
            for (std::size_t j = 0; j < len; ++j) {
                const double got = d[(g * len + i) * len + j];
                if (j < i) {
                    // Brute-force: distance times the mass on keys j..i.
                    double mass = 0.0;
                    for (std::size_t k = j; k <= i; ++k) mass += row[k];
                    CHECK(got == doctest::Approx(static_cast<double>(i - j) * mass).epsilon(1e-12));
                    CHECK(got == doctest::Approx(effective_distance(row, i, j)).epsilon(1e-12));
                    CHECK(got >= 0.0);
                } else {
                    CHECK(got == 0.0);
                }
            }
        }
}

TEST_CASE("mono_beta values and gradients") {
    std::mt19937_64 rng(14);
    const std::size_t heads = 2, groups = 4, len = 5;
    auto raw = Tensor::parameter({groups, len, len}, oracle::normal_values(groups * len * len, rng), "scores");
    auto theta = Tensor::parameter({heads}, {0.7, 1.9}, "theta");
    std::vector<double> dist(groups * len * len);
    std::uniform_real_distribution<double> u(0.0, 4.0);
    for (auto& v : dist) v = u(rng);
    const auto beta = mono_beta(raw, dist, theta, heads);
    for (std::size_t i = 0; i < beta.size(); ++i) {
        const auto g = i / (len * len);
        CHECK(beta[i] == doctest::Approx(mono_beta_value(theta[g % heads], dist[i], raw[i])).epsilon(1e-14));
    }
    const auto w = Tensor::from(beta.shape(), oracle::normal_values(beta.size(), rng));
    const auto r = oracle::check_gradients(
        {raw, theta}, [&] { return ops::sum(ops::mul(mono_beta(raw, dist, theta, heads), w)); }, 60, rng);
    INFO(r.worst_where);
    CHECK(r.failed == 0);
    dist[5] = -1.0;
    CHECK_THROWS_AS(mono_beta(raw, dist, theta, heads), RangeError);
}

TEST_CASE("mono with vanishing decay reproduces unbiased attention") {
    std::mt19937_64 rng(15);
    const std::size_t heads = 4, len = 9;
    const auto scores = Tensor::from({heads, len, len}, oracle::normal_values(heads * len * len, rng, 2.0));
    const auto mask = causal(1, len, false);
    const auto sim = ops::masked_softmax(scores, mask, 0.5);
    const auto dist = effective_distances(sim);
    const auto theta = Tensor::full({heads}, softplus(-40.0));
    const auto biased = ops::masked_softmax(ops::add(scores, mono_beta(scores, dist, theta, heads)), mask, 0.5);
    for (std::size_t i = 0; i < sim.size(); ++i) REQUIRE(std::abs(biased[i] - sim[i]) <= 1e-8);
}

TEST_CASE("softplus reparameterisation") {
    for (double y : {1e-6, 0.1, 1.0, 7.5, 40.0}) CHECK(softplus(softplus_inverse(y)) == doctest::Approx(y).epsilon(1e-12));
    CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(softplus(800.0) == 800.0);
    CHECK(softplus(-800.0) >= 0.0);
}

TEST_CASE("rc_gamma_row examples") {
    const std::vector<double> zeros{0.0, 0.0};
    const auto g = rc_gamma_row(zeros, 3, 1.0);
    REQUIRE(g.size() == 2);
    const auto want = oracle::softmax_row({std::exp(-2.0), std::exp(-1.0)}, {1, 1});
    CHECK(g[0] == doctest::Approx(want[0]).epsilon(1e-14));
    CHECK(g[0] == doctest::Approx(0.4421).epsilon(1e-4));
    CHECK(g[1] == doctest::Approx(0.5579).epsilon(1e-4));

    const std::vector<double> one{0.3};
    CHECK(rc_gamma_row(one, 2, 1.0) == std::vector<double>{1.0});

    std::mt19937_64 rng(1);
    const auto re = oracle::normal_values(6, rng);
    const auto slow = rc_gamma_row(re, 7, 1e12);
    const auto plain = oracle::softmax_row(re, std::vector<int>(6, 1));
    for (std::size_t i = 0; i < 6; ++i) CHECK(slow[i] == doctest::Approx(plain[i]).epsilon(1e-9));
}

TEST_CASE("recency matrix values and decay gradient") {
    auto s = Tensor::parameter({1}, {1.7}, "S");
    const auto r = recency_matrix(s, 5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j)
            CHECK(r[i * 5 + j] == (j <= i ? std::exp(-static_cast<double>(i - j) / 1.7) : 0.0));
    std::mt19937_64 rng(2);
    const auto w = Tensor::from({5, 5}, oracle::normal_values(25, rng));
    const auto res = oracle::check_gradients({s}, [&] { return ops::sum(ops::mul(recency_matrix(s, 5), w)); }, 5, rng);
    CHECK(res.failed == 0);
}

TEST_CASE("cosine similarity against a direct computation") {
    std::mt19937_64 rng(4);
    const std::size_t batch = 2, len = 4, d = 3;
    auto e = Tensor::parameter({batch * len, d}, oracle::normal_values(batch * len * d, rng), "emb");
    const auto c = cosine_similarity(e, batch, len);
    CHECK(c.shape() == Shape{batch, len, len});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j < len; ++j) {
                double dot = 0, ni = 0, nj = 0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double x = e[(b * len + i) * d + k], y = e[(b * len + j) * d + k];
                    dot += x * y;
                    ni += x * x;
                    nj += y * y;
                }
                CHECK(c[(b * len + i) * len + j] == doctest::Approx(dot / std::sqrt(ni * nj)).epsilon(1e-12));
            }
    const auto w = Tensor::from(c.shape(), oracle::normal_values(c.size(), rng));
    const auto res =
        oracle::check_gradients({e}, [&] { return ops::sum(ops::mul(cosine_similarity(e, batch, len), w)); }, 24, rng);
    INFO(res.worst_where);
    CHECK(res.failed == 0);
}

TEST_CASE("rc_gamma rows are distributions over valid keys") {
    std::mt19937_64 rng(5);
    const std::size_t batch = 3, len = 6;
    const auto sim = Tensor::from({batch, len, len}, oracle::normal_values(batch * len * len, rng));
    const auto rec = recency_matrix(Tensor::scalar(2.0), len);
    const auto mask = causal(batch, len, true);
    const auto g = rc_gamma(sim, rec, mask);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < len; ++j) CHECK(g[(b * len) * len + j] == 0.0);
        for (std::size_t i = 1; i < len; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double v = g[(b * len + i) * len + j];
                if (j >= i) CHECK(v == 0.0);
                total += v;
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
            // Same values as the per-row form with t = i + 1.
            std::vector<double> re(i);
            for (std::size_t j = 0; j < i; ++j) re[j] = sim[(b * len + i) * len + j];
            const auto row = rc_gamma_row(re, i + 1, 2.0);
            for (std::size_t j = 0; j < i; ++j) CHECK(g[(b * len + i) * len + j] == doctest::Approx(row[j]).epsilon(1e-12));
        }
    }
    // Constant similarity and very slow decay: uniform over valid keys.
    const auto flat = rc_gamma(Tensor::full({1, len, len}, 0.4), recency_matrix(Tensor::scalar(1e12), len),
                               causal(1, len, true));
    for (std::size_t i = 1; i < len; ++i)
        for (std::size_t j = 0; j < i; ++j)
            CHECK(flat[i * len + j] == doctest::Approx(1.0 / static_cast<double>(i)).epsilon(1e-9));
}

TEST_CASE("mix_gamma averages and keeps rows normalised") {
    std::mt19937_64 rng(8);
    const std::size_t batch = 2, heads = 3, len = 5;
    const auto mask = causal(batch, len, true);
    const auto alpha = ops::masked_softmax(
        Tensor::from({batch * heads, len, len}, oracle::normal_values(batch * heads * len * len, rng)),
        ops::Mask{{batch, len, len}, mask.valid}, 1.0, ops::EmptyRows::Zero);
    const auto gamma = rc_gamma(Tensor::from({batch, len, len}, oracle::normal_values(batch * len * len, rng)),
                                recency_matrix(Tensor::scalar(1.0), len), mask);
    const auto mixed = mix_gamma(alpha, gamma, heads);
    for (std::size_t g = 0; g < batch * heads; ++g)
        for (std::size_t i = 0; i < len; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const auto k = (g * len + i) * len + j;
                CHECK(mixed[k] == doctest::Approx(0.5 * (alpha[k] + gamma[((g / heads) * len + i) * len + j])).epsilon(1e-15));
                total += mixed[k];
            }
            CHECK(total == doctest::Approx(i == 0 ? 0.0 : 1.0).epsilon(1e-12));
        }
}

TEST_CASE("positional embedding lookup") {
    std::mt19937_64 rng(3);
    auto table = Tensor::parameter({100, 4}, oracle::normal_values(400, rng), "position_emb");
    const std::vector<int> twice{3, 3};
    const auto rows = positional_embedding(table, twice);
    for (std::size_t k = 0; k < 4; ++k) CHECK(rows[k] == rows[4 + k]);
    const std::vector<int> out_of_range{100};
    CHECK_THROWS_AS(positional_embedding(table, out_of_range), RangeError);

    const auto before = std::vector<double>(table.data().begin(), table.data().end());
    const std::vector<int> seven{7};
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(ops::sum(positional_embedding(table, seven)));
    }
    std::vector<Tensor> params{table};
    Adam opt;
    opt.step(params);
    for (std::size_t r = 0; r < 100; ++r)
        for (std::size_t k = 0; k < 4; ++k) {
            const bool changed = table[r * 4 + k] != before[r * 4 + k];
            CHECK(changed == (r == 7));
        }
}

TEST_CASE("causally masked cells stay zero under every bias") {
    std::mt19937_64 rng(12);
    const std::size_t heads = 2, len = 6;
    const auto scores = Tensor::from({heads, len, len}, oracle::normal_values(heads * len * len, rng));
    const auto mask = causal(1, len, true);
    const auto beta = folibi_beta(len, folibi_slopes(heads));
    const auto a = ops::masked_softmax(add_head_bias(scores, beta), mask, 1.0, ops::EmptyRows::Zero);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < len; ++i) {
            for (std::size_t j = i; j < len; ++j) CHECK(a[(h * len + i) * len + j] == 0.0);
            if (i == 0) continue;
            std::vector<double> row(len);
            std::vector<int> valid(len, 0);
            for (std::size_t j = 0; j < len; ++j) {
                row[j] = scores[(h * len + i) * len + j] + beta[(h * len + i) * len + j];
                valid[j] = j < i;
            }
            const auto want = oracle::softmax_row(row, valid);
            for (std::size_t j = 0; j < i; ++j) CHECK(a[(h * len + i) * len + j] == doctest::Approx(want[j]).epsilon(1e-12));
        }
}
