#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "kt/error.hpp"
#include "kt/metrics.hpp"
#include "kt/ops.hpp"
#include "kt/sweep.hpp"
#include "kt/tape.hpp"
#include "kt/train.hpp"
#include "oracles.hpp"

using namespace kt;

namespace {

ModelConfig tiny_config(BiasKind kind, std::size_t vocab, std::size_t max_len) {
    ModelConfig c;
    c.d_model = 16;
    c.num_heads = 4;
    c.num_blocks = 1;
    c.max_len = max_len;
    c.vocab_size = vocab;
    c.bias.kind = kind;
    return c;
}

// Learner l answers item 20l + t at step t; every item belongs to one step,
// so the responses can be memorised from the question alone.
std::vector<LearnerSequence> memorisable(std::size_t learners, std::size_t steps, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(0.5);
    std::vector<LearnerSequence> out;
    for (std::size_t l = 0; l < learners; ++l) {
        LearnerSequence s{"m" + std::to_string(l), {}};
        for (std::size_t t = 0; t < steps; ++t) s.steps.push_back({static_cast<int>(l * steps + t), coin(rng) ? 1 : 0});
        out.push_back(std::move(s));
    }
    return out;
}

double brute_w_acc(std::size_t tp, std::size_t fn, std::size_t tn, std::size_t fp) {
    return 0.5 * (static_cast<double>(tp) / static_cast<double>(tp + fn) +
                  static_cast<double>(tn) / static_cast<double>(tn + fp));
}

}  // namespace

TEST_CASE("auc examples") {
    CHECK(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
    CHECK(auc(std::vector<double>{0.2, 0.8, 0.6}, std::vector<int>{1, 0, 1}) == 0.0);
    CHECK(auc(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}) == 0.5);
    CHECK_THROWS_AS(auc(std::vector<double>{0.5, 0.7}, std::vector<int>{1, 1}), DegenerateError);
    CHECK_THROWS_AS(auc(std::vector<double>{0.5}, std::vector<int>{1, 0}), DimensionError);
    CHECK_THROWS_AS(auc(std::vector<double>{0.5, 0.4}, std::vector<int>{2, 0}), RangeError);
}

TEST_CASE("auc matches the pairwise oracle with ties") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> size(2, 100);
    std::uniform_int_distribution<int> level(0, 9);
    std::bernoulli_distribution coin(0.4);
    std::size_t done = 0;
    while (done < 200) {
        const auto n = size(rng);
        std::vector<double> p(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = level(rng) / 10.0;  // coarse grid forces ties
            y[i] = coin(rng);
        }
        if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
        REQUIRE(std::abs(auc(p, y) - oracle::pairwise_auc(p, y)) <= 1e-12);
        ++done;
    }
}

TEST_CASE("auc is invariant under strictly monotone transforms") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(60), cube(60), squash(60);
        std::vector<int> y(60);
        for (std::size_t i = 0; i < 60; ++i) {
            p[i] = std::round(u(rng) * 20.0) / 20.0;
            cube[i] = p[i] * p[i] * p[i];
            squash[i] = 1.0 / (1.0 + std::exp(-(5.0 * p[i] - 2.0)));
            y[i] = i < 2 ? static_cast<int>(i) : coin(rng);
        }
        const double base = auc(p, y);
        CHECK(auc(cube, y) == base);
        CHECK(auc(squash, y) == base);
    }
}

TEST_CASE("classification metric examples") {
    const auto c = classify(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0});
    CHECK(c.acc == 1.0);
    CHECK(c.rmse == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(c.w_acc == 1.0);

    std::vector<double> flat(10, 0.5 + 1e-9);
    std::vector<int> half{1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
    const auto k = classify(flat, half);
    CHECK(k.acc == 0.5);
    CHECK(k.w_acc == 0.5);

    // 3 TP, 1 FN, 2 TN, 2 FP
    const std::vector<double> p{0.9, 0.8, 0.7, 0.2, 0.1, 0.3, 0.6, 0.9};
    const std::vector<int> y{1, 1, 1, 1, 0, 0, 0, 0};
    CHECK(classify(p, y).w_acc == doctest::Approx(0.625).epsilon(1e-15));

    CHECK(classify(std::vector<double>(6, 0.5), std::vector<int>{1, 0, 1, 0, 0, 1}).rmse == 0.5);
    CHECK(classify(std::vector<double>{1.0, 0.0}, std::vector<int>{1, 0}).rmse <= 1e-7);
    CHECK_THROWS_AS(classify(std::vector<double>{}, std::vector<int>{}), Error);
    CHECK_THROWS_AS(classify(std::vector<double>{0.4, 0.6}, std::vector<int>{1, 1}), DegenerateError);
}

TEST_CASE("w_acc matches the balanced formula on random confusion tables") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::size_t> cell(0, 30);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t tp = cell(rng), fn = cell(rng) + (tp == 0), tn = cell(rng), fp = cell(rng) + (tn == 0);
        std::vector<double> p;
        std::vector<int> y;
        for (std::size_t i = 0; i < tp; ++i) p.push_back(0.75), y.push_back(1);
        for (std::size_t i = 0; i < fn; ++i) p.push_back(0.25), y.push_back(1);
        for (std::size_t i = 0; i < tn; ++i) p.push_back(0.25), y.push_back(0);
        for (std::size_t i = 0; i < fp; ++i) p.push_back(0.75), y.push_back(0);
        const auto c = classify(p, y);
        REQUIRE(std::abs(c.w_acc - brute_w_acc(tp, fn, tn, fp)) <= 1e-12);
        REQUIRE(c.acc == doctest::Approx(static_cast<double>(tp + tn) / static_cast<double>(p.size())).epsilon(1e-14));
    }
}

TEST_CASE("metrics report json round-trip") {
    const std::vector<double> p{0.9, 0.2, 0.6, 0.4};
    const std::vector<int> y{1, 0, 0, 1};
    auto r = compute_metrics(p, y);
    CHECK(r.n_evaluated == 4);
    CHECK(r.auc == doctest::Approx(oracle::pairwise_auc(p, y)).epsilon(1e-15));
    r.fold = 2;
    r.seed = 7;
    r.bias_kind = "folibi";
    r.length = 50;
    const auto j = r.to_json();
    for (const auto* key : {"auc", "acc", "rmse", "w_acc", "n_evaluated", "fold", "seed", "bias_kind", "length"})
        CHECK(j.contains(key));
    CHECK(j.at("rmse_x100").get<double>() == doctest::Approx(100.0 * r.rmse));
    const auto back = MetricsReport::from_json(j);
    CHECK(back.auc == r.auc);
    CHECK(back.rmse == r.rmse);
    CHECK(back.length == r.length);
    CHECK(back.bias_kind == "folibi");
}

TEST_CASE("early stopping arithmetic") {
    EarlyStopper s(10);
    const double scores[] = {0.6, 0.7, 0.8};
    std::size_t epoch = 0;
    for (double v : scores) {
        CHECK(s.update(v));
        ++epoch;
    }
    while (!s.should_stop()) {
        CHECK_FALSE(s.update(0.8));  // equal is not an improvement
        ++epoch;
    }
    CHECK(epoch == 13);
    CHECK(s.best_epoch() == 3);
    CHECK(s.best_score() == 0.8);

    EarlyStopper noisy(2);
    CHECK(noisy.update(0.5));
    CHECK_FALSE(noisy.update(0.4));
    CHECK(noisy.update(0.55));
    CHECK_FALSE(noisy.should_stop());
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK(c.lr == 0.001);
    CHECK(c.batch_size == 512);
    CHECK(c.max_epochs == 300);
    CHECK(c.patience == 10);
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lr = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("zero learning rate leaves parameters and loss unchanged") {
    std::mt19937_64 rng(4);
    const auto segs = window_all(oracle::random_sequences(10, 5, 15, 6, rng), 12);
    KtModel m(tiny_config(BiasKind::FoLiBi, 6, 12), 2);
    const auto before = m.parameters();
    std::vector<std::vector<double>> values;
    for (const auto& p : before) values.emplace_back(p.data().begin(), p.data().end());
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.batch_size = 4;
    Adam opt(AdamConfig{0.0});
    std::mt19937_64 shuffle(1);
    const double first = train_epoch(m, opt, segs, cfg, shuffle, 1);
    for (std::size_t e = 2; e <= 4; ++e)
        CHECK(train_epoch(m, opt, segs, cfg, shuffle, e) == doctest::Approx(first).epsilon(1e-13));
    for (std::size_t i = 0; i < values.size(); ++i)
        CHECK(std::equal(values[i].begin(), values[i].end(), m.parameters()[i].data().begin()));
}

TEST_CASE("training restores the best validation epoch") {
    std::mt19937_64 rng(5);
    const auto all = oracle::random_sequences(30, 8, 20, 6, rng);
    const std::vector<LearnerSequence> tr(all.begin(), all.begin() + 24), va(all.begin() + 24, all.end());
    KtModel m(tiny_config(BiasKind::Mono, 6, 20), 3);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.max_epochs = 12;
    cfg.patience = 3;
    cfg.lr = 0.01;
    std::size_t calls = 0;
    const auto result = train(m, tr, va, cfg, [&](const EpochLog&) { ++calls; });
    CHECK(calls == result.log.size());
    double best = 0.0;
    std::size_t best_epoch = 0;
    for (const auto& e : result.log)
        if (e.val_auc > best) best = e.val_auc, best_epoch = e.epoch;
    CHECK(result.best_epoch == best_epoch);
    CHECK(result.best_val_auc == best);
    const auto val = predict(m, va, cfg.batch_size);
    CHECK(auc(val.preds, val.labels) == doctest::Approx(best).epsilon(1e-12));
    if (result.stopped_early) CHECK(result.log.size() == result.best_epoch + cfg.patience);

    CHECK_THROWS_AS(train(m, {}, va, cfg), DegenerateError);
}

TEST_CASE("training is reproducible from the seed") {
    std::mt19937_64 rng(6);
    const auto all = oracle::random_sequences(12, 8, 14, 6, rng);
    const std::vector<LearnerSequence> tr(all.begin(), all.begin() + 9), va(all.begin() + 9, all.end());
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.max_epochs = 3;
    cfg.seed = 9;
    auto run = [&] {
        KtModel m(tiny_config(BiasKind::RC, 6, 14), 4);
        const auto r = train(m, tr, va, cfg);
        std::vector<double> flat;
        for (const auto& p : m.parameters()) flat.insert(flat.end(), p.data().begin(), p.data().end());
        std::vector<double> losses;
        for (const auto& e : r.log) losses.push_back(e.train_loss);
        return std::make_pair(flat, losses);
    };
    CHECK(run() == run());
}

TEST_CASE("a memorisable toy set is overfit") {
    std::mt19937_64 rng(7);
    const auto data = memorisable(4, 20, rng);
    KtModel m(tiny_config(BiasKind::FoLiBi, 80, 20), 1);
    Adam opt(AdamConfig{0.01});
    TrainConfig cfg;
    cfg.batch_size = 4;
    double loss = 1.0;
    std::size_t epoch = 0;
    while (epoch < 200 && loss >= 0.05) loss = train_epoch(m, opt, data, cfg, rng, ++epoch);
    INFO("epochs " << epoch);
    CHECK(loss < 0.05);
}

TEST_CASE("predict counts valid positions and honours exclude_first") {
    std::mt19937_64 rng(8);
    const auto segs = window_all(oracle::random_sequences(9, 5, 30, 6, rng), 10);
    KtModel m(tiny_config(BiasKind::None, 6, 10), 1);
    std::size_t total = 0;
    for (const auto& s : segs) total += s.size();
    CHECK(predict(m, segs, 4).preds.size() == total);
    CHECK(predict(m, segs, 4, true).preds.size() == total - segs.size());
    // Chunking changes only the padding, so predictions agree to rounding.
    const auto one = predict(m, segs, 1).preds, many = predict(m, segs, 64).preds;
    for (std::size_t i = 0; i < one.size(); ++i) CHECK(one[i] == doctest::Approx(many[i]).epsilon(1e-12));
    const auto labels = predict(m, segs, 3).labels;
    std::vector<int> want;
    for (const auto& s : segs)
        for (const auto& st : s.steps) want.push_back(st.correct);
    CHECK(labels == want);
}

TEST_CASE("inference chunk sizing") {
    CHECK(inference_chunk(512, 100, 8) == 104);
    CHECK(inference_chunk(32, 100, 8) == 32);
    CHECK(inference_chunk(512, 3000, 8) == 1);
    CHECK(inference_chunk(0, 10, 8) == 1);
}

TEST_CASE("scored positions drop the first step only when asked") {
    std::vector<LearnerSequence> segs{{"a", {{1, 1}, {2, 0}, {3, 1}}}, {"b", {{1, 0}}}};
    const auto b = make_batch(segs);
    CHECK(scored_positions(b, false) == b.valid);
    const auto k = scored_positions(b, true);
    CHECK(k == std::vector<std::uint8_t>{0, 1, 1, 0, 0, 0});
}

TEST_CASE("length sweep counts match the counting oracle") {
    std::mt19937_64 rng(9);
    const auto seqs = oracle::random_sequences(15, 2, 40, 6, rng);
    KtModel m(tiny_config(BiasKind::FoLiBi, 6, 41), 1);
    const std::vector<std::size_t> lengths{1, 3, 10, 20, 39, 40, 60};
    const auto settings = sweep_length(m, seqs, lengths, 16);
    REQUIRE(settings.size() == lengths.size());
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        std::size_t want = 0;
        for (const auto& s : seqs) want += s.size() > lengths[i] ? s.size() - lengths[i] : 0;
        CHECK(settings[i].length == lengths[i]);
        CHECK(settings[i].n_evaluated == want);
        CHECK(settings[i].status == (want == 0 ? SweepStatus::Empty : SweepStatus::Ok));
        if (want > 0) {
            CHECK(settings[i].acc.has_value());
            CHECK(settings[i].rmse.has_value());
        }
    }
}

TEST_CASE("length sweep predictions come from windows of exactly n steps") {
    std::mt19937_64 rng(10);
    const auto seqs = oracle::random_sequences(4, 12, 12, 6, rng);
    KtModel m(tiny_config(BiasKind::Mono, 6, 12), 2);
    const std::size_t n = 5;
    // Oracle: every target position p scored from steps p-n..p in its own batch.
    std::vector<double> preds;
    std::vector<int> labels;
    for (const auto& s : seqs)
        for (std::size_t p = n; p < s.size(); ++p) {
            std::vector<LearnerSequence> one{{s.learner_id, {s.steps.begin() + static_cast<long>(p - n),
                                                             s.steps.begin() + static_cast<long>(p + 1)}}};
            NoGradScope frozen;
            preds.push_back(m.forward(make_batch(one))[n]);
            labels.push_back(s.steps[p].correct);
        }
    const std::vector<std::size_t> lengths{n};
    const auto got = sweep_length(m, seqs, lengths, 7);
    const auto want = compute_metrics(preds, labels);
    CHECK(got[0].n_evaluated == preds.size());
    CHECK(*got[0].auc == doctest::Approx(want.auc).epsilon(1e-12));
    CHECK(*got[0].rmse == doctest::Approx(want.rmse).epsilon(1e-12));
    CHECK(*got[0].acc == doctest::Approx(want.acc).epsilon(1e-12));
}

TEST_CASE("length sweep marks settings a PE table cannot hold") {
    std::mt19937_64 rng(11);
    const auto seqs = oracle::random_sequences(5, 30, 30, 6, rng);
    KtModel m(tiny_config(BiasKind::PE, 6, 20), 1);
    const std::vector<std::size_t> lengths{10, 19, 20, 25};
    const auto s = sweep_length(m, seqs, lengths, 8);
    CHECK(s[0].status == SweepStatus::Ok);
    CHECK(s[1].status == SweepStatus::Ok);
    CHECK(s[2].status == SweepStatus::Unsupported);
    CHECK(s[3].status == SweepStatus::Unsupported);
    CHECK(s[2].n_evaluated == 0);
}

TEST_CASE("sweep rows are one per length and metric") {
    std::vector<SweepSetting> settings(3);
    settings[0] = {10, SweepStatus::Ok, 12, 0.7, 0.6, 0.45, 0.65};
    settings[1] = {20, SweepStatus::Ok, 3, std::nullopt, 1.0, 0.2, std::nullopt};
    settings[2] = {50, SweepStatus::Empty, 0, std::nullopt, std::nullopt, std::nullopt, std::nullopt};
    const auto rows = sweep_rows(settings, "folibi", 1, 3);
    CHECK(rows.size() == 12);
    CHECK(rows[0].metric == "auc");
    CHECK(rows[3].metric == "w_acc");
    CHECK(rows[4].status == "undefined");
    CHECK(rows[5].status == "ok");
    CHECK(rows[8].status == "empty");
    const auto text = format_sweep_csv(rows);
    CHECK(text.rfind(std::string(kSweepHeader) + "\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 13);
    CHECK(text.find("folibi,1,3,10,auc,0.7,12,ok\n") != std::string::npos);
    CHECK(text.find("folibi,1,3,20,auc,,3,undefined\n") != std::string::npos);
}
