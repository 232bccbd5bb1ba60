#include "kt/sweep.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "kt/error.hpp"
#include "kt/tape.hpp"
#include "kt/train.hpp"

namespace kt {
namespace {

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace

std::string to_string(SweepStatus s) {
    switch (s) {
        case SweepStatus::Ok: return "ok";
        case SweepStatus::Empty: return "empty";
        case SweepStatus::Unsupported: return "unsupported";
    }
    return "ok";
}

std::vector<SweepSetting> sweep_length(KtModel& model, std::span<const LearnerSequence> sequences,
                                       std::span<const std::size_t> lengths, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("sweep: batch_size must be positive");
    const auto& cfg = model.config();
    std::vector<SweepSetting> out;
    NoGradScope inference;
    for (std::size_t n : lengths) {
        if (n == 0) throw ConfigError("sweep: lengths must be positive");
        SweepSetting setting;
        setting.length = n;
        std::size_t expected = 0;
        for (const auto& s : sequences) expected += s.steps.size() > n ? s.steps.size() - n : 0;
        if (expected == 0) {
            setting.status = SweepStatus::Empty;
            out.push_back(setting);
            continue;
        }
        if (cfg.bias.kind == BiasKind::PE && n + 1 > cfg.max_len) {
            setting.status = SweepStatus::Unsupported;
            out.push_back(setting);
            continue;
        }

        const std::size_t chunk = inference_chunk(batch_size, n + 1, cfg.num_heads);
        std::vector<double> preds;
        std::vector<int> labels;
        std::vector<LearnerSequence> pending;
        auto flush = [&] {
            if (pending.empty()) return;
            const auto batch = make_batch(pending, n + 1);
            const auto out = model.forward(batch);
            const auto p = out.data();
            for (std::size_t b = 0; b < batch.batch; ++b) {
                preds.push_back(p[batch.index(b, n)]);
                labels.push_back(batch.responses[batch.index(b, n)]);
            }
            pending.clear();
        };
        for (const auto& s : sequences) {
            for (std::size_t target = n; target < s.steps.size(); ++target) {
                const auto first = s.steps.begin() + static_cast<std::ptrdiff_t>(target - n);
                pending.push_back({s.learner_id, {first, first + static_cast<std::ptrdiff_t>(n + 1)}});
                if (pending.size() == chunk) flush();
            }
        }
        flush();

        setting.n_evaluated = preds.size();
        try {
            setting.auc = auc(preds, labels);
        } catch (const DegenerateError&) {
        }
        try {
            setting.w_acc = classify(preds, labels).w_acc;
        } catch (const DegenerateError&) {
        }
        double sq = 0.0, hits = 0.0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            sq += (preds[i] - labels[i]) * (preds[i] - labels[i]);
            hits += ((preds[i] >= 0.5) == (labels[i] == 1)) ? 1.0 : 0.0;
        }
        setting.acc = hits / static_cast<double>(preds.size());
        setting.rmse = std::sqrt(sq / static_cast<double>(preds.size()));
        out.push_back(setting);
    }
    return out;
}

std::vector<SweepRow> sweep_rows(std::span<const SweepSetting> settings, const std::string& bias_kind,
                                 std::size_t fold, std::uint64_t seed) {
    std::vector<SweepRow> rows;
    for (const auto& s : settings) {
        const std::optional<double> values[] = {s.auc, s.acc, s.rmse, s.w_acc};
        for (std::size_t m = 0; m < std::size(kSweepMetrics); ++m) {
            SweepRow r{bias_kind, fold, seed, s.length, kSweepMetrics[m], values[m], s.n_evaluated,
                       to_string(s.status)};
            if (s.status == SweepStatus::Ok && !values[m]) r.status = "undefined";
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

std::string format_sweep_csv(std::span<const SweepRow> rows) {
    std::string out = std::string(kSweepHeader) + "\n";
    for (const auto& r : rows) {
        out += r.bias_kind + "," + std::to_string(r.fold) + "," + std::to_string(r.seed) + "," +
               std::to_string(r.length) + "," + r.metric + "," + (r.value ? format_double(*r.value) : "") +
               "," + std::to_string(r.n_evaluated) + "," + r.status + "\n";
    }
    return out;
}

}  // namespace kt
