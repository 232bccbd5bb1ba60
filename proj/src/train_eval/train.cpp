#include "kt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kt/error.hpp"
#include "kt/ops.hpp"
#include "kt/tape.hpp"

namespace kt {
namespace {

std::vector<std::vector<double>> snapshot(const KtModel& model) {
    std::vector<std::vector<double>> out;
    for (const auto& p : model.parameters()) out.emplace_back(p.data().begin(), p.data().end());
    return out;
}

void restore(KtModel& model, const std::vector<std::vector<double>>& values) {
    auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
        std::copy(values[i].begin(), values[i].end(), params[i].data().begin());
}

std::vector<LearnerSequence> gather(std::span<const LearnerSequence> segments,
                                    std::span<const std::size_t> order, std::size_t begin,
                                    std::size_t end) {
    std::vector<LearnerSequence> out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) out.push_back(segments[order[i]]);
    return out;
}

}  // namespace

std::size_t inference_chunk(std::size_t requested, std::size_t len, std::size_t heads) {
    constexpr std::size_t kBudget = std::size_t{1} << 23;
    const std::size_t per_row = std::max<std::size_t>(1, heads * len * len);
    return std::clamp<std::size_t>(kBudget / per_row, 1, std::max<std::size_t>(1, requested));
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be a finite non-negative number");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (max_epochs == 0) throw ConfigError("train: max_epochs must be positive");
    if (patience == 0) throw ConfigError("train: patience must be positive");
}

bool EarlyStopper::update(double score) {
    ++epochs_;
    if (best_epoch_ == 0 || score > best_) {
        best_ = score;
        best_epoch_ = epochs_;
        since_best_ = 0;
        return true;
    }
    ++since_best_;
    return false;
}

std::vector<std::uint8_t> scored_positions(const Batch& batch, bool exclude_first) {
    auto keep = batch.valid;
    if (exclude_first)
        for (std::size_t b = 0; b < batch.batch; ++b) keep[batch.index(b, 0)] = 0;
    return keep;
}

double train_epoch(KtModel& model, Adam& optimizer, std::span<const LearnerSequence> segments,
                   const TrainConfig& config, std::mt19937_64& rng, std::size_t epoch) {
    std::vector<std::size_t> order(segments.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t scored = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_no) {
        const auto end = std::min(order.size(), start + config.batch_size);
        const auto batch = make_batch(gather(segments, order, start, end));
        const auto keep = scored_positions(batch, config.exclude_first);
        const auto count = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1));
        if (count == 0) continue;
        const auto labels = Tensor::from({batch.responses.size()},
                                         std::vector<double>(batch.responses.begin(), batch.responses.end()));
        try {
            model.zero_grad();
            Tape tape;
            TapeScope scope(tape);
            ForwardOptions opts;
            opts.training = true;
            opts.rng = &rng;
            const auto pred = model.forward(batch, opts);
            const auto loss = ops::bce_loss(pred, labels, keep);
            tape.backward(loss);
            optimizer.step(model.parameters());
            loss_sum += loss.item() * static_cast<double>(count);
            scored += count;
        } catch (const NumericError& e) {
            throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_no) + ": " + e.what());
        }
    }
    if (scored == 0) throw DegenerateError("train: no scored position in the training data");
    return loss_sum / static_cast<double>(scored);
}

TrainResult train(KtModel& model, std::span<const LearnerSequence> train_segments,
                  std::span<const LearnerSequence> val_segments, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
    config.validate();
    if (train_segments.empty()) throw DegenerateError("train: empty training set");
    if (val_segments.empty()) throw DegenerateError("train: empty validation set");

    std::mt19937_64 rng(config.seed);
    Adam optimizer(AdamConfig{config.lr});
    EarlyStopper stopper(config.patience);
    auto best = snapshot(model);
    TrainResult result;

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        EpochLog entry;
        entry.epoch = epoch;
        entry.train_loss = train_epoch(model, optimizer, train_segments, config, rng, epoch);
        const auto val = predict(model, val_segments, config.batch_size, config.exclude_first);
        entry.val_auc = auc(val.preds, val.labels);
        entry.improved = stopper.update(entry.val_auc);
        if (entry.improved) best = snapshot(model);
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
        if (stopper.should_stop()) {
            result.stopped_early = true;
            break;
        }
    }
    restore(model, best);
    result.best_epoch = stopper.best_epoch();
    result.best_val_auc = stopper.best_score();
    return result;
}

Predictions predict(KtModel& model, std::span<const LearnerSequence> segments, std::size_t batch_size,
                    bool exclude_first) {
    if (batch_size == 0) throw ConfigError("predict: batch_size must be positive");
    NoGradScope inference;
    Predictions out;
    std::size_t longest = 1;
    for (const auto& s : segments) longest = std::max(longest, s.steps.size());
    const auto chunk = inference_chunk(batch_size, longest, model.config().num_heads);
    for (std::size_t start = 0; start < segments.size(); start += chunk) {
        const auto end = std::min(segments.size(), start + chunk);
        const auto batch = make_batch(segments.subspan(start, end - start));
        const auto keep = scored_positions(batch, exclude_first);
        const auto probs = model.forward(batch);
        const auto pred = probs.data();
        for (std::size_t i = 0; i < keep.size(); ++i) {
            if (!keep[i]) continue;
            out.preds.push_back(pred[i]);
            out.labels.push_back(batch.responses[i]);
        }
    }
    return out;
}

MetricsReport evaluate(KtModel& model, std::span<const LearnerSequence> segments, std::size_t batch_size,
                       bool exclude_first) {
    const auto p = predict(model, segments, batch_size, exclude_first);
    auto report = compute_metrics(p.preds, p.labels);
    report.bias_kind = to_string(model.config().bias.kind);
    return report;
}

}  // namespace kt
