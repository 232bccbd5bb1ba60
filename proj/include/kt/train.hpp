#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "kt/adam.hpp"
#include "kt/data.hpp"
#include "kt/metrics.hpp"
#include "kt/model.hpp"

namespace kt {

struct TrainConfig {
    double lr = 0.001;
    std::size_t batch_size = 512;
    std::size_t max_epochs = 300;
    std::size_t patience = 10;
    std::uint64_t seed = 0;
    std::size_t fold = 0;
    // Leave each segment's first position (no history) out of the loss and
    // the metrics.
    bool exclude_first = false;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

// Tracks the best validation score and counts epochs without improvement.
// Only a strict increase counts as an improvement.
class EarlyStopper {
public:
    explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

    // Records one epoch's score; true when it is a new best.
    bool update(double score);
    bool should_stop() const { return epochs_ > 0 && since_best_ >= patience_; }
    // 1-based epoch of the best score, 0 before any update.
    std::size_t best_epoch() const { return best_epoch_; }
    double best_score() const { return best_; }
    std::size_t epochs() const { return epochs_; }

private:
    std::size_t patience_;
    std::size_t epochs_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t since_best_ = 0;
    double best_ = 0.0;
};

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_auc = 0.0;
    bool improved = false;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_val_auc = 0.0;
    bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Trains on `train_segments` (already windowed to the model's max_len) and
// selects by validation AUC. On return the model holds the parameters of the
// best epoch. A non-finite loss or gradient throws NumericError naming the
// epoch and batch.
TrainResult train(KtModel& model, std::span<const LearnerSequence> train_segments,
                  std::span<const LearnerSequence> val_segments, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

// One epoch of shuffled mini-batch updates; returns the mean training loss
// weighted by the number of scored positions per batch.
double train_epoch(KtModel& model, Adam& optimizer, std::span<const LearnerSequence> segments,
                   const TrainConfig& config, std::mt19937_64& rng, std::size_t epoch);

struct Predictions {
    std::vector<double> preds;
    std::vector<int> labels;
};

// Predictions at every valid position of every segment, in segment order.
Predictions predict(KtModel& model, std::span<const LearnerSequence> segments,
                    std::size_t batch_size, bool exclude_first = false);

MetricsReport evaluate(KtModel& model, std::span<const LearnerSequence> segments,
                       std::size_t batch_size, bool exclude_first = false);

// Rows per inference pass for sequences of length `len`: at most `requested`,
// and few enough that one attention tensor stays near 8M entries.
std::size_t inference_chunk(std::size_t requested, std::size_t len, std::size_t heads);

// Positions that enter the loss: valid, and not the first when excluded.
std::vector<std::uint8_t> scored_positions(const Batch& batch, bool exclude_first);

}  // namespace kt
