#pragma once

#include <span>
#include <string>
#include <vector>

#include "kt/data.hpp"
#include "kt/metrics.hpp"
#include "kt/model.hpp"

namespace kt {

inline constexpr std::size_t kDefaultSweepLengths[] = {10, 20, 50, 100, 200, 300};
inline constexpr const char* kSweepMetrics[] = {"auc", "acc", "rmse", "w_acc"};

enum class SweepStatus {
    Ok,
    Empty,        // no learner is longer than n
    Unsupported,  // n + 1 positions exceed the positional table of a PE model
};

std::string to_string(SweepStatus s);

struct SweepSetting {
    std::size_t length = 0;
    SweepStatus status = SweepStatus::Ok;
    std::size_t n_evaluated = 0;
    // Metrics that are undefined for this setting (a single label class)
    // stay empty; the others are filled when status is Ok.
    std::optional<double> auc, acc, rmse, w_acc;
};

// For every n and every learner of total length L > n, predicts positions
// n+1..L, each from a window holding exactly the preceding n interactions.
// `sequences` are whole (unwindowed) learner histories.
std::vector<SweepSetting> sweep_length(KtModel& model, std::span<const LearnerSequence> sequences,
                                       std::span<const std::size_t> lengths, std::size_t batch_size);

// Flat plot-ready rows: one per (length, metric).
struct SweepRow {
    std::string bias_kind;
    std::size_t fold = 0;
    std::uint64_t seed = 0;
    std::size_t length = 0;
    std::string metric;
    std::optional<double> value;
    std::size_t n_evaluated = 0;
    std::string status;
};

std::vector<SweepRow> sweep_rows(std::span<const SweepSetting> settings, const std::string& bias_kind,
                                 std::size_t fold, std::uint64_t seed);

inline constexpr const char* kSweepHeader = "bias_kind,fold,seed,length,metric,value,n_evaluated,status";
std::string format_sweep_csv(std::span<const SweepRow> rows);

}  // namespace kt
