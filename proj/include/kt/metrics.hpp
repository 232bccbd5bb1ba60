#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include <json.hpp>

namespace kt {

// Probability that a random positive outscores a random negative, ties
// counted one half, via average ranks. Throws DegenerateError unless both
// classes are present and DimensionError on a size mismatch.
double auc(std::span<const double> preds, std::span<const int> labels);

struct Classification {
    double acc = 0.0;
    double rmse = 0.0;
    double w_acc = 0.0;
};

// acc counts (pred >= threshold) == label. w_acc = (TP/(TP+FN) + TN/(TN+FP)) / 2
// and throws DegenerateError when a class is missing. Empty input throws.
Classification classify(std::span<const double> preds, std::span<const int> labels,
                        double threshold = 0.5);

struct MetricsReport {
    double auc = 0.0;
    double acc = 0.0;
    double rmse = 0.0;  // raw; tables show rmse * 100
    double w_acc = 0.0;
    std::size_t n_evaluated = 0;
    std::size_t fold = 0;
    std::uint64_t seed = 0;
    std::string bias_kind;
    std::optional<std::size_t> length;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

MetricsReport compute_metrics(std::span<const double> preds, std::span<const int> labels);

}  // namespace kt
