#include "kt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kt/error.hpp"

namespace kt {
namespace {

void check_inputs(std::span<const double> preds, std::span<const int> labels, const char* what) {
    if (preds.size() != labels.size()) {
        throw DimensionError(std::string(what) + ": " + std::to_string(preds.size()) +
                             " predictions for " + std::to_string(labels.size()) + " labels");
    }
    if (preds.empty()) throw DegenerateError(std::string(what) + ": no predictions");
    for (int y : labels)
        if (y != 0 && y != 1) throw RangeError(std::string(what) + ": labels must be 0 or 1");
}

}  // namespace

double auc(std::span<const double> preds, std::span<const int> labels) {
    check_inputs(preds, labels, "auc");
    const std::size_t n = preds.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a] < preds[b]; });

    double positive_rank_sum = 0.0;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && preds[order[j]] == preds[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) {
                positive_rank_sum += avg_rank;
                ++positives;
            }
        }
        i = j;
    }
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0) throw DegenerateError("auc: undefined for a single class");
    const double p = static_cast<double>(positives), q = static_cast<double>(negatives);
    return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

Classification classify(std::span<const double> preds, std::span<const int> labels, double threshold) {
    check_inputs(preds, labels, "classify");
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    double sq = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool predicted = preds[i] >= threshold;
        if (labels[i] == 1) (predicted ? tp : fn)++;
        else (predicted ? fp : tn)++;
        const double e = preds[i] - labels[i];
        sq += e * e;
    }
    const double n = static_cast<double>(preds.size());
    Classification c;
    c.acc = static_cast<double>(tp + tn) / n;
    c.rmse = std::sqrt(sq / n);
    if (tp + fn == 0 || tn + fp == 0) throw DegenerateError("w_acc: undefined for a single class");
    c.w_acc = 0.5 * (static_cast<double>(tp) / static_cast<double>(tp + fn) +
                     static_cast<double>(tn) / static_cast<double>(tn + fp));
    return c;
}

MetricsReport compute_metrics(std::span<const double> preds, std::span<const int> labels) {
    MetricsReport r;
    r.auc = auc(preds, labels);
    const auto c = classify(preds, labels);
    r.acc = c.acc;
    r.rmse = c.rmse;
    r.w_acc = c.w_acc;
    r.n_evaluated = preds.size();
    return r;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j = {
        {"auc", auc},
        {"acc", acc},
        {"rmse", rmse},
        {"rmse_x100", rmse * 100.0},
        {"w_acc", w_acc},
        {"n_evaluated", n_evaluated},
        {"fold", fold},
        {"seed", seed},
        {"bias_kind", bias_kind},
    };
    j["length"] = length ? nlohmann::json(*length) : nlohmann::json(nullptr);
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.auc = j.at("auc").get<double>();
    r.acc = j.at("acc").get<double>();
    r.rmse = j.at("rmse").get<double>();
    r.w_acc = j.at("w_acc").get<double>();
    r.n_evaluated = j.at("n_evaluated").get<std::size_t>();
    r.fold = j.value("fold", std::size_t{0});
    r.seed = j.value("seed", std::uint64_t{0});
    r.bias_kind = j.value("bias_kind", std::string());
    if (j.contains("length") && !j["length"].is_null()) r.length = j["length"].get<std::size_t>();
    return r;
}

}  // namespace kt
