#pragma once

#include <cstdint>
#include <vector>

#include "kt/tensor.hpp"

namespace kt {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step and keyed by position in the parameter list, so the same list
/// (same order) must be passed on every step.
class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    // Applies one update using each parameter's accumulated gradient. A
    // parameter without a gradient buffer is treated as having zero gradient.
    // Throws NumericError naming the parameter when a gradient is not finite.
    void step(std::vector<Tensor>& params);

    std::uint64_t steps() const noexcept { return step_; }
    const AdamConfig& config() const noexcept { return config_; }
    void set_lr(double lr) noexcept { config_.lr = lr; }

    const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }

private:
    AdamConfig config_;
    std::uint64_t step_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

}  // namespace kt
