#include "kt/adam.hpp"

#include <cmath>

#include "kt/error.hpp"

namespace kt {

void Adam::step(std::vector<Tensor>& params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].size(), 0.0);
            v_[i].assign(params[i].size(), 0.0);
        }
    }
    if (m_.size() != params.size()) {
        throw DimensionError("Adam::step: parameter list changed size between steps");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].has_grad()) {
            const auto g = params[i].grad();
            for (std::size_t j = 0; j < g.size(); ++j) {
                if (!std::isfinite(g[j])) {
                    throw NumericError("non-finite gradient in parameter '" + params[i].name() +
                                       "' at index " + std::to_string(j));
                }
            }
        }
        if (m_[i].size() != params[i].size()) {
            throw DimensionError("Adam::step: moment buffers do not match parameter '" +
                                 params[i].name() + "'");
        }
    }

    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].data();
        const auto g = params[i].grad();
        const bool has = params[i].has_grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = has ? g[j] : 0.0;
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            w[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

}  // namespace kt
