// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace rayvis {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// Learning rate halves every `halving_period` steps.
    std::int64_t halving_period = 100000;

    double rate_at(std::int64_t step) const {
        return learning_rate * std::pow(0.5, double(step / halving_period));
    }
};

/// First/second moment estimates for one flat parameter block.
struct AdamMoments {
    std::vector<double> first;
    std::vector<double> second;

    explicit AdamMoments(std::size_t n = 0) : first(n, 0.0), second(n, 0.0) {}
    std::size_t size() const { return first.size(); }
    bool operator==(const AdamMoments &) const = default;
};

/// One bias-corrected Adam update. `step` is the number of updates already
/// applied to this block (0 for the first call).
template <class Param>
void adam_update(const AdamConfig &cfg, std::int64_t step, AdamMoments &moments,
                 std::span<Param> params, std::span<const double> grads) {
    if (params.size() != grads.size() || moments.size() != params.size())
        throw std::invalid_argument("adam_update: shape mismatch");
    const double lr = cfg.rate_at(step);
    const double t = double(step + 1);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double &m = moments.first[i];
        double &v = moments.second[i];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        if (m == 0.0)
            continue;
        const double update = lr * (m / c1) / (std::sqrt(v / c2) + cfg.epsilon);
        params[i] = Param(double(params[i]) - update);
    }
}

} // namespace rayvis
