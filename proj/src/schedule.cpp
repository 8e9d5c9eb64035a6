#include "gi2i/schedule.hpp"

#include <cmath>

namespace gi2i {

NoiseSchedule::NoiseSchedule(std::vector<double> beta) : beta_(std::move(beta)) {
    if (beta_.empty()) throw ConfigError("schedule needs at least one step");
    gamma_.resize(beta_.size() + 1);
    gamma_[0] = 1.0;
    for (std::size_t t = 0; t < beta_.size(); ++t) {
        if (!(beta_[t] > 0.0 && beta_[t] < 1.0)) {
            throw ConfigError("beta out of (0,1) at step " + std::to_string(t + 1));
        }
        gamma_[t + 1] = gamma_[t] * (1.0 - beta_[t]);
    }
}

NoiseSchedule make_linear_schedule(double beta_start, double beta_end, int T) {
    if (T < 1) throw ConfigError("schedule steps must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ConfigError("require 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> beta(static_cast<std::size_t>(T));
    if (T == 1) {
        beta[0] = beta_start;
    } else {
        for (int t = 0; t < T; ++t) {
            beta[static_cast<std::size_t>(t)] =
                beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(T - 1);
        }
    }
    return NoiseSchedule(std::move(beta));
}

std::pair<int, double> sample_noise_level(const NoiseSchedule& schedule, RngState& rng) {
    const int t = rng.uniform_int(1, schedule.steps());
    return {t, schedule.gamma(t)};
}

Tensor forward_noise(const Tensor& y0, double gamma, const Tensor& eps) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InputError("gamma must lie in [0,1]");
    if (y0.shape() != eps.shape()) {
        throw DimensionError("forward_noise shape mismatch: " + shape_str(y0.shape()) + " vs " +
                             shape_str(eps.shape()));
    }
    const double a = std::sqrt(gamma);
    const double b = std::sqrt(1.0 - gamma);
    Tensor out(y0.shape());
    const std::int64_t n = y0.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = a * y0[i] + b * eps[i];
    return out;
}

}  // namespace gi2i
