#pragma once

#include <utility>
#include <vector>

#include "gi2i/rng.hpp"
#include "gi2i/tensor.hpp"

namespace gi2i {

// Diffusion timetable. beta/alpha are indexed by step t in [1, T]; gamma is
// the cumulative product with gamma(0) == 1. Immutable after construction.
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> beta);

    int steps() const { return static_cast<int>(beta_.size()); }
    double beta(int t) const { return beta_[static_cast<std::size_t>(t - 1)]; }
    double alpha(int t) const { return 1.0 - beta_[static_cast<std::size_t>(t - 1)]; }
    double gamma(int t) const { return gamma_[static_cast<std::size_t>(t)]; }  // t in [0, T]

private:
    std::vector<double> beta_;
    std::vector<double> gamma_;
};

// beta interpolated linearly from beta_start (t=1) to beta_end (t=T).
NoiseSchedule make_linear_schedule(double beta_start, double beta_end, int T);

// Draws t uniform on {1..T} and returns (t, gamma_t).
std::pair<int, double> sample_noise_level(const NoiseSchedule& schedule, RngState& rng);

// sqrt(gamma)*y0 + sqrt(1-gamma)*eps.
Tensor forward_noise(const Tensor& y0, double gamma, const Tensor& eps);

}  // namespace gi2i
