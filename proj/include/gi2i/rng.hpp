#pragma once

#include <cstdint>
#include <random>

namespace gi2i {

// splitmix64; used to derive independent child seeds from a master seed so
// that per-well / per-sample streams do not depend on scheduling order.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class RngState {
public:
    explicit RngState(std::uint64_t seed = 0) : engine_(mix(seed)) {}

    // Counter-based splitting: child streams are a pure function of
    // (seed, counter), independent of draw order on the parent.
    static RngState derive(std::uint64_t seed, std::uint64_t counter) {
        std::uint64_t s = seed;
        std::uint64_t a = splitmix64(s);
        s = a ^ (counter * 0xd2b74407b1ce6e93ULL + 0x1ULL);
        return RngState(splitmix64(s));
    }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }

    // Uniform integer in [lo, hi], inclusive.
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(engine_);
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::mt19937_64& engine() { return engine_; }

private:
    static std::uint64_t mix(std::uint64_t seed) {
        std::uint64_t s = seed;
        return splitmix64(s);
    }

    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace gi2i
