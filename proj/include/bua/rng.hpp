#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "bua/common.hpp"

namespace bua {

namespace detail {

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
}

}  // namespace detail

// Counter-based splittable stream: derive(seed, label) is a pure function of
// its arguments, so substreams are order-independent and reproducible.
class RandomStream {
public:
    RandomStream() : state_(0) {}

    static RandomStream derive(std::uint64_t seed, std::string_view label) {
        RandomStream s;
        s.state_ = detail::mix64(detail::mix64(seed + 0x9e3779b97f4a7c15ull) ^ fnv1a64(label));
        return s;
    }

    RandomStream derive(std::string_view label) const {
        RandomStream s;
        s.state_ = detail::mix64(detail::mix64(state_) ^ fnv1a64(label));
        return s;
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return detail::mix64(state_);
    }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [lo, hi] inclusive
    int uniform_int(int lo, int hi) {
        require(hi >= lo, "uniform_int: empty range");
        auto span_sz = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span_sz);
    }

    // Box-Muller; consumes two uniforms per draw, no cached spare so copies of
    // a stream stay in lockstep.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Inverse-CDF draw from an explicit categorical distribution.
    int categorical(std::span<const double> probs) {
        require(!probs.empty(), "categorical: empty distribution");
        double total = 0.0;
        for (double p : probs) {
            require(p >= 0.0, "categorical: negative probability");
            total += p;
        }
        require(std::abs(total - 1.0) <= 1e-6, "categorical: distribution sums to ", total, ", not 1");
        double u = uniform();
        double cum = 0.0;
        for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
            cum += probs[i];
            if (u < cum) return static_cast<int>(i);
        }
        return static_cast<int>(probs.size() - 1);
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

constexpr std::uint64_t kDefaultSeed = 42;

}  // namespace bua
