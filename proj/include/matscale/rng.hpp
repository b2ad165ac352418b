// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace matscale {

// Deterministic random source. std::mt19937_64 output is fixed by the
// standard; the derived draws below avoid std::*_distribution, whose
// sequences are implementation-defined, so streams are reproducible
// across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double ang = 2.0 * M_PI * u2;
        spare_ = mag * std::sin(ang);
        has_spare_ = true;
        return mag * std::cos(ang);
    }

    // Uniform integer in [0, n) by rejection; unbiased.
    std::uint64_t bounded(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return x % n;
    }

    // Fisher-Yates over indices [0, n).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[bounded(i)]);
        }
    }

    std::string state() const {
        std::ostringstream os;
        os << gen_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << spare_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        is >> gen_ >> flag >> spare_;
        has_spare_ = flag != 0;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_{false};
    double spare_{0.0};
};

} // namespace matscale
