#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace trls {

// splitmix64; used as the core generator and for deriving child seeds.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic RNG with hand-rolled distributions so that results do not
// depend on the standard library implementation. One instance per logical
// stream; fork() derives independent child streams without advancing the
// parent.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x6a09e667f3bcc909ULL) {
        // warm up so that small seeds diverge immediately
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // integer in [0, n), n > 0
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    // Derive a child stream keyed by up to three indices; parent unchanged.
    Rng fork(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
        uint64_t s = state_;
        s ^= 0x9e3779b97f4a7c15ULL * (a + 1);
        splitmix64(s);
        s ^= 0xbf58476d1ce4e5b9ULL * (b + 1);
        splitmix64(s);
        s ^= 0x94d049bb133111ebULL * (c + 1);
        splitmix64(s);
        return Rng(s);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace trls
