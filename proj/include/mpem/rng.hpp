#pragma once

#include <cstdint>
#include <random>

namespace mpem {

// splitmix64, used to derive stream seeds from (seed, salt) pairs so that
// independent components never share a stream.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    return splitmix64(seed ^ splitmix64(salt));
}

// Deterministic RNG wrapper. Bounded draws are implemented by hand because
// std::uniform_int_distribution is implementation-defined; output must be
// byte-identical across toolchains for the reproducibility contracts.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, n)
    uint64_t next_below(uint64_t n) {
        // rejection sampling on the top bits; unbiased
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return x % n;
    }

    // uniform integer in [lo, hi] inclusive
    int64_t next_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // uniform in [0, 1)
    double next_real() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // uniform in [lo, hi)
    double next_real(double lo, double hi) { return lo + (hi - lo) * next_real(); }

    bool next_bernoulli(double p) { return next_real() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace mpem
