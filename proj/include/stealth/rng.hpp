#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "stealth/common.hpp"

namespace stealth {

// All randomness in the project flows through this wrapper. Gaussian samples
// use a hand-rolled Box-Muller so streams do not depend on the standard
// library's distribution internals.
class Rng {
   public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : engine_() % n; }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_gaussian(double* out, size_t n) {
        for (size_t i = 0; i < n; ++i) out[i] = gaussian();
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

   private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Derives independent sub-streams from one master seed. Stage names keep the
// streams decoupled: changing detector epochs must not shift corpus noise.
inline uint64_t derive_seed(uint64_t master, const std::string& purpose) {
    uint64_t h = fnv1a64(purpose);
    h ^= master + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h ? h : 1;
}
inline uint64_t derive_seed(uint64_t master, const std::string& purpose, uint64_t index) {
    return derive_seed(derive_seed(master, purpose), std::to_string(index));
}

}  // namespace stealth
