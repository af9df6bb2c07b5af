#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace splitens {

// All sampling goes through these helpers instead of std distributions,
// whose output is implementation-defined. Byte-identical streams per seed
// are required for reproducible runs and regenerable datasets.
class Rng {
 public:
    explicit Rng(uint64_t seed = 0) : gen_(static_cast<std::mt19937_64::result_type>(seed)) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller; one value per call, spare cached.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection-free modulo is fine here; n is tiny relative to 2^64.
        return gen_() % n;
    }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string serialize() const {
        std::ostringstream os;
        os << gen_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << spare_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        is >> gen_ >> flag >> spare_;
        has_spare_ = flag != 0;
    }

 private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derive an independent stream from a base seed and stream tags.
inline uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
    uint64_t x = base + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

}  // namespace splitens
