#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tadlab {

// Counter-based RNG (splitmix64 core). std:: distributions are
// implementation-defined, so all sampling goes through this to keep
// every pipeline stage bit-reproducible for a given seed.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Stable 64-bit mix of independent seed components (seed, stream, index).
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0) {
    uint64_t s = a;
    (void)splitmix64(s);
    s ^= b + 0x9E3779B97F4A7C15ull;
    (void)splitmix64(s);
    s ^= c + 0xD1B54A32D192ED03ull;
    return splitmix64(s);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n), n > 0
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int range(int lo, int hi_inclusive) {
        return lo + int(below(uint64_t(hi_inclusive - lo + 1)));
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * stddev;
        }
        double u = 1.0 - uniform();  // (0, 1]
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 2.0 * 3.14159265358979323846 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return mean + r * std::cos(a) * stddev;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(below(uint64_t(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), in ascending order
    std::vector<size_t> sample_without_replacement(size_t n, size_t k);

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

struct IoError : std::runtime_error {
    enum class Kind { bad_magic, version_mismatch, truncated, crc_mismatch, unknown_site, bad_header };
    Kind kind;
    IoError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

bool contains(std::string_view haystack, std::string_view needle);
std::string replace_all(std::string_view text, std::string_view from, std::string_view to);
std::vector<std::string> split_ws(std::string_view text);
std::string trim(std::string_view text);

// FNV-1a over bytes; used to stamp reports with a config fingerprint.
uint64_t fnv1a(std::string_view bytes);
std::string hex64(uint64_t v);

}  // namespace tadlab
