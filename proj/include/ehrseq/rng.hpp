#pragma once

// Deterministic, serializable PRNG (xoshiro256** + splitmix64 seeding).
// std:: distributions are implementation-defined, so all variate generation
// is done by hand to keep runs bitwise reproducible across builds.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

namespace ehrseq {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
        has_spare_ = false;
        spare_ = 0.0;
    }

    /// Independent stream for (seed, index) pairs, e.g. per-record generation.
    static Rng derived(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t sm = seed;
        std::uint64_t a = splitmix64(sm);
        sm = stream ^ 0xA3EC647659359ACDULL;
        std::uint64_t b = splitmix64(sm);
        return Rng(a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2)));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in (0, 1]; safe as a log() argument.
    double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    /// Standard normal via Box-Muller with cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_pos();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // State is 4 words + the Box-Muller spare; 41 bytes serialized.
    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out(4 * 8 + 1 + 8);
        for (int i = 0; i < 4; ++i) std::memcpy(out.data() + 8 * i, &state_[i], 8);
        out[32] = has_spare_ ? 1 : 0;
        std::memcpy(out.data() + 33, &spare_, 8);
        return out;
    }

    bool deserialize(const std::vector<std::uint8_t>& bytes) {
        if (bytes.size() != 41) return false;
        for (int i = 0; i < 4; ++i) std::memcpy(&state_[i], bytes.data() + 8 * i, 8);
        has_spare_ = bytes[32] != 0;
        std::memcpy(&spare_, bytes.data() + 33, 8);
        return true;
    }

    bool operator==(const Rng& other) const {
        return state_ == other.state_ && has_spare_ == other.has_spare_ &&
               (!has_spare_ || spare_ == other.spare_);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ehrseq
