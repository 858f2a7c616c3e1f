#pragma once

#include <cstdint>
#include <random>

namespace mcl {

// Seeded RNG with hand-rolled draw routines. std::uniform_*_distribution is
// implementation-defined, which would break byte-identical run outputs across
// standard libraries, so all draws go through the helpers below.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t raw() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // uniform over {0, ..., n-1}
    std::uint64_t uniform_index(std::uint64_t n) {
        // multiply-shift; bias is < 2^-64 per draw
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(engine_()) * n) >> 64);
    }

    // uniform over the integer lattice {lo, ..., hi}
    long long uniform_int(long long lo, long long hi) {
        return lo + static_cast<long long>(
                        uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // derive an independent stream; distinct salts give distinct streams
    Rng split(std::uint64_t salt) {
        std::uint64_t s = engine_() ^ (0x9e3779b97f4a7c15ULL * (salt + 1));
        return Rng(s);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace mcl
