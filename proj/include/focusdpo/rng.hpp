#pragma once

#include <cstdint>
#include <random>

#include "focusdpo/tensor.hpp"

namespace focusdpo {

std::uint64_t splitmix64(std::uint64_t x);

/// Seeded generator. The uniform and normal transforms are written out here
/// rather than taken from <random> distributions so that streams are
/// identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    /// Independent sub-stream keyed by (seed, stream).
    static Rng derive(std::uint64_t seed, std::uint64_t stream) {
        return Rng(splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
    }

    std::uint64_t next_u64() { return engine_(); }
    /// [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Inclusive range.
    int uniform_int(int lo, int hi);
    double normal();
    Tensor normal_tensor(Dims dims);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace focusdpo
