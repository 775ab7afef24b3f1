#include "focusdpo/rng.hpp"

#include <cmath>
#include <numbers>

#include "focusdpo/error.hpp"

namespace focusdpo {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

int Rng::uniform_int(int lo, int hi) {
    if (hi < lo) throw RangeError("uniform_int: empty range");
    const auto span = static_cast<unsigned __int128>(static_cast<std::uint64_t>(hi - lo) + 1);
    return lo + static_cast<int>((span * engine_()) >> 64);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

Tensor Rng::normal_tensor(Dims dims) {
    Tensor t(std::move(dims));
    for (auto& v : t.data()) v = normal();
    return t;
}

}  // namespace focusdpo
