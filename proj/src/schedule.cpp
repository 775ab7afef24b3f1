#include "focusdpo/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "focusdpo/denoiser.hpp"
#include "focusdpo/error.hpp"
#include "focusdpo/rng.hpp"

namespace focusdpo {

DiffusionSchedule::DiffusionSchedule(int timesteps, std::vector<double> alpha, std::vector<double> sigma,
                                     OmegaMode omega)
    : timesteps_(timesteps), alpha_(std::move(alpha)), sigma_(std::move(sigma)), omega_(omega) {
    if (timesteps_ < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(timesteps_));
    const auto n = static_cast<std::size_t>(timesteps_) + 1;
    if (alpha_.size() != n || sigma_.size() != n) throw ConfigError("schedule tables must have T+1 entries");
}

double DiffusionSchedule::alpha(int t) const {
    if (t < 0 || t > timesteps_) throw RangeError("timestep " + std::to_string(t) + " outside [0, T]");
    return alpha_[static_cast<std::size_t>(t)];
}

double DiffusionSchedule::sigma(int t) const {
    if (t < 0 || t > timesteps_) throw RangeError("timestep " + std::to_string(t) + " outside [0, T]");
    return sigma_[static_cast<std::size_t>(t)];
}

DiffusionSchedule build_cosine_schedule(int timesteps) {
    if (timesteps < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(timesteps));
    const auto n = static_cast<std::size_t>(timesteps) + 1;
    std::vector<double> alpha(n), sigma(n);
    alpha[0] = 1.0;
    sigma[0] = 0.0;
    const double lo = std::asin(DiffusionSchedule::kMinSigma);
    const double hi = std::acos(DiffusionSchedule::kMinSigma);
    for (std::size_t t = 1; t < n; ++t) {
        const double angle = static_cast<double>(t) / timesteps * (std::numbers::pi / 2.0);
        const double phi = std::clamp(angle, lo, hi);
        alpha[t] = std::cos(phi);
        sigma[t] = std::sin(phi);
    }
    return DiffusionSchedule(timesteps, std::move(alpha), std::move(sigma));
}

Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& s) {
    require_same_dims(x0, eps, "add_noise");
    if (t < 1 || t > s.timesteps()) throw RangeError("add_noise: timestep " + std::to_string(t) + " outside [1, T]");
    const double a = s.alpha(t), sg = s.sigma(t);
    Tensor out(x0.dims());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + sg * eps[i];
    return out;
}

SnrWeight snr_weight(int t, const DiffusionSchedule& s) {
    if (t < 1 || t > s.timesteps()) throw RangeError("snr_weight: timestep " + std::to_string(t) + " outside [1, T]");
    const double a = s.alpha(t), sg = s.sigma(t);
    double omega = 1.0;
    switch (s.omega_mode()) {
        case OmegaMode::constant_one: omega = 1.0; break;
    }
    return {(a * a) / (sg * sg), omega};
}

std::vector<int> ddim_timesteps(int timesteps, int steps) {
    if (steps < 1) throw ConfigError("ddim needs at least one step");
    steps = std::min(steps, timesteps);
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(steps) + 1);
    for (int k = steps; k >= 0; --k) {
        ts.push_back(static_cast<int>((static_cast<long long>(timesteps) * k) / steps));
    }
    return ts;
}

Tensor ddim_sample(const DenoiserParams& model, const ConditionBundle& cond, int steps, std::uint64_t seed,
                   const DiffusionSchedule& schedule) {
    const auto& cfg = model.config;
    Rng rng(seed);
    Tensor x = rng.normal_tensor({cfg.image_h, cfg.image_w});
    ConditionBundle c = cond;
    const auto ts = ddim_timesteps(schedule.timesteps(), steps);
    for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
        const int t = ts[k];
        const int prev = ts[k + 1];
        c.timestep = t;
        const Tensor eps_hat = denoise(model, x, c);
        const double a = schedule.alpha(t), s = schedule.sigma(t);
        const double ap = schedule.alpha(prev), sp = schedule.sigma(prev);
        Tensor next(x.dims());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double x0_hat = (x[i] - s * eps_hat[i]) / a;
            next[i] = ap * x0_hat + sp * eps_hat[i];
        }
        if (!next.all_finite()) {
            throw NumericError("ddim_sample: non-finite state at step " + std::to_string(k) + " (t=" +
                               std::to_string(t) + ")");
        }
        x = std::move(next);
    }
    return x;
}

}  // namespace focusdpo
