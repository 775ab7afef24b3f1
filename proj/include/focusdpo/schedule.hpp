#pragma once

#include <cstdint>
#include <vector>

#include "focusdpo/tensor.hpp"

namespace focusdpo {

enum class OmegaMode { constant_one };

/// Variance-preserving forward process: x_t = alpha_t x_0 + sigma_t eps with
/// alpha_t^2 + sigma_t^2 = 1. Tables are indexed by t in [0, T].
class DiffusionSchedule {
public:
    static constexpr double kMinSigma = 1e-4;

    DiffusionSchedule(int timesteps, std::vector<double> alpha, std::vector<double> sigma,
                      OmegaMode omega = OmegaMode::constant_one);

    int timesteps() const noexcept { return timesteps_; }
    double alpha(int t) const;
    double sigma(int t) const;
    OmegaMode omega_mode() const noexcept { return omega_; }

private:
    int timesteps_;
    std::vector<double> alpha_;
    std::vector<double> sigma_;
    OmegaMode omega_;
};

/// alpha_t = cos(t/T * pi/2). For t >= 1 the angle is clamped so that both
/// sigma_t and alpha_t stay >= 1e-4; t = 0 is exactly (1, 0).
DiffusionSchedule build_cosine_schedule(int timesteps);

/// alpha_t x0 + sigma_t eps, for 1 <= t <= T.
Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& s);

struct SnrWeight {
    double lambda;
    double omega;
};

/// lambda_t = alpha_t^2 / sigma_t^2 and the loss weight omega(lambda_t).
SnrWeight snr_weight(int t, const DiffusionSchedule& s);

struct DenoiserParams;
struct ConditionBundle;

/// Deterministic (eta = 0) DDIM from seeded Gaussian x_T down to t = 0 over
/// `steps` evenly spaced timesteps. Returns the final x_0 estimate.
Tensor ddim_sample(const DenoiserParams& model, const ConditionBundle& cond, int steps, std::uint64_t seed,
                   const DiffusionSchedule& schedule);

/// The timestep sequence ddim_sample visits, starting at T and ending at 0.
std::vector<int> ddim_timesteps(int timesteps, int steps);

}  // namespace focusdpo
