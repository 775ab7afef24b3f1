#pragma once

#include "focusdpo/masks.hpp"
#include "focusdpo/schedule.hpp"
#include "focusdpo/tensor.hpp"

namespace focusdpo {

struct DpoConfig {
    double beta = 0.05;

    void validate() const;
};

/// Every scalar of one preference-loss evaluation.
struct LossBreakdown {
    double err_w_theta = 0.0;
    double err_w_ref = 0.0;
    double err_l_theta = 0.0;
    double err_l_ref = 0.0;
    double inside = 0.0;  // argument of log-sigmoid
    double loss = 0.0;    // -log sigmoid(inside)
    double margin = 0.0;  // implicit-reward margin, equal to inside

    friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

/// Targets and predictions for one winning/losing pair at a shared timestep.
struct PreferenceTerms {
    const Tensor& eps_w;
    const Tensor& eps_l;
    const Tensor& pred_w_theta;
    const Tensor& pred_l_theta;
    const Tensor& pred_w_ref;
    const Tensor& pred_l_ref;
};

/// beta * T * omega(lambda_t).
double dpo_coefficient(int t, const DiffusionSchedule& schedule, const DpoConfig& cfg);

/// -log sigmoid(x), stable for large |x|.
double neg_log_sigmoid(double x);

/// Unweighted preference loss with plain squared errors.
LossBreakdown diffusion_dpo_loss(const PreferenceTerms& terms, int t, const DiffusionSchedule& schedule,
                                 const DpoConfig& cfg);

/// Spatially weighted variant: every squared error is taken after multiplying
/// the residual by the token-grid mask, expanded to pixel resolution.
LossBreakdown focusdpo_loss(const PreferenceTerms& terms, const WeightMask& mask, int t,
                            const DiffusionSchedule& schedule, const DpoConfig& cfg);

struct LossGradients {
    Tensor pred_w_theta;
    Tensor pred_l_theta;
};

/// Cotangents of the loss with respect to the two policy predictions.
/// Reference predictions get no gradient.
LossGradients loss_backward(const LossBreakdown& breakdown, const PreferenceTerms& terms, const WeightMask& mask,
                            int t, const DiffusionSchedule& schedule, const DpoConfig& cfg);

/// Pixel-resolution mask for a token-grid mask over images shaped like `like`.
Tensor pixel_mask(const WeightMask& mask, const Tensor& like);

}  // namespace focusdpo
