#include "focusdpo/loss.hpp"

#include <cmath>

#include "focusdpo/error.hpp"
#include "focusdpo/kernels.hpp"

namespace focusdpo {

void DpoConfig::validate() const {
    if (!(std::isfinite(beta) && beta > 0.0)) throw ConfigError("beta must be finite and positive");
}

double dpo_coefficient(int t, const DiffusionSchedule& schedule, const DpoConfig& cfg) {
    return cfg.beta * static_cast<double>(schedule.timesteps()) * snr_weight(t, schedule).omega;
}

double neg_log_sigmoid(double x) {
    // softplus(-x)
    if (x < 0.0) return -x + std::log1p(std::exp(x));
    return std::log1p(std::exp(-x));
}

namespace {

void check_terms(const PreferenceTerms& p) {
    require_same_dims(p.eps_w, p.eps_l, "preference terms");
    require_same_dims(p.eps_w, p.pred_w_theta, "preference terms");
    require_same_dims(p.eps_w, p.pred_l_theta, "preference terms");
    require_same_dims(p.eps_w, p.pred_w_ref, "preference terms");
    require_same_dims(p.eps_w, p.pred_l_ref, "preference terms");
}

/// sum m^2 [(eps - a)^2 - (eps - b)^2] = sum m^2 (b - a)(2 eps - a - b), which
/// stays accurate when the policy and reference predictions are close.
double error_gap(const Tensor& eps, const Tensor& a, const Tensor& b, const Tensor* m) {
    double s = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double w = m ? (*m)[i] * (*m)[i] : 1.0;
        s += w * ((b[i] - a[i]) * ((eps[i] - a[i]) + (eps[i] - b[i])));
    }
    return s;
}

LossBreakdown finish(LossBreakdown b, const PreferenceTerms& p, const Tensor* m, double coef) {
    const double gap_w = error_gap(p.eps_w, p.pred_w_theta, p.pred_w_ref, m);
    const double gap_l = error_gap(p.eps_l, p.pred_l_theta, p.pred_l_ref, m);
    // + 0.0 turns a -0.0 into +0.0 when theta == ref.
    b.inside = -coef * (gap_w - gap_l) + 0.0;
    if (!std::isfinite(b.inside)) throw NumericError("preference loss: non-finite log-sigmoid argument");
    b.loss = neg_log_sigmoid(b.inside);
    b.margin = b.inside;
    return b;
}

}  // namespace

LossBreakdown diffusion_dpo_loss(const PreferenceTerms& p, int t, const DiffusionSchedule& schedule,
                                 const DpoConfig& cfg) {
    check_terms(p);
    LossBreakdown b;
    b.err_w_theta = sq_norm(sub(p.eps_w, p.pred_w_theta));
    b.err_w_ref = sq_norm(sub(p.eps_w, p.pred_w_ref));
    b.err_l_theta = sq_norm(sub(p.eps_l, p.pred_l_theta));
    b.err_l_ref = sq_norm(sub(p.eps_l, p.pred_l_ref));
    return finish(b, p, nullptr, dpo_coefficient(t, schedule, cfg));
}

Tensor pixel_mask(const WeightMask& mask, const Tensor& like) {
    if (like.rank() != 2) throw ShapeError("preference loss expects [H x W] predictions");
    if (mask.rows() == 0 || like.dim(0) % mask.rows() || like.dim(1) % mask.cols() ||
        like.dim(0) / mask.rows() != like.dim(1) / mask.cols()) {
        throw ShapeError("mask grid " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         " does not tile image " + dims_to_string(like.dims()));
    }
    return mask.upsample(like.dim(0) / mask.rows());
}

LossBreakdown focusdpo_loss(const PreferenceTerms& p, const WeightMask& mask, int t,
                            const DiffusionSchedule& schedule, const DpoConfig& cfg) {
    check_terms(p);
    const Tensor m = pixel_mask(mask, p.eps_w);
    LossBreakdown b;
    b.err_w_theta = masked_sq_norm(sub(p.eps_w, p.pred_w_theta), m);
    b.err_w_ref = masked_sq_norm(sub(p.eps_w, p.pred_w_ref), m);
    b.err_l_theta = masked_sq_norm(sub(p.eps_l, p.pred_l_theta), m);
    b.err_l_ref = masked_sq_norm(sub(p.eps_l, p.pred_l_ref), m);
    return finish(b, p, &m, dpo_coefficient(t, schedule, cfg));
}

LossGradients loss_backward(const LossBreakdown& b, const PreferenceTerms& p, const WeightMask& mask, int t,
                            const DiffusionSchedule& schedule, const DpoConfig& cfg) {
    check_terms(p);
    const Tensor m = pixel_mask(mask, p.eps_w);
    const double coef = dpo_coefficient(t, schedule, cfg);
    // dloss/dinside = -sigmoid(-inside); dinside/derr_w = -coef, dinside/derr_l = +coef.
    const double x = b.inside;
    const double sig_neg = x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
    const double d_inside = -sig_neg;
    const double g_err_w = d_inside * -coef;
    const double g_err_l = d_inside * coef;
    // err = |(eps - pred) m|^2, so derr/dpred = -2 (eps - pred) m^2.
    return {masked_sq_norm_backward(sub(p.pred_w_theta, p.eps_w), m, g_err_w),
            masked_sq_norm_backward(sub(p.pred_l_theta, p.eps_l), m, g_err_l)};
}

}  // namespace focusdpo
