#include "focusdpo/gradcheck.hpp"

#include <cmath>

#include "focusdpo/error.hpp"
#include "focusdpo/kernels.hpp"
#include "focusdpo/rng.hpp"
#include "focusdpo/schedule.hpp"

namespace focusdpo {

DenoiserConfig GradcheckConfig::toy_model() {
    DenoiserConfig m;
    m.image_h = m.image_w = 16;
    m.ref_h = m.ref_w = 8;
    m.patch = 4;
    m.width = 16;
    m.layers = 2;
    m.ffn_hidden = 32;
    m.max_refs = 1;
    return m;
}

void GradcheckConfig::validate() const {
    model.validate();
    if (seeds < 1) throw ConfigError("gradcheck needs at least one seed");
    if (!(eps >= 1e-8 && eps <= 1e-3)) throw ConfigError("gradcheck eps must lie in [1e-8, 1e-3]");
    if (!(tolerance > 0.0)) throw ConfigError("gradcheck tolerance must be positive");
    if (!(ref_offset >= 0.0 && std::isfinite(ref_offset))) throw ConfigError("ref_offset must be finite and >= 0");
}

namespace {

std::string locate(const DenoiserParams& p, std::size_t flat) {
    std::size_t off = 0;
    for (const auto& [name, t] : p.named_tensors()) {
        if (flat < off + t->size()) return name + "[" + std::to_string(flat - off) + "]";
        off += t->size();
    }
    return "?";
}

dip::PreferenceQuadruplet random_instance(Rng& rng, const DenoiserConfig& m) {
    dip::PreferenceQuadruplet q;
    q.prompt_class = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(m.prompt_classes) - 1));
    q.x0_w = Tensor({m.image_h, m.image_w});
    q.x0_l = Tensor({m.image_h, m.image_w});
    q.x_r = Tensor({1, m.ref_h, m.ref_w});
    for (auto* x : {&q.x0_w, &q.x0_l, &q.x_r})
        for (std::size_t i = 0; i < x->size(); ++i) (*x)[i] = rng.uniform();
    q.m_prior = BinaryMask(m.grid_h(), m.grid_w());
    for (std::size_t i = 0; i < q.m_prior.size(); ++i) q.m_prior.set(i, rng.uniform() < 0.5);
    q.m_prior.set(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(q.m_prior.size()) - 1)), true);
    return q;
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck(const GradcheckConfig& cfg) {
    cfg.validate();
    TrainConfig tc;
    tc.model = cfg.model;
    tc.schedule_T = cfg.model.timesteps;
    const auto schedule = build_cosine_schedule(tc.schedule_T);

    std::vector<GradcheckCase> out;
    for (int k = 0; k < cfg.seeds; ++k) {
        GradcheckCase c;
        c.seed = cfg.first_seed + static_cast<std::uint64_t>(k);
        Rng rng = Rng::derive(c.seed, 0x9c);
        const auto q = random_instance(rng, cfg.model);
        c.t = rng.uniform_int(1, tc.schedule_T);
        const Tensor eps = rng.normal_tensor({cfg.model.image_h, cfg.model.image_w});

        const DenoiserParams base = DenoiserParams::initialize(cfg.model, c.seed);
        DenoiserParams ref_params = base;
        {
            Tensor theta = flatten(base);
            Rng nr = Rng::derive(c.seed, 0x9d);
            for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += cfg.ref_offset * nr.normal();
            unflatten(theta, ref_params);
        }
        const FrozenDenoiser ref = clone_frozen(ref_params);

        const Tensor xw = add_noise(q.x0_w, c.t, eps, schedule);
        const Tensor xl = add_noise(q.x0_l, c.t, eps, schedule);
        const ConditionBundle cond = q.condition(c.t);
        // Masks are held fixed at the base parameters; they are not differentiated.
        const auto trace = forward(base, xw, cond, true);
        const WeightMask mask = compute_mask(q, *trace.trace, tc, nullptr, nullptr).mask;
        const Tensor rw = ref.predict(xw, cond);
        const Tensor rl = ref.predict(xl, cond);

        const ScalarObjective f = [&](const Tensor& theta, Tensor* grad) {
            DenoiserParams p = base;
            unflatten(theta, p);
            const auto fw = forward(p, xw, cond, false);
            const auto fl = forward(p, xl, cond, false);
            const PreferenceTerms terms{eps, eps, fw.eps_hat, fl.eps_hat, rw, rl};
            const auto b = focusdpo_loss(terms, mask, c.t, schedule, tc.dpo);
            if (grad) {
                const auto g = loss_backward(b, terms, mask, c.t, schedule, tc.dpo);
                *grad = add(flatten(backward(p, fw.saved, g.pred_w_theta)),
                            flatten(backward(p, fl.saved, g.pred_l_theta)));
            }
            return b.loss;
        };
        const Tensor theta0 = flatten(base);
        c.loss = f(theta0, nullptr);
        const auto rep = grad_check_report(f, theta0, cfg.eps);
        c.max_rel_error = rep.max_rel_error;
        c.worst_parameter = locate(base, rep.worst_index);
        c.analytic = rep.worst_analytic;
        c.numeric = rep.worst_numeric;
        c.pass = rep.max_rel_error < cfg.tolerance;
        out.push_back(c);
    }
    return out;
}

}  // namespace focusdpo
