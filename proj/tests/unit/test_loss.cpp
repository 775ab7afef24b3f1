#include <catch_amalgamated.hpp>

#include <cmath>

#include "focusdpo/error.hpp"
#include "focusdpo/kernels.hpp"
#include "focusdpo/loss.hpp"
#include "focusdpo/schedule.hpp"
#include "oracles.hpp"

using namespace focusdpo;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

struct Instance {
    Tensor ew, el, pw, pl, rw, rl;
    PreferenceTerms terms() const { return {ew, el, pw, pl, rw, rl}; }
};

Instance random_instance(Rng& rng, Dims dims, double spread = 0.05) {
    Instance s;
    s.ew = rng.normal_tensor(dims);
    s.el = rng.normal_tensor(dims);
    s.rw = oracle::uniform_tensor(rng, dims);
    s.rl = oracle::uniform_tensor(rng, dims);
    s.pw = add(s.rw, scale(oracle::uniform_tensor(rng, dims), spread));
    s.pl = add(s.rl, scale(oracle::uniform_tensor(rng, dims), spread));
    return s;
}

WeightMask random_mask(Rng& rng, std::size_t rows, std::size_t cols, double hi = 1.0) {
    WeightMask m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(0.0, hi);
    return m;
}

const DiffusionSchedule& schedule() {
    static const DiffusionSchedule s = build_cosine_schedule(1000);
    return s;
}

}  // namespace

TEST_CASE("identical policy and reference give ln 2") {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        Instance s = random_instance(rng, {8, 8});
        s.pw = s.rw;
        s.pl = s.rl;
        const auto b = diffusion_dpo_loss(s.terms(), rng.uniform_int(1, 1000), schedule(), {});
        CHECK(b.inside == 0.0);
        CHECK_THAT(b.loss, WithinAbs(std::log(2.0), 1e-12));
        const auto m = focusdpo_loss(s.terms(), random_mask(rng, 2, 2), 17, schedule(), {});
        CHECK_THAT(m.loss, WithinAbs(std::log(2.0), 1e-12));
    }
}

TEST_CASE("unit mask reproduces the unweighted loss") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const Instance s = random_instance(rng, {8, 8});
        const int t = rng.uniform_int(1, 1000);
        const auto plain = diffusion_dpo_loss(s.terms(), t, schedule(), {});
        const auto ones = focusdpo_loss(s.terms(), WeightMask(4, 4, 1.0), t, schedule(), {});
        CHECK_THAT(ones.loss, WithinAbs(plain.loss, 1e-12));
        CHECK_THAT(ones.inside, WithinAbs(plain.inside, 1e-12));
        CHECK_THAT(ones.err_w_theta, WithinAbs(plain.err_w_theta, 1e-12));
        CHECK_THAT(ones.err_l_ref, WithinAbs(plain.err_l_ref, 1e-12));
    }
}

TEST_CASE("loss matches a term-by-term scalar recomputation") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Instance s = random_instance(rng, {4, 4});
        const WeightMask m = random_mask(rng, 2, 2);
        const int t = rng.uniform_int(1, 1000);
        const double coef = 0.05 * 1000.0;
        const auto b = focusdpo_loss(s.terms(), m, t, schedule(), {});
        const double expect = oracle::weighted_dpo_loss(s.ew, s.el, s.pw, s.pl, s.rw, s.rl, m.upsample(2), coef);
        CHECK_THAT(b.loss, WithinAbs(expect, 1e-10));
        CHECK_THAT(b.loss, WithinAbs(neg_log_sigmoid(b.inside), 1e-12));
        CHECK(b.margin == b.inside);
        CHECK(b.loss > 0.0);
    }
}

TEST_CASE("hand-set 2x2 instance") {
    const Tensor ew({2, 2}, {0.5, -1.0, 0.25, 2.0}), el({2, 2}, {1.0, 0.0, -0.5, 0.75});
    const Tensor pw({2, 2}, {0.45, -0.9, 0.3, 1.9}), pl({2, 2}, {0.8, 0.1, -0.4, 0.7});
    const Tensor rw({2, 2}, {0.4, -0.95, 0.2, 1.95}), rl({2, 2}, {0.9, 0.05, -0.45, 0.8});
    const WeightMask m(2, 2, std::vector<double>{1.0, 0.0, 0.0, 0.5});
    const auto b = focusdpo_loss({ew, el, pw, pl, rw, rl}, m, 500, schedule(), {});
    // Only pixels 0 (weight 1) and 3 (weight 0.5) count.
    const double ewt = 0.05 * 0.05 + (0.1 * 0.5) * (0.1 * 0.5);
    const double ewr = 0.1 * 0.1 + (0.05 * 0.5) * (0.05 * 0.5);
    const double elt = 0.2 * 0.2 + (0.05 * 0.5) * (0.05 * 0.5);
    const double elr = 0.1 * 0.1 + (0.05 * 0.5) * (0.05 * 0.5);
    CHECK_THAT(b.err_w_theta, WithinAbs(ewt, 1e-15));
    CHECK_THAT(b.err_w_ref, WithinAbs(ewr, 1e-15));
    CHECK_THAT(b.err_l_theta, WithinAbs(elt, 1e-15));
    CHECK_THAT(b.err_l_ref, WithinAbs(elr, 1e-15));
    const double inside = -50.0 * ((ewt - ewr) - (elt - elr));
    CHECK_THAT(b.inside, WithinAbs(inside, 1e-10));
    CHECK_THAT(b.loss, WithinAbs(std::log1p(std::exp(-inside)), 1e-10));
}

TEST_CASE("zero mask and quadratic mask scaling") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const Instance s = random_instance(rng, {8, 8});
        const auto zero = focusdpo_loss(s.terms(), WeightMask(4, 4, 0.0), 100, schedule(), {});
        CHECK(zero.inside == 0.0);
        CHECK_THAT(zero.loss, WithinAbs(std::log(2.0), 1e-15));

        const WeightMask half = random_mask(rng, 4, 4, 0.5);
        WeightMask twice = half;
        for (std::size_t i = 0; i < twice.size(); ++i) twice[i] = 2.0 * half[i];
        const auto a = focusdpo_loss(s.terms(), half, 100, schedule(), {});
        const auto b = focusdpo_loss(s.terms(), twice, 100, schedule(), {});
        CHECK_THAT(b.err_w_theta, WithinRel(4.0 * a.err_w_theta, 1e-12));
        CHECK_THAT(b.err_l_ref, WithinRel(4.0 * a.err_l_ref, 1e-12));
        CHECK_THAT(b.inside, WithinRel(4.0 * a.inside, 1e-9));
    }
}

TEST_CASE("loss moves in the preferred direction") {
    Rng rng(5);
    const Instance s = random_instance(rng, {4, 4});
    const auto base = diffusion_dpo_loss(s.terms(), 300, schedule(), {});
    // Pull the winning prediction toward its target: lower error, lower loss.
    Instance better = s;
    better.pw = add(s.pw, scale(sub(s.ew, s.pw), 0.1));
    CHECK(diffusion_dpo_loss(better.terms(), 300, schedule(), {}).loss < base.loss);
    // Pull the losing prediction toward its target: higher loss.
    Instance worse = s;
    worse.pl = add(s.pl, scale(sub(s.el, s.pl), 0.1));
    CHECK(diffusion_dpo_loss(worse.terms(), 300, schedule(), {}).loss > base.loss);
}

TEST_CASE("loss and gradients stay finite when saturated") {
    Rng rng(6);
    Instance s = random_instance(rng, {4, 4});
    s.pw = s.ew;  // perfect winner
    s.pl = scale(s.el, -3.0);
    const WeightMask m(2, 2, 1.0);
    const auto b = focusdpo_loss(s.terms(), m, 500, schedule(), {});
    CHECK(b.inside > 30.0);
    CHECK(std::isfinite(b.loss));
    CHECK(b.loss >= 0.0);
    const auto g = loss_backward(b, s.terms(), m, 500, schedule(), {});
    CHECK(max_abs(g.pred_w_theta) < 1e-6);
    CHECK(max_abs(g.pred_l_theta) < 1e-6);

    std::swap(s.pw, s.pl);
    const auto bad = focusdpo_loss(s.terms(), m, 500, schedule(), {});
    CHECK(bad.inside < -30.0);
    CHECK(std::isfinite(bad.loss));
    CHECK_THAT(bad.loss, WithinRel(-bad.inside, 1e-9));
}

TEST_CASE("loss_backward matches the closed form and finite differences") {
    Rng rng(7);
    const Instance s = random_instance(rng, {4, 4});
    const WeightMask m = random_mask(rng, 2, 2);
    const Tensor m2 = m.upsample(2);
    const int t = 640;
    const double coef = dpo_coefficient(t, schedule(), {});

    // Equal policy and reference: sigma(0) = 1/2 scales the gradient.
    Instance eq = s;
    eq.pw = eq.rw;
    eq.pl = eq.rl;
    const auto b0 = focusdpo_loss(eq.terms(), m, t, schedule(), {});
    const auto g0 = loss_backward(b0, eq.terms(), m, t, schedule(), {});
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK_THAT(g0.pred_w_theta[i], WithinAbs(0.5 * coef * 2.0 * (eq.pw[i] - eq.ew[i]) * m2[i] * m2[i], 1e-12));
        CHECK_THAT(g0.pred_l_theta[i], WithinAbs(-0.5 * coef * 2.0 * (eq.pl[i] - eq.el[i]) * m2[i] * m2[i], 1e-12));
    }

    Tensor theta({32});
    for (std::size_t i = 0; i < 16; ++i) {
        theta[i] = s.pw[i];
        theta[16 + i] = s.pl[i];
    }
    const ScalarObjective f = [&](const Tensor& th, Tensor* grad) {
        Tensor pw({4, 4}), pl({4, 4});
        for (std::size_t i = 0; i < 16; ++i) {
            pw[i] = th[i];
            pl[i] = th[16 + i];
        }
        const PreferenceTerms terms{s.ew, s.el, pw, pl, s.rw, s.rl};
        const auto b = focusdpo_loss(terms, m, t, schedule(), {});
        if (grad) {
            const auto g = loss_backward(b, terms, m, t, schedule(), {});
            for (std::size_t i = 0; i < 16; ++i) {
                (*grad)[i] = g.pred_w_theta[i];
                (*grad)[16 + i] = g.pred_l_theta[i];
            }
        }
        return b.loss;
    };
    CHECK(grad_check(f, theta, 1e-6) < 1e-5);
}

TEST_CASE("loss input validation") {
    Rng rng(8);
    const Instance s = random_instance(rng, {4, 4});
    const Tensor wrong({4, 5});
    CHECK_THROWS_AS(diffusion_dpo_loss({s.ew, s.el, wrong, s.pl, s.rw, s.rl}, 5, schedule(), {}), ShapeError);
    CHECK_THROWS_AS(focusdpo_loss(s.terms(), WeightMask(3, 3, 1.0), 5, schedule(), {}), ShapeError);
    DpoConfig bad;
    bad.beta = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    Instance inf = s;
    inf.pw[0] = 1e200;
    CHECK_THROWS_AS(diffusion_dpo_loss(inf.terms(), 5, schedule(), {}), NumericError);
}
