#include "focusdpo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cmath>
#include <nlohmann/json.hpp>

#include "focusdpo/error.hpp"
#include "focusdpo/kernels.hpp"
#include "focusdpo/log.hpp"
#include "focusdpo/rng.hpp"

namespace focusdpo {

using nlohmann::json;

const char* to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam_style"; }

Optimizer parse_optimizer(const std::string& name) {
    if (name == "sgd") return Optimizer::sgd;
    if (name == "adam_style") return Optimizer::adam_style;
    throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam_style)");
}

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (accumulate < 1) throw ConfigError("accumulate must be >= 1");
    if (!(learning_rate > 0.0 && std::isfinite(learning_rate))) throw ConfigError("learning_rate must be > 0");
    if (schedule_T < 2) throw ConfigError("schedule_T must be >= 2");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (eval_draws < 1) throw ConfigError("eval_draws must be >= 1");
    if (mse_warmup_steps < 0) throw ConfigError("mse_warmup_steps must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.epsilon > 0.0)) {
        throw ConfigError("adam constants must satisfy 0 <= beta < 1 and epsilon > 0");
    }
    if (model.timesteps != schedule_T) throw ConfigError("model timesteps must equal schedule_T");
    fusion.validate();
    dpo.validate();
    model.validate();
}

json to_json(const MetricsRecord& r) {
    return {{"phase", r.phase},
            {"step", r.step},
            {"mean_loss", r.mean_loss},
            {"mean_margin", r.mean_margin},
            {"frac_margin_positive", r.frac_margin_positive},
            {"mean_A_focus", r.mean_a_focus},
            {"branch_taken_ratio", r.branch_taken_ratio},
            {"masked_err_w_theta", r.masked_err_w_theta},
            {"samples", r.samples},
            {"skipped", r.skipped},
            {"wallclock", r.wallclock}};
}

std::string to_jsonl(const MetricsRecord& r) { return to_json(r).dump(); }

namespace {

class Accumulator {
public:
    void add(const PairEvaluation& e) {
        ++n_;
        loss_ += e.loss.loss;
        margin_ += e.loss.margin;
        positive_ += e.loss.margin > 0.0 ? 1.0 : 0.0;
        a_focus_ += e.a_focus;
        branch_ += e.structure_branch ? 1.0 : 0.0;
        err_w_ += e.loss.err_w_theta;
    }
    void skip() { ++skipped_; }

    MetricsRecord finish(std::string phase, int step, double wallclock) const {
        MetricsRecord r;
        r.phase = std::move(phase);
        r.step = step;
        r.samples = n_;
        r.skipped = skipped_;
        r.wallclock = wallclock;
        if (n_ == 0) return r;
        const double n = static_cast<double>(n_);
        r.mean_loss = loss_ / n;
        r.mean_margin = margin_ / n;
        r.frac_margin_positive = positive_ / n;
        r.mean_a_focus = a_focus_ / n;
        r.branch_taken_ratio = branch_ / n;
        r.masked_err_w_theta = err_w_ / n;
        return r;
    }

private:
    std::size_t n_ = 0, skipped_ = 0;
    double loss_ = 0, margin_ = 0, positive_ = 0, a_focus_ = 0, branch_ = 0, err_w_ = 0;
};

void check_compatible(const dip::PreferenceQuadruplet& q, const DenoiserConfig& c) {
    if (q.x0_w.rank() != 2 || q.x0_w.dim(0) != c.image_h || q.x0_w.dim(1) != c.image_w) {
        throw ShapeError("pair " + std::to_string(q.id) + ": image " + dims_to_string(q.x0_w.dims()) +
                         " does not match the model's " + std::to_string(c.image_h) + "x" + std::to_string(c.image_w));
    }
    if (q.reference_count() > c.max_refs || q.x_r.dim(1) != c.ref_h || q.x_r.dim(2) != c.ref_w) {
        throw ShapeError("pair " + std::to_string(q.id) + ": references " + dims_to_string(q.x_r.dims()) +
                         " do not match the model");
    }
}

/// Everything one preference step needs, including the policy activations.
struct StepTerms {
    Tensor eps;
    ForwardPass fw, fl;
    Tensor ref_w, ref_l;
    PairEvaluation eval;
};

StepTerms step_terms(const DenoiserParams& policy, const FrozenDenoiser& ref, const dip::PreferenceQuadruplet& q,
                     int t, const Tensor& eps, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                     ComplexityCache* cache) {
    StepTerms s;
    s.eps = eps;
    const Tensor xw = add_noise(q.x0_w, t, eps, schedule);
    const Tensor xl = add_noise(q.x0_l, t, eps, schedule);
    const ConditionBundle cond = q.condition(t);
    s.fw = forward(policy, xw, cond, true);
    const FusedMask fused = compute_mask(q, *s.fw.trace, cfg, cache, &s.eval.a_focus);
    s.eval.mask = fused.mask;
    s.eval.structure_branch = fused.structure_branch;
    s.fl = forward(policy, xl, cond, false);
    s.ref_w = ref.predict(xw, cond);
    s.ref_l = ref.predict(xl, cond);
    const PreferenceTerms terms{eps, eps, s.fw.eps_hat, s.fl.eps_hat, s.ref_w, s.ref_l};
    s.eval.loss = focusdpo_loss(terms, s.eval.mask, t, schedule, cfg.dpo);
    return s;
}

class OptimizerState {
public:
    OptimizerState(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_({n}), v_({n}) {}

    void apply(DenoiserParams& params, const Tensor& grad) {
        Tensor theta = flatten(params);
        ++k_;
        const double lr = cfg_.learning_rate;
        if (cfg_.optimizer == Optimizer::sgd) {
            for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
        } else {
            const auto& a = cfg_.adam;
            const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(k_));
            const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(k_));
            for (std::size_t i = 0; i < theta.size(); ++i) {
                m_[i] = a.beta1 * m_[i] + (1.0 - a.beta1) * grad[i];
                v_[i] = a.beta2 * v_[i] + (1.0 - a.beta2) * grad[i] * grad[i];
                theta[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + a.epsilon);
            }
        }
        unflatten(theta, params);
    }

private:
    const TrainConfig& cfg_;
    Tensor m_, v_;
    long k_ = 0;
};

/// Masked noise regression on the winning images.
void mse_warmup(const TrainConfig& cfg, const dip::Dataset& dataset, DenoiserParams& model,
                const DiffusionSchedule& schedule) {
    Rng rng = Rng::derive(cfg.seed, 2);
    OptimizerState opt(cfg, model.parameter_count());
    const Dims image{model.config.image_h, model.config.image_w};
    for (int s = 0; s < cfg.mse_warmup_steps; ++s) {
        const auto& q = dataset[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(dataset.size()) - 1))];
        const int t = static_cast<int>(rng.uniform_int(1, cfg.schedule_T));
        const Tensor eps = rng.normal_tensor(image);
        const ForwardPass f = forward(model, add_noise(q.x0_w, t, eps, schedule), q.condition(t), false);
        const Tensor support = dip::prior_pixel_support(q);
        const double area = std::max(1.0, sum(support));
        const Tensor g = masked_sq_norm_backward(sub(f.eps_hat, eps), support, 1.0 / area);
        opt.apply(model, flatten(backward(model, f.saved, g)));
    }
}

double seconds_since(std::chrono::steady_clock::time_point start, bool record) {
    if (!record) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

FusedMask compute_mask(const dip::PreferenceQuadruplet& q, const AttentionTrace& trace, const TrainConfig& cfg,
                       ComplexityCache* cache, double* a_focus) {
    if (q.m_prior.count() == 0) throw DataError("pair " + std::to_string(q.id) + " has an empty prior mask");
    const StructureField sf = structure_field(trace, q.m_prior, q.ref_token_counts(cfg.model.patch));
    if (a_focus) *a_focus = sf.a_focus;
    if (cfg.force_unit_mask) return {WeightMask(q.m_prior.rows(), q.m_prior.cols(), 1.0), false};
    WeightMask md;
    if (cache) {
        auto it = cache->find(q.id);
        if (it == cache->end())
            it = cache->emplace(q.id, complexity_field(q.x0_w, cfg.model.patch, cfg.fusion.entropy_bins)).first;
        md = it->second;
    } else {
        md = complexity_field(q.x0_w, cfg.model.patch, cfg.fusion.entropy_bins);
    }
    return fuse(sf.structure, md, q.m_prior, sf.a_focus, cfg.fusion);
}

PairEvaluation evaluate_pair(const DenoiserParams& policy, const FrozenDenoiser& ref, const dip::PreferenceQuadruplet& q,
                             int t, const Tensor& eps, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                             ComplexityCache* cache) {
    check_compatible(q, policy.config);
    return step_terms(policy, ref, q, t, eps, schedule, cfg, cache).eval;
}

MetricsRecord evaluate(const DenoiserParams& model, const FrozenDenoiser& ref, const dip::Dataset& dataset,
                       const TrainConfig& cfg) {
    if (dataset.empty()) throw ConfigError("evaluation split is empty");
    const DiffusionSchedule schedule = build_cosine_schedule(cfg.schedule_T);
    const Dims image{model.config.image_h, model.config.image_w};
    ComplexityCache cache;
    Accumulator acc;
    for (const auto& q : dataset) {
        check_compatible(q, model.config);
        for (int d = 0; d < cfg.eval_draws; ++d) {
            if (q.m_prior.count() == 0) {
                acc.skip();
                continue;
            }
            Rng rng = Rng::derive(cfg.eval_seed ^ splitmix64(q.id), static_cast<std::uint64_t>(d));
            const int t = static_cast<int>(rng.uniform_int(1, cfg.schedule_T));
            const Tensor eps = rng.normal_tensor(image);
            acc.add(step_terms(model, ref, q, t, eps, schedule, cfg, &cache).eval);
        }
    }
    return acc.finish("eval", 0, 0.0);
}

TrainResult train(const TrainConfig& cfg, const dip::Dataset& dataset, DenoiserParams model, const TrainHooks& hooks) {
    cfg.validate();
    if (dataset.empty()) throw DataError("training dataset is empty");
    if (!model.all_finite()) throw NumericError("initial model has non-finite parameters");
    if (!(model.config == cfg.model)) throw ConfigError("model configuration does not match the training config");
    for (const auto& q : dataset) check_compatible(q, model.config);

    const auto start = std::chrono::steady_clock::now();
    const DiffusionSchedule schedule = build_cosine_schedule(cfg.schedule_T);
    if (cfg.mse_warmup_steps > 0) mse_warmup(cfg, dataset, model, schedule);

    TrainResult result;
    const FrozenDenoiser ref = clone_frozen(model);
    result.reference = ref.params();

    auto emit = [&](const MetricsRecord& r) {
        result.metrics.push_back(r);
        if (hooks.on_record) hooks.on_record(r);
    };
    auto run_eval = [&](int step) {
        if (!hooks.eval_set) return;
        MetricsRecord r = evaluate(model, ref, *hooks.eval_set, cfg);
        r.step = step;
        r.wallclock = seconds_since(start, cfg.record_wallclock);
        emit(r);
    };
    run_eval(0);

    Rng rng = Rng::derive(cfg.seed, 1);
    OptimizerState opt(cfg, model.parameter_count());
    ComplexityCache cache;
    Accumulator window;
    const Dims image{model.config.image_h, model.config.image_w};
    const auto last = static_cast<int>(dataset.size()) - 1;

    for (int step = 1; step <= cfg.steps; ++step) {
        Tensor grad;
        int used = 0;
        for (int k = 0; k < cfg.accumulate; ++k) {
            const auto& q = dataset[static_cast<std::size_t>(rng.uniform_int(0, last))];
            const int t = rng.uniform_int(1, cfg.schedule_T);
            const Tensor eps = rng.normal_tensor(image);
            if (q.m_prior.count() == 0) {
                window.skip();
                ++result.skipped;
                continue;
            }
            StepTerms s;
            try {
                s = step_terms(model, ref, q, t, eps, schedule, cfg, &cache);
            } catch (const NumericError& e) {
                throw NumericError("step " + std::to_string(step) + " (pair " + std::to_string(q.id) +
                                   ", t=" + std::to_string(t) + "): " + e.what());
            }
            const PreferenceTerms terms{s.eps, s.eps, s.fw.eps_hat, s.fl.eps_hat, s.ref_w, s.ref_l};
            const LossGradients g = loss_backward(s.eval.loss, terms, s.eval.mask, t, schedule, cfg.dpo);
            const Tensor sample = add(flatten(backward(model, s.fw.saved, g.pred_w_theta)),
                                      flatten(backward(model, s.fl.saved, g.pred_l_theta)));
            grad = used == 0 ? sample : add(grad, sample);
            ++used;
            window.add(s.eval);
        }
        if (used > 0) {
            opt.apply(model, used == 1 ? grad : scale(grad, 1.0 / used));
            if (!model.all_finite()) {
                throw NumericError("step " + std::to_string(step) + ": parameters became non-finite");
            }
        }
        if (step % cfg.eval_every == 0 || step == cfg.steps) {
            emit(window.finish("train", step, seconds_since(start, cfg.record_wallclock)));
            window = Accumulator{};
            run_eval(step);
            if (hooks.on_checkpoint) hooks.on_checkpoint(step, model);
        }
    }
    result.model = std::move(model);
    return result;
}

namespace {

ExperimentRow run_experiment(const TrainConfig& cfg, const dip::DatasetSplit& split, const DenoiserParams& init,
                             std::string label) {
    TrainResult r = train(cfg, split.train, init);
    ExperimentRow row;
    row.label = std::move(label);
    row.fusion = cfg.fusion;
    for (auto it = r.metrics.rbegin(); it != r.metrics.rend(); ++it) {
        if (it->phase == "train") {
            row.train = *it;
            break;
        }
    }
    row.eval = evaluate(r.model, clone_frozen(r.reference), split.heldout, cfg);
    row.eval.step = cfg.steps;
    return row;
}

dip::DatasetSplit checked_split(const dip::Dataset& dataset) {
    dip::DatasetSplit split = dip::split_dataset(dataset);
    if (split.train.empty() || split.heldout.empty()) throw ConfigError("dataset too small for a 90/10 split");
    return split;
}

}  // namespace

std::vector<ExperimentRow> run_ablations(const TrainConfig& cfg, const dip::Dataset& dataset) {
    cfg.validate();
    const dip::DatasetSplit split = checked_split(dataset);
    const DenoiserParams init = DenoiserParams::initialize(cfg.model, cfg.seed);
    std::vector<ExperimentRow> rows;
    for (FusionVariant v : all_variants()) {
        TrainConfig c = cfg;
        c.fusion.variant = v;
        log::info(std::string("ablation: ") + to_string(v));
        rows.push_back(run_experiment(c, split, init, to_string(v)));
    }
    return rows;
}

namespace {

/// Shortest text that parses back to the same double.
std::string shortest(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

std::vector<ExperimentRow> sweep(const TrainConfig& cfg, const dip::Dataset& dataset, std::vector<double> taus,
                                 std::vector<double> gammas) {
    cfg.validate();
    if (taus.empty() || gammas.empty()) throw ConfigError("sweep grids must be nonempty");
    const FusionConfig defaults;
    if (std::find(taus.begin(), taus.end(), defaults.tau) == taus.end()) taus.push_back(defaults.tau);
    if (std::find(gammas.begin(), gammas.end(), defaults.gamma) == gammas.end()) gammas.push_back(defaults.gamma);
    std::sort(taus.begin(), taus.end());
    std::sort(gammas.begin(), gammas.end());
    taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
    gammas.erase(std::unique(gammas.begin(), gammas.end()), gammas.end());

    const dip::DatasetSplit split = checked_split(dataset);
    const DenoiserParams init = DenoiserParams::initialize(cfg.model, cfg.seed);
    std::vector<ExperimentRow> rows;
    for (double tau : taus) {
        for (double gamma : gammas) {
            TrainConfig c = cfg;
            c.fusion.tau = tau;
            c.fusion.gamma = gamma;
            c.fusion.validate();
            const std::string label = "tau=" + shortest(tau) + ",gamma=" + shortest(gamma);
            log::info("sweep: " + label);
            rows.push_back(run_experiment(c, split, init, label));
        }
    }
    return rows;
}

std::string rows_to_csv(const std::vector<ExperimentRow>& rows) {
    std::string out =
        "label,variant,tau,gamma,train_mean_loss,train_mean_margin,eval_mean_loss,eval_mean_margin,"
        "eval_frac_margin_positive,eval_mean_A_focus,eval_branch_taken_ratio,eval_masked_err_w_theta\n";
    for (const auto& r : rows) {
        out += '"' + r.label + "\"," + to_string(r.fusion.variant);
        for (double v : {r.fusion.tau, r.fusion.gamma, r.train.mean_loss, r.train.mean_margin, r.eval.mean_loss,
                         r.eval.mean_margin, r.eval.frac_margin_positive, r.eval.mean_a_focus,
                         r.eval.branch_taken_ratio, r.eval.masked_err_w_theta}) {
            out += ',' + shortest(v);
        }
        out += '\n';
    }
    return out;
}

json rows_to_json(const std::vector<ExperimentRow>& rows) {
    json out = json::array();
    for (const auto& r : rows) {
        out.push_back({{"label", r.label},
                       {"variant", to_string(r.fusion.variant)},
                       {"tau", r.fusion.tau},
                       {"gamma", r.fusion.gamma},
                       {"train", to_json(r.train)},
                       {"eval", to_json(r.eval)}});
    }
    return out;
}

}  // namespace focusdpo
