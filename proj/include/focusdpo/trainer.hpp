#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "focusdpo/denoiser.hpp"
#include "focusdpo/dipgen.hpp"
#include "focusdpo/loss.hpp"
#include "focusdpo/masks.hpp"
#include "focusdpo/schedule.hpp"

namespace focusdpo {

enum class Optimizer { sgd, adam_style };

const char* to_string(Optimizer o);
Optimizer parse_optimizer(const std::string& name);

struct AdamConstants {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct TrainConfig {
    int steps = 500;
    int accumulate = 1;              // samples whose gradients are averaged per update
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    FusionConfig fusion;
    DpoConfig dpo;
    int schedule_T = 1000;
    Optimizer optimizer = Optimizer::adam_style;
    AdamConstants adam;
    int eval_every = 100;
    int eval_draws = 8;              // (t, eps) tuples per held-out pair
    std::uint64_t eval_seed = 1234;
    bool force_unit_mask = false;    // M = 1 everywhere: plain preference loss
    /// Masked noise-regression steps on the winning images before preference
    /// training (0 disables). Warm-starts the policy; the reference model is
    /// the warm-started snapshot.
    int mse_warmup_steps = 0;
    bool record_wallclock = true;
    DenoiserConfig model;

    void validate() const;
};

struct MetricsRecord {
    std::string phase;  // "train", "eval"
    int step = 0;
    double mean_loss = 0.0;
    double mean_margin = 0.0;
    double frac_margin_positive = 0.0;
    double mean_a_focus = 0.0;
    double branch_taken_ratio = 0.0;  // fraction of samples whose mask was M_s
    double masked_err_w_theta = 0.0;
    std::size_t samples = 0;
    std::size_t skipped = 0;
    double wallclock = 0.0;

    friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

nlohmann::json to_json(const MetricsRecord& r);
/// One line of compact JSON, no trailing newline.
std::string to_jsonl(const MetricsRecord& r);

struct TrainHooks {
    const dip::Dataset* eval_set = nullptr;  // evaluated every eval_every steps when set
    std::function<void(const MetricsRecord&)> on_record;
    std::function<void(int step, const DenoiserParams&)> on_checkpoint;
};

struct TrainResult {
    DenoiserParams model;
    DenoiserParams reference;
    std::vector<MetricsRecord> metrics;
    std::size_t skipped = 0;
};

/// One preference-loss evaluation of a pair at (t, eps), with the masks that
/// produced it.
struct PairEvaluation {
    LossBreakdown loss;
    WeightMask mask;
    double a_focus = 0.0;
    bool structure_branch = false;
};

/// Cache of per-pair complexity fields, keyed by pair id.
using ComplexityCache = std::unordered_map<std::uint64_t, WeightMask>;

/// Mask for one pair given the policy's attention trace on x_t^w.
/// Throws DataError when the pair's prior is empty.
FusedMask compute_mask(const dip::PreferenceQuadruplet& q, const AttentionTrace& trace, const TrainConfig& cfg,
                       ComplexityCache* cache, double* a_focus);

PairEvaluation evaluate_pair(const DenoiserParams& policy, const FrozenDenoiser& ref, const dip::PreferenceQuadruplet& q,
                             int t, const Tensor& eps, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                             ComplexityCache* cache = nullptr);

TrainResult train(const TrainConfig& cfg, const dip::Dataset& dataset, DenoiserParams model,
                  const TrainHooks& hooks = {});

/// Averages over fixed (pair, t, eps) tuples derived from cfg.eval_seed and
/// the pair id, so the same tuples are used before and after training.
MetricsRecord evaluate(const DenoiserParams& model, const FrozenDenoiser& ref, const dip::Dataset& dataset,
                       const TrainConfig& cfg);

struct ExperimentRow {
    std::string label;
    FusionConfig fusion;
    MetricsRecord train;  // last training window
    MetricsRecord eval;   // held-out, after training
};

/// Trains one model per fusion variant from the same initialization and seed
/// on the 90% split; evaluates each on the 10% split.
std::vector<ExperimentRow> run_ablations(const TrainConfig& cfg, const dip::Dataset& dataset);

/// One run per (tau, gamma) cell. The default (0.1, 0.3) is added to the
/// grid when absent.
std::vector<ExperimentRow> sweep(const TrainConfig& cfg, const dip::Dataset& dataset, std::vector<double> taus,
                                 std::vector<double> gammas);

/// Header plus one row per experiment.
std::string rows_to_csv(const std::vector<ExperimentRow>& rows);
nlohmann::json rows_to_json(const std::vector<ExperimentRow>& rows);

}  // namespace focusdpo
