// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "focusdpo/dipgen.hpp"
#include "focusdpo/gradcheck.hpp"
#include "focusdpo/log.hpp"
#include "focusdpo/loss.hpp"
#include "focusdpo/masks.hpp"
#include "focusdpo/trainer.hpp"
#include "oracles.hpp"

using namespace focusdpo;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("focusdpo_acceptance_" + name);
    fs::remove_all(p);
    return p;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        out[fs::relative(e.path(), root).string()] = ss.str();
    }
    return out;
}

AttentionTrace random_trace(Rng& rng, std::size_t layers, std::size_t pt, std::size_t refs, std::size_t pr,
                            std::size_t d) {
    AttentionTrace tr;
    tr.references.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        tr.target.push_back(rng.normal_tensor({pt, d}));
        for (std::size_t r = 0; r < refs; ++r) tr.references[l].push_back(rng.normal_tensor({pr, d}));
    }
    return tr;
}

// Half the instances use random token states, half use the denoiser's own
// trace on noised winning images.
Verdict mask_algebra() {
    const int instances = 1000;
    dip::DipConfig dcfg;
    dcfg.single_pairs = 25;
    dcfg.multi_pairs = 25;
    const dip::Dataset data = dip::generate_corpus(dcfg, 101);
    const DenoiserConfig mcfg;
    const DenoiserParams model = DenoiserParams::initialize(mcfg, 101);
    const DiffusionSchedule schedule = build_cosine_schedule(mcfg.timesteps);
    const std::size_t grid = mcfg.grid_h();

    Rng rng(2024);
    int violations = 0, forced_branches = 0;
    auto violate = [&](bool ok) { violations += ok ? 0 : 1; };
    for (int i = 0; i < instances; ++i) {
        AttentionTrace trace;
        BinaryMask prior;
        std::vector<std::size_t> k;
        if (i % 2 == 0) {
            const std::size_t refs = static_cast<std::size_t>(rng.uniform_int(1, 3));
            trace = random_trace(rng, 2, grid * grid, refs, 16, mcfg.width);
            prior = BinaryMask(grid, grid);
            for (std::size_t j = 0; j < prior.size(); ++j) prior.set(j, rng.uniform() < 0.3);
            prior.set(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(prior.size()) - 1)), true);
            for (std::size_t r = 0; r < refs; ++r) k.push_back(static_cast<std::size_t>(rng.uniform_int(1, 32)));
        } else {
            const auto& q = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.size()) - 1))];
            const int t = rng.uniform_int(1, mcfg.timesteps);
            const Tensor xt = add_noise(q.x0_w, t, rng.normal_tensor({mcfg.image_h, mcfg.image_w}), schedule);
            trace = *forward(model, xt, q.condition(t), true).trace;
            prior = q.m_prior;
            k = q.ref_token_counts(mcfg.patch);
        }

        std::size_t max_k = 0, sum_k = 0;
        for (std::size_t r = 0; r < k.size(); ++r) {
            const Tensor s = correspondence_scores(trace, r);
            violate(topk_mask(s, k[r], grid, grid).count() == k[r]);
            max_k = std::max(max_k, k[r]);
            sum_k += k[r];
        }
        const StructureField f = structure_field(trace, prior, k);
        const std::size_t attended = f.attention.count();
        violate(attended >= max_k && attended <= sum_k);
        for (std::size_t j = 0; j < prior.size(); ++j) violate(!f.structure[j] || prior[j]);
        violate(f.a_focus >= 0.0 && f.a_focus <= 1.0);

        const WeightMask md = complexity_field(oracle::uniform_tensor(rng, {mcfg.image_h, mcfg.image_w}, 0.0, 1.0),
                                               mcfg.patch, 32);
        FusionConfig fc;
        fc.gamma = rng.uniform();
        fc.tau = f.a_focus > 0.0 ? rng.uniform(0.0, f.a_focus) : rng.uniform();
        const FusedMask fused = fuse(f.structure, md, prior, f.a_focus, fc);
        if (f.a_focus > fc.tau) {
            ++forced_branches;
            violate(fused.structure_branch && fused.mask == WeightMask::from_binary(f.structure));
        }
        for (double w : fused.mask.weights()) violate(w >= 0.0 && w <= 1.0);
    }
    return {violations == 0, std::to_string(instances) + " instances, " + std::to_string(forced_branches) +
                                 " structure-branch cases, " + std::to_string(violations) + " violations"};
}

Verdict entropy_oracle() {
    Rng rng(77);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        Tensor img = oracle::uniform_tensor(rng, {32, 32}, 0.0, 1.0);
        if (i % 4 == 1)  // coarse intensities give repeated bins
            for (std::size_t j = 0; j < img.size(); ++j) img[j] = std::floor(img[j] * 5.0) / 5.0;
        const WeightMask got = complexity_field(img, 4, 32);
        const Tensor raw = oracle::patch_entropy(img, 4, 32);
        double lo = raw[0], hi = raw[0];
        for (std::size_t j = 0; j < raw.size(); ++j) {
            lo = std::min(lo, raw[j]);
            hi = std::max(hi, raw[j]);
        }
        for (std::size_t j = 0; j < raw.size(); ++j) {
            const double expect = hi > lo ? (raw[j] - lo) / (hi - lo) : 0.0;
            worst = std::max(worst, std::abs(got[j] - expect));
        }
    }
    const double constant = patch_entropy(Tensor::filled({4, 4}, 0.42), 4, 32)[0];
    Tensor split({4, 4});
    for (std::size_t j = 0; j < 8; ++j) split[j] = 0.9;
    const double two_bins = patch_entropy(split, 4, 32)[0];
    const bool pass = worst <= 1e-12 && constant == 0.0 && std::abs(two_bins - 1.0) <= 1e-12;
    return {pass, "max |diff| " + fmt("%.3g", worst) + " over 100 images, constant patch " + fmt("%g", constant) +
                      ", two-bin patch " + fmt("%.15g", two_bins) + " bits"};
}

Verdict loss_equivalence() {
    const DiffusionSchedule schedule = build_cosine_schedule(1000);
    Rng rng(303);
    double worst_unit = 0.0, worst_ln2 = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Tensor ew = rng.normal_tensor({32, 32}), el = rng.normal_tensor({32, 32});
        const Tensor rw = rng.normal_tensor({32, 32}), rl = rng.normal_tensor({32, 32});
        const Tensor pw = add(rw, scale(rng.normal_tensor({32, 32}), 0.01));
        const Tensor pl = add(rl, scale(rng.normal_tensor({32, 32}), 0.01));
        const int t = rng.uniform_int(1, 1000);
        const auto plain = diffusion_dpo_loss({ew, el, pw, pl, rw, rl}, t, schedule, {});
        const auto unit = focusdpo_loss({ew, el, pw, pl, rw, rl}, WeightMask(8, 8, 1.0), t, schedule, {});
        worst_unit = std::max(worst_unit, std::abs(plain.loss - unit.loss));
        const auto same = focusdpo_loss({ew, el, rw, rl, rw, rl}, WeightMask(8, 8, rng.uniform()), t, schedule, {});
        worst_ln2 = std::max(worst_ln2, std::abs(same.loss - std::log(2.0)));
    }
    return {worst_unit <= 1e-12 && worst_ln2 <= 1e-12,
            "max |unit - plain| " + fmt("%.3g", worst_unit) + ", max |loss - ln 2| at theta = ref " +
                fmt("%.3g", worst_ln2)};
}

Verdict gradient_fidelity(double& seconds) {
    const auto start = std::chrono::steady_clock::now();
    const auto cases = run_gradcheck(GradcheckConfig{});
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    double worst = 0.0;
    int failed = 0;
    for (const auto& c : cases) {
        worst = std::max(worst, c.max_rel_error);
        failed += c.pass ? 0 : 1;
    }
    return {failed == 0 && cases.size() == 10 && seconds < 120.0,
            std::to_string(cases.size()) + " seeds, max relative error " + fmt("%.3g", worst) + ", " +
                std::to_string(failed) + " failed"};
}

Verdict preference_learning(double& seconds) {
    const auto start = std::chrono::steady_clock::now();
    dip::DipConfig dcfg;
    dcfg.single_pairs = 100;
    dcfg.multi_pairs = 100;
    const dip::Dataset corpus = dip::generate_corpus(dcfg, 7);
    const dip::DatasetSplit split = dip::split_dataset(corpus);

    TrainConfig cfg;
    cfg.steps = 500;
    cfg.accumulate = 32;
    cfg.learning_rate = 3e-3;
    cfg.mse_warmup_steps = 4000;
    cfg.eval_every = 500;
    cfg.record_wallclock = false;
    const DenoiserParams init = DenoiserParams::initialize(cfg.model, cfg.seed);
    const auto before = evaluate(init, clone_frozen(init), split.heldout, cfg);
    const TrainResult r = train(cfg, split.train, init);
    const auto after = evaluate(r.model, clone_frozen(r.reference), split.heldout, cfg);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    const bool pass = before.mean_margin == 0.0 && after.mean_margin > 0.0 && after.frac_margin_positive >= 0.8 &&
                      seconds < 300.0;
    return {pass, std::to_string(split.train.size()) + "/" + std::to_string(split.heldout.size()) +
                      " train/held-out pairs; margin " + fmt("%g", before.mean_margin) + " before, " +
                      fmt("%.4g", after.mean_margin) + " after; frac positive " +
                      fmt("%.3f", after.frac_margin_positive)};
}

TrainConfig harness_config() {
    TrainConfig cfg;
    cfg.steps = 40;
    cfg.accumulate = 4;
    cfg.learning_rate = 3e-3;
    cfg.eval_every = 20;
    cfg.eval_draws = 4;
    cfg.seed = 11;
    cfg.record_wallclock = false;
    return cfg;
}

const dip::Dataset& harness_corpus() {
    static const dip::Dataset d = [] {
        dip::DipConfig c;
        c.single_pairs = 40;
        c.multi_pairs = 40;
        return dip::generate_corpus(c, 7);
    }();
    return d;
}

Verdict ablation_harness() {
    const auto a = run_ablations(harness_config(), harness_corpus());
    const auto b = run_ablations(harness_config(), harness_corpus());
    const std::string ja = rows_to_json(a).dump(), jb = rows_to_json(b).dump();
    const std::string ca = rows_to_csv(a), cb = rows_to_csv(b);
    bool complete = a.size() == all_variants().size();
    std::string margins;
    for (std::size_t i = 0; complete && i < a.size(); ++i) {
        complete = a[i].label == to_string(all_variants()[i]) && a[i].eval.samples > 0 &&
                   std::isfinite(a[i].eval.mean_margin);
        margins += (i ? ", " : "") + a[i].label + " " + fmt("%.3g", a[i].eval.mean_margin);
    }
    const bool identical = ja == jb && ca == cb;
    return {complete && identical, std::to_string(a.size()) + " variants, repeat run " +
                                       (identical ? "bit-identical" : "DIFFERS") + "; held-out margin: " + margins};
}

Verdict sweep_harness() {
    const std::vector<double> taus{0.05, 0.1, 0.3, 0.6, 0.9}, gammas{0.1, 0.3, 0.5};
    TrainConfig cfg = harness_config();
    cfg.steps = 10;
    const auto rows = sweep(cfg, harness_corpus(), taus, gammas);
    const fs::path dir = scratch("sweep");
    fs::create_directories(dir);
    std::ofstream(dir / "sweep.csv") << rows_to_csv(rows);
    std::ofstream(dir / "sweep.json") << rows_to_json(rows).dump(2);

    nlohmann::json back;
    std::ifstream(dir / "sweep.json") >> back;
    std::ifstream csv(dir / "sweep.csv");
    std::size_t lines = 0;
    for (std::string line; std::getline(csv, line);) ++lines;
    bool has_default = false;
    for (const auto& cell : back)
        has_default = has_default || (cell["tau"] == 0.1 && cell["gamma"] == 0.3);
    fs::remove_all(dir);
    const bool pass = rows.size() == taus.size() * gammas.size() && back.size() == rows.size() &&
                      lines == rows.size() + 1 && has_default;
    return {pass, std::to_string(rows.size()) + " cells serialized (CSV " + std::to_string(lines) +
                      " lines), default cell " + (has_default ? "present" : "MISSING")};
}

Verdict dataset_contracts() {
    const dip::DipConfig cfg;
    const dip::Dataset corpus = dip::generate_corpus(cfg, 7);
    int violations = 0;
    for (const auto& q : corpus) {
        const Tensor support = dip::prior_pixel_support(q);
        for (std::size_t i = 0; i < q.x0_w.size(); ++i)
            if (support[i] == 0.0 && q.x0_w[i] != q.x0_l[i]) ++violations;
        const auto g = dip::quality_gate(q);
        if (q.m_prior.count() == 0 || !g.accept || g.score_w < 9.0 || g.score_l > 6.0) ++violations;
    }
    const fs::path a = scratch("data_a"), b = scratch("data_b");
    dip::write_dataset(corpus, a);
    dip::write_dataset(dip::generate_corpus(cfg, 7), b);
    const bool same_bytes = tree_bytes(a) == tree_bytes(b);
    const bool round_trip = dip::dataset_fingerprint(dip::read_dataset(a)) == dip::dataset_fingerprint(corpus);
    fs::remove_all(a);
    fs::remove_all(b);
    return {violations == 0 && same_bytes && round_trip && corpus.size() == cfg.single_pairs + cfg.multi_pairs,
            std::to_string(corpus.size()) + " records, " + std::to_string(violations) + " contract violations, " +
                "regenerated tree " + (same_bytes ? "byte-identical" : "DIFFERS") + ", read-back " +
                (round_trip ? "exact" : "DIFFERS")};
}

}  // namespace

int main() {
    log::set_level(log::Level::warn);
    struct Criterion {
        int id;
        const char* name;
        std::function<Verdict(double&)> check;
        double limit;  // seconds, 0 when untimed
    };
    const std::vector<Criterion> criteria{
        {1, "mask algebra", [](double&) { return mask_algebra(); }, 10.0},
        {2, "entropy oracle", [](double&) { return entropy_oracle(); }, 0.0},
        {3, "loss equivalence", [](double&) { return loss_equivalence(); }, 0.0},
        {4, "gradient fidelity", gradient_fidelity, 120.0},
        {5, "preference learning", preference_learning, 300.0},
        {6, "ablation harness", [](double&) { return ablation_harness(); }, 0.0},
        {7, "sweep harness", [](double&) { return sweep_harness(); }, 0.0},
        {8, "dataset contracts", [](double&) { return dataset_contracts(); }, 0.0},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        double timed = 0.0;
        Verdict v;
        try {
            v = c.check(timed);
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (timed == 0.0) timed = elapsed;
        if (c.limit > 0.0 && timed >= c.limit) {
            v.pass = false;
            v.detail += "; over the " + fmt("%g", c.limit) + " s limit";
        }
        failures += v.pass ? 0 : 1;
        std::printf("[%s] %d %s: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(), elapsed);
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
