#include "focusdpo/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "focusdpo/dipgen.hpp"
#include "focusdpo/gradcheck.hpp"
#include "focusdpo/rng.hpp"
#include "focusdpo/schedule.hpp"
#include "focusdpo/tensor_io.hpp"
#include "focusdpo/trainer.hpp"

namespace focusdpo::cli {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::usage: return usage;
        case ErrorKind::config:
        case ErrorKind::shape:
        case ErrorKind::range: return config;
        case ErrorKind::data:
        case ErrorKind::io: return data;
        case ErrorKind::numeric: return numeric;
    }
    return internal;
}

// ---------------------------------------------------------------------------
// PGM

void emit_pgm(const WeightMask& mask, const fs::path& path) {
    std::string bytes = "P5\n" + std::to_string(mask.cols()) + " " + std::to_string(mask.rows()) + "\n255\n";
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const double w = mask[i];
        if (!(w >= 0.0 && w <= 1.0)) throw RangeError("mask value outside [0, 1] at index " + std::to_string(i));
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * w))));
    }
    io::write_file(path, bytes);
}

Tensor read_pgm(const fs::path& path) {
    const std::string bytes = io::read_file(path);
    std::istringstream in(bytes);
    std::string magic;
    std::size_t w = 0, h = 0;
    int maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (!in || magic != "P5" || maxval != 255 || w == 0 || h == 0) throw DataError("not an 8-bit P5 image: " + path.string());
    in.get();  // single whitespace byte after the header
    const auto offset = static_cast<std::size_t>(in.tellg());
    if (bytes.size() - offset != w * h) throw DataError("PGM payload size mismatch: " + path.string());
    Tensor t({h, w});
    for (std::size_t i = 0; i < w * h; ++i) t[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0;
    return t;
}

// ---------------------------------------------------------------------------
// Configuration

json default_config() {
    const dip::DipConfig d;
    const dip::GateThresholds g;
    const TrainConfig t;
    const GradcheckConfig gc;
    json kinds = json::array();
    for (auto k : d.kinds) kinds.push_back(dip::to_string(k));
    return {
        {"command", ""},
        {"seed", 0},
        {"dataset", ""},
        {"dip",
         {{"image_size", d.image_size},
          {"ref_size", d.ref_size},
          {"patch", d.patch},
          {"strength", d.strength},
          {"strength_jitter", d.strength_jitter},
          {"texture_amplitude", d.texture_amplitude},
          {"max_translation", d.max_translation},
          {"max_overlap", d.max_overlap},
          {"max_placement_retries", d.max_placement_retries},
          {"max_gate_attempts", d.max_gate_attempts},
          {"single_pairs", d.single_pairs},
          {"multi_pairs", d.multi_pairs},
          {"kinds", kinds},
          {"min_score_w", g.min_score_w},
          {"max_score_l", g.max_score_l}}},
        {"model",
         {{"width", t.model.width},
          {"layers", t.model.layers},
          {"ffn_hidden", t.model.ffn_hidden},
          {"max_refs", t.model.max_refs},
          {"prompt_classes", t.model.prompt_classes},
          {"time_buckets", t.model.time_buckets}}},
        {"train",
         {{"steps", t.steps},
          {"accumulate", t.accumulate},
          {"learning_rate", t.learning_rate},
          {"optimizer", to_string(t.optimizer)},
          {"adam_beta1", t.adam.beta1},
          {"adam_beta2", t.adam.beta2},
          {"adam_epsilon", t.adam.epsilon},
          {"eval_every", t.eval_every},
          {"eval_draws", t.eval_draws},
          {"eval_seed", t.eval_seed},
          {"force_unit_mask", t.force_unit_mask},
          {"mse_warmup_steps", t.mse_warmup_steps},
          {"schedule_T", t.schedule_T},
          {"beta", t.dpo.beta},
          {"record_wallclock", t.record_wallclock}}},
        {"mask",
         {{"tau", t.fusion.tau},
          {"gamma", t.fusion.gamma},
          {"entropy_bins", t.fusion.entropy_bins},
          {"variant", to_string(t.fusion.variant)}}},
        {"eval", {{"checkpoint", ""}, {"reference", ""}, {"split", "heldout"}}},
        {"masks", {{"checkpoint", ""}, {"pairs", 4}, {"t", 500}}},
        {"sweep", {{"taus", {0.05, 0.1, 0.3, 0.6, 0.9}}, {"gammas", {0.1, 0.3, 0.5}}}},
        {"gradcheck",
         {{"seeds", gc.seeds}, {"eps", gc.eps}, {"tolerance", gc.tolerance}, {"ref_offset", gc.ref_offset}}},
    };
}

namespace {

enum class Kind { null, boolean, integer, real, string, array, object };

Kind kind_of(const json& j) {
    if (j.is_boolean()) return Kind::boolean;
    if (j.is_number_integer()) return Kind::integer;
    if (j.is_number_float()) return Kind::real;
    if (j.is_string()) return Kind::string;
    if (j.is_array()) return Kind::array;
    if (j.is_object()) return Kind::object;
    return Kind::null;
}

const char* kind_name(Kind k) {
    switch (k) {
        case Kind::null: return "null";
        case Kind::boolean: return "boolean";
        case Kind::integer: return "integer";
        case Kind::real: return "number";
        case Kind::string: return "string";
        case Kind::array: return "array";
        case Kind::object: return "object";
    }
    return "?";
}

/// Value coerced to the type of `like`, or ConfigError.
json coerce(const json& like, const json& value, const std::string& key) {
    const Kind want = kind_of(like), got = kind_of(value);
    if (want == got) {
        if (want == Kind::integer && like.is_number_unsigned() && value.get<std::int64_t>() < 0) {
            throw ConfigError(key + " must be non-negative");
        }
        if (want == Kind::array && !like.empty()) {
            json out = json::array();
            for (const auto& e : value) out.push_back(coerce(like.front(), e, key + "[]"));
            return out;
        }
        return value;
    }
    if (want == Kind::real && got == Kind::integer) return value.get<double>();
    throw ConfigError(key + " expects " + kind_name(want) + ", got " + kind_name(got));
}

}  // namespace

void merge_config(json& config, const json& patch, const std::string& where) {
    if (!patch.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!config.contains(key)) throw ConfigError("unknown config key: " + path);
        json& slot = config[key];
        if (slot.is_object()) {
            merge_config(slot, value, path);
        } else {
            slot = coerce(slot, value, path);
        }
    }
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
        parts.push_back(rest.substr(0, dot));
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    merge_config(config, patch, "");
}

namespace {

struct Options {
    std::string command;
    std::string config_path;
    std::vector<std::string> overrides;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<double> tau, gamma, beta, lr;
    std::optional<std::string> variant, dataset, checkpoint, reference;
    std::vector<double> taus, gammas;
};

json resolve(const Options& o) {
    json cfg = default_config();
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw ConfigError("cannot read config file " + o.config_path);
        json file = json::parse(in, nullptr, false);
        if (file.is_discarded()) throw ConfigError("config file is not valid JSON: " + o.config_path);
        merge_config(cfg, file, "");
    }
    for (const auto& s : o.overrides) apply_override(cfg, s);
    if (o.seed) cfg["seed"] = *o.seed;
    if (o.steps) merge_config(cfg, {{"train", {{"steps", *o.steps}}}}, "");
    if (o.beta) merge_config(cfg, {{"train", {{"beta", *o.beta}}}}, "");
    if (o.lr) merge_config(cfg, {{"train", {{"learning_rate", *o.lr}}}}, "");
    if (o.tau) cfg["mask"]["tau"] = *o.tau;
    if (o.gamma) cfg["mask"]["gamma"] = *o.gamma;
    if (o.variant) cfg["mask"]["variant"] = *o.variant;
    if (o.dataset) cfg["dataset"] = *o.dataset;
    if (o.checkpoint) {
        cfg["eval"]["checkpoint"] = *o.checkpoint;
        cfg["masks"]["checkpoint"] = *o.checkpoint;
    }
    if (o.reference) cfg["eval"]["reference"] = *o.reference;
    if (!o.taus.empty()) cfg["sweep"]["taus"] = o.taus;
    if (!o.gammas.empty()) cfg["sweep"]["gammas"] = o.gammas;
    const char* det = std::getenv("FOCUSDPO_DETERMINISTIC");
    if (det && std::string(det) == "1") cfg["train"]["record_wallclock"] = false;
    cfg["command"] = o.command;
    return cfg;
}

template <class T>
T get(const json& j, const char* key) {
    return j.at(key).get<T>();
}

dip::DipConfig dip_config(const json& cfg) {
    const json& d = cfg.at("dip");
    dip::DipConfig c;
    c.image_size = get<std::size_t>(d, "image_size");
    c.ref_size = get<std::size_t>(d, "ref_size");
    c.patch = get<std::size_t>(d, "patch");
    c.strength = get<double>(d, "strength");
    c.strength_jitter = get<double>(d, "strength_jitter");
    c.texture_amplitude = get<double>(d, "texture_amplitude");
    c.max_translation = get<double>(d, "max_translation");
    c.max_overlap = get<double>(d, "max_overlap");
    c.max_placement_retries = get<int>(d, "max_placement_retries");
    c.max_gate_attempts = get<int>(d, "max_gate_attempts");
    c.single_pairs = get<std::size_t>(d, "single_pairs");
    c.multi_pairs = get<std::size_t>(d, "multi_pairs");
    c.kinds.clear();
    for (const auto& k : d.at("kinds")) c.kinds.push_back(dip::parse_perturbation(k.get<std::string>()));
    c.validate();
    return c;
}

dip::GateThresholds gate_config(const json& cfg) {
    return {get<double>(cfg.at("dip"), "min_score_w"), get<double>(cfg.at("dip"), "max_score_l")};
}

TrainConfig train_config(const json& cfg) {
    const json& t = cfg.at("train");
    const json& m = cfg.at("model");
    const json& k = cfg.at("mask");
    const dip::DipConfig d = dip_config(cfg);
    TrainConfig c;
    c.steps = get<int>(t, "steps");
    c.accumulate = get<int>(t, "accumulate");
    c.learning_rate = get<double>(t, "learning_rate");
    c.seed = get<std::uint64_t>(cfg, "seed");
    c.optimizer = parse_optimizer(get<std::string>(t, "optimizer"));
    c.adam = {get<double>(t, "adam_beta1"), get<double>(t, "adam_beta2"), get<double>(t, "adam_epsilon")};
    c.eval_every = get<int>(t, "eval_every");
    c.eval_draws = get<int>(t, "eval_draws");
    c.eval_seed = get<std::uint64_t>(t, "eval_seed");
    c.force_unit_mask = get<bool>(t, "force_unit_mask");
    c.mse_warmup_steps = get<int>(t, "mse_warmup_steps");
    c.schedule_T = get<int>(t, "schedule_T");
    c.dpo.beta = get<double>(t, "beta");
    c.record_wallclock = get<bool>(t, "record_wallclock");
    c.fusion.tau = get<double>(k, "tau");
    c.fusion.gamma = get<double>(k, "gamma");
    c.fusion.entropy_bins = get<int>(k, "entropy_bins");
    c.fusion.variant = parse_variant(get<std::string>(k, "variant"));
    c.model.image_h = c.model.image_w = d.image_size;
    c.model.ref_h = c.model.ref_w = d.ref_size;
    c.model.patch = d.patch;
    c.model.width = get<std::size_t>(m, "width");
    c.model.layers = get<std::size_t>(m, "layers");
    c.model.ffn_hidden = get<std::size_t>(m, "ffn_hidden");
    c.model.max_refs = get<std::size_t>(m, "max_refs");
    c.model.prompt_classes = get<std::size_t>(m, "prompt_classes");
    c.model.time_buckets = get<std::size_t>(m, "time_buckets");
    c.model.timesteps = c.schedule_T;
    c.validate();
    return c;
}

GradcheckConfig gradcheck_config(const json& cfg) {
    const json& g = cfg.at("gradcheck");
    GradcheckConfig c;
    c.seeds = get<int>(g, "seeds");
    c.first_seed = get<std::uint64_t>(cfg, "seed");
    c.eps = get<double>(g, "eps");
    c.tolerance = get<double>(g, "tolerance");
    c.ref_offset = get<double>(g, "ref_offset");
    c.validate();
    return c;
}

bool within(const fs::path& inner, const fs::path& outer) {
    const fs::path a = fs::weakly_canonical(inner), b = fs::weakly_canonical(outer);
    auto ai = a.begin();
    for (auto bi = b.begin(); bi != b.end(); ++bi, ++ai) {
        if (bi->empty()) continue;  // trailing separator
        if (ai == a.end() || *ai != *bi) return false;
    }
    return true;
}

fs::path dataset_path(const json& cfg) {
    const std::string p = get<std::string>(cfg, "dataset");
    if (p.empty()) throw ConfigError("no dataset given (--dataset or dataset=...)");
    return p;
}

dip::Dataset load_dataset(const json& cfg) {
    const fs::path p = dataset_path(cfg);
    if (!fs::exists(p / "manifest.jsonl")) throw DataError("dataset not found: " + p.string());
    return dip::read_dataset(p);
}

class RunContext {
public:
    RunContext(fs::path out_dir, std::ostream& out) : dir_(std::move(out_dir)), out_(out) {}
    const fs::path& dir() const { return dir_; }
    std::ostream& out() { return out_; }
    void write(const std::string& name, const std::string& text) { io::write_file(dir_ / name, text); }

private:
    fs::path dir_;
    std::ostream& out_;
};

void append_line(std::ofstream& f, const std::string& line, const fs::path& path) {
    f << line << '\n';
    f.flush();
    if (!f) throw IoError("write failed: " + path.string());
}

std::ofstream open_stream(const fs::path& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    return f;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_dip_gen(const json& cfg, RunContext& ctx) {
    const auto d = dip_config(cfg);
    const auto gate = gate_config(cfg);
    const auto seed = get<std::uint64_t>(cfg, "seed");
    const auto pairs = dip::generate_corpus(d, seed, gate);
    const auto manifest = dip::write_dataset(pairs, ctx.dir(), gate);
    char fp[32];
    std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(dip::dataset_fingerprint(pairs)));
    ctx.out() << json{{"pairs", manifest.pair_count}, {"manifest", manifest.path.string()}, {"fingerprint", fp}}.dump()
              << '\n';
    return ok;
}

int cmd_train(const json& cfg, RunContext& ctx) {
    const TrainConfig tc = train_config(cfg);
    const auto dataset = load_dataset(cfg);
    const auto split = dip::split_dataset(dataset);
    if (split.train.empty()) throw DataError("training split is empty");
    const fs::path metrics_path = ctx.dir() / "metrics.jsonl";
    auto metrics = open_stream(metrics_path);
    fs::create_directories(ctx.dir() / "checkpoints");

    TrainHooks hooks;
    if (!split.heldout.empty()) hooks.eval_set = &split.heldout;
    hooks.on_record = [&](const MetricsRecord& r) {
        const std::string line = to_jsonl(r);
        append_line(metrics, line, metrics_path);
        ctx.out() << line << '\n';
    };
    hooks.on_checkpoint = [&](int step, const DenoiserParams& p) {
        char name[32];
        std::snprintf(name, sizeof name, "step_%05d.fdt", step);
        save_checkpoint(ctx.dir() / "checkpoints" / name, p);
    };
    const auto result = train(tc, split.train, DenoiserParams::initialize(tc.model, tc.seed), hooks);
    save_checkpoint(ctx.dir() / "model.fdt", result.model);
    save_checkpoint(ctx.dir() / "reference.fdt", result.reference);
    if (result.skipped) ctx.out() << json{{"skipped_samples", result.skipped}}.dump() << '\n';
    return ok;
}

DenoiserParams load_model(const std::string& path, const TrainConfig& tc, const char* what) {
    if (path.empty()) throw ConfigError(std::string("no ") + what + " checkpoint given");
    DenoiserParams p = load_checkpoint(path);
    if (!(p.config == tc.model)) throw ConfigError(std::string(what) + " checkpoint does not match the model config: " + path);
    return p;
}

int cmd_eval(const json& cfg, RunContext& ctx) {
    const TrainConfig tc = train_config(cfg);
    const json& e = cfg.at("eval");
    const auto policy = load_model(get<std::string>(e, "checkpoint"), tc, "policy");
    const auto ref = load_model(get<std::string>(e, "reference"), tc, "reference");
    const auto dataset = load_dataset(cfg);
    const std::string which = get<std::string>(e, "split");
    dip::Dataset subset;
    if (which == "all") {
        subset = dataset;
    } else if (which == "heldout" || which == "train") {
        auto split = dip::split_dataset(dataset);
        subset = which == "heldout" ? std::move(split.heldout) : std::move(split.train);
    } else {
        throw ConfigError("eval.split must be heldout, train or all");
    }
    const auto record = evaluate(policy, clone_frozen(ref), subset, tc);
    const std::string line = to_jsonl(record);
    ctx.write("metrics.jsonl", line + "\n");
    ctx.out() << line << '\n';
    return ok;
}

int cmd_masks(const json& cfg, RunContext& ctx) {
    const TrainConfig tc = train_config(cfg);
    const json& m = cfg.at("masks");
    const std::string ckpt = get<std::string>(m, "checkpoint");
    const DenoiserParams model = ckpt.empty() ? DenoiserParams::initialize(tc.model, tc.seed) : load_model(ckpt, tc, "policy");
    const int t = get<int>(m, "t");
    if (t < 1 || t > tc.schedule_T) throw ConfigError("masks.t must lie in [1, train.schedule_T]");
    const int pairs = get<int>(m, "pairs");
    if (pairs < 1) throw ConfigError("masks.pairs must be positive");
    const auto dataset = load_dataset(cfg);
    const auto schedule = build_cosine_schedule(tc.schedule_T);

    const fs::path log_path = ctx.dir() / "masks.jsonl";
    auto log = open_stream(log_path);
    const std::size_t n = std::min(dataset.size(), static_cast<std::size_t>(pairs));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& q = dataset[i];
        Rng rng = Rng::derive(tc.seed, q.id);
        const Tensor eps = rng.normal_tensor(q.x0_w.dims());
        const auto pass = forward(model, add_noise(q.x0_w, t, eps, schedule), q.condition(t), true);
        const auto sf = structure_field(*pass.trace, q.m_prior, q.ref_token_counts(tc.model.patch));
        const WeightMask md = complexity_field(q.x0_w, tc.model.patch, tc.fusion.entropy_bins);
        const auto fused = fuse(sf.structure, md, q.m_prior, sf.a_focus, tc.fusion);
        char stem[32];
        std::snprintf(stem, sizeof stem, "pair_%05llu_", static_cast<unsigned long long>(q.id));
        const std::string s = stem;
        emit_pgm(WeightMask::from_binary(q.m_prior), ctx.dir() / (s + "prior.pgm"));
        emit_pgm(WeightMask::from_binary(sf.attention), ctx.dir() / (s + "attention.pgm"));
        emit_pgm(WeightMask::from_binary(sf.structure), ctx.dir() / (s + "structure.pgm"));
        emit_pgm(md, ctx.dir() / (s + "complexity.pgm"));
        emit_pgm(fused.mask, ctx.dir() / (s + "fused.pgm"));
        const std::string line =
            json{{"id", q.id}, {"t", t}, {"a_focus", sf.a_focus}, {"structure_branch", fused.structure_branch}}.dump();
        append_line(log, line, log_path);
        ctx.out() << line << '\n';
    }
    return ok;
}

int write_rows(const std::vector<ExperimentRow>& rows, const std::string& stem, RunContext& ctx) {
    const std::string csv = rows_to_csv(rows);
    ctx.write(stem + ".csv", csv);
    ctx.write(stem + ".json", rows_to_json(rows).dump(2) + "\n");
    ctx.out() << csv;
    return ok;
}

int cmd_ablate(const json& cfg, RunContext& ctx) {
    const TrainConfig tc = train_config(cfg);
    return write_rows(run_ablations(tc, load_dataset(cfg)), "ablation", ctx);
}

int cmd_sweep(const json& cfg, RunContext& ctx) {
    const TrainConfig tc = train_config(cfg);
    const auto taus = cfg.at("sweep").at("taus").get<std::vector<double>>();
    const auto gammas = cfg.at("sweep").at("gammas").get<std::vector<double>>();
    return write_rows(sweep(tc, load_dataset(cfg), taus, gammas), "sweep", ctx);
}

int cmd_gradcheck(const json& cfg, RunContext& ctx) {
    const auto gc = gradcheck_config(cfg);
    const fs::path path = ctx.dir() / "gradcheck.jsonl";
    auto log = open_stream(path);
    int failed = 0;
    for (const auto& c : run_gradcheck(gc)) {
        const std::string line = json{{"seed", c.seed},
                                      {"t", c.t},
                                      {"loss", c.loss},
                                      {"max_rel_error", c.max_rel_error},
                                      {"worst_parameter", c.worst_parameter},
                                      {"analytic", c.analytic},
                                      {"numeric", c.numeric},
                                      {"pass", c.pass}}
                                     .dump();
        append_line(log, line, path);
        ctx.out() << line << '\n';
        failed += c.pass ? 0 : 1;
    }
    if (failed) throw NumericError(std::to_string(failed) + " of " + std::to_string(gc.seeds) + " gradient checks exceeded tolerance");
    return ok;
}

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.config_path, "JSON config file");
    sub->add_option("--set", o.overrides, "Override a config key, e.g. --set train.steps=100")->take_all();
    sub->add_option("--output-dir", o.output_dir, "Directory for outputs and config.resolved")->required();
    sub->add_option("--seed", o.seed, "Seed for data, initialization and sampling");
}

void add_training(CLI::App* sub, Options& o) {
    sub->add_option("--dataset", o.dataset, "Dataset directory written by dip-gen");
    sub->add_option("--steps", o.steps, "Optimizer steps");
    sub->add_option("--beta", o.beta, "Preference temperature");
    sub->add_option("--lr", o.lr, "Learning rate");
}

void add_mask_flags(CLI::App* sub, Options& o, bool with_variant) {
    sub->add_option("--tau", o.tau, "Focus threshold");
    sub->add_option("--gamma", o.gamma, "Structure/complexity trade-off");
    if (with_variant) sub->add_option("--variant", o.variant, "Mask variant");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Spatially weighted preference optimization for subject-driven diffusion (toy scale)", "focusdpo"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("dip-gen", "Generate a synthetic preference dataset");
    add_common(gen, o);

    auto* tr = app.add_subcommand("train", "Train a policy with the masked preference loss");
    add_common(tr, o);
    add_training(tr, o);
    add_mask_flags(tr, o, true);

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint against a reference checkpoint");
    add_common(ev, o);
    ev->add_option("--dataset", o.dataset, "Dataset directory");
    ev->add_option("--checkpoint", o.checkpoint, "Policy checkpoint");
    ev->add_option("--reference", o.reference, "Reference checkpoint");
    ev->add_option("--beta", o.beta, "Preference temperature");
    add_mask_flags(ev, o, true);

    auto* mk = app.add_subcommand("masks", "Render the mask fields of the first pairs as PGM images");
    add_common(mk, o);
    mk->add_option("--dataset", o.dataset, "Dataset directory");
    mk->add_option("--checkpoint", o.checkpoint, "Policy checkpoint (fresh initialization when omitted)");
    add_mask_flags(mk, o, true);

    auto* ab = app.add_subcommand("ablate", "Train and evaluate every mask variant");
    add_common(ab, o);
    add_training(ab, o);
    add_mask_flags(ab, o, false);

    auto* sw = app.add_subcommand("sweep", "Train and evaluate over a tau x gamma grid");
    add_common(sw, o);
    add_training(sw, o);
    sw->add_option("--variant", o.variant, "Mask variant");
    sw->add_option("--taus", o.taus, "Comma-separated tau values")->delimiter(',');
    sw->add_option("--gammas", o.gammas, "Comma-separated gamma values")->delimiter(',');

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full loss gradient");
    add_common(gc, o);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage;
    }

    for (auto* sub : app.get_subcommands()) o.command = sub->get_name();

    try {
        const json cfg = resolve(o);
        const fs::path dir = o.output_dir;
        const std::string ds = get<std::string>(cfg, "dataset");
        if (o.command != "dip-gen" && o.command != "gradcheck" && !ds.empty() && within(dir, ds)) {
            throw ConfigError("output directory must not lie inside the dataset directory " + ds);
        }
        fs::create_directories(dir);
        RunContext ctx(dir, out);
        // Validate the sections this command uses before anything is written.
        if (o.command == "gradcheck") {
            gradcheck_config(cfg);
        } else if (o.command == "dip-gen") {
            dip_config(cfg);
        } else {
            train_config(cfg);
        }
        ctx.write("config.resolved", cfg.dump(2) + "\n");

        if (o.command == "dip-gen") return cmd_dip_gen(cfg, ctx);
        if (o.command == "train") return cmd_train(cfg, ctx);
        if (o.command == "eval") return cmd_eval(cfg, ctx);
        if (o.command == "masks") return cmd_masks(cfg, ctx);
        if (o.command == "ablate") return cmd_ablate(cfg, ctx);
        if (o.command == "sweep") return cmd_sweep(cfg, ctx);
        if (o.command == "gradcheck") return cmd_gradcheck(cfg, ctx);
        throw UsageError("unknown command " + o.command);
    } catch (const Error& e) {
        err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error (io): " << e.what() << '\n';
        return data;
    } catch (const json::exception& e) {
        err << "error (config): " << e.what() << '\n';
        return config;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return internal;
    }
}

}  // namespace focusdpo::cli
