#include "focusdpo/denoiser.hpp"

#include <cmath>

#include "focusdpo/error.hpp"
#include "focusdpo/kernels.hpp"
#include "focusdpo/rng.hpp"
#include "focusdpo/tensor_io.hpp"

namespace focusdpo {

std::size_t DenoiserConfig::time_bucket(int t) const {
    if (t < 1 || t > timesteps) throw RangeError("timestep " + std::to_string(t) + " outside [1, T]");
    const auto b = (static_cast<std::size_t>(t - 1) * time_buckets) / static_cast<std::size_t>(timesteps);
    return std::min(b, time_buckets - 1);
}

void DenoiserConfig::validate() const {
    if (patch == 0 || width == 0 || ffn_hidden == 0 || max_refs == 0 || prompt_classes == 0 || time_buckets == 0) {
        throw ConfigError("denoiser sizes must be positive");
    }
    if (image_h % patch || image_w % patch) throw ShapeError("image dims must be divisible by the patch size");
    if (ref_h % patch || ref_w % patch) throw ShapeError("reference dims must be divisible by the patch size");
    if (image_h == 0 || image_w == 0 || ref_h == 0 || ref_w == 0) throw ConfigError("image dims must be positive");
    if (layers < 2) throw ConfigError("denoiser needs at least 2 layers for a cross-layer average");
    if (timesteps < 2) throw ConfigError("denoiser needs T >= 2");
}

namespace {

Tensor normal_init(Rng& rng, Dims dims, double stddev) {
    Tensor t = rng.normal_tensor(std::move(dims));
    for (auto& v : t.data()) v *= stddev;
    return t;
}

}  // namespace

DenoiserParams DenoiserParams::zeros(const DenoiserConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.width, f = cfg.ffn_hidden, p2 = cfg.patch_area();
    DenoiserParams p;
    p.config = cfg;
    p.w_in = Tensor({p2, d});
    p.b_in = Tensor({d});
    p.pos_target = Tensor({cfg.target_tokens(), d});
    p.pos_ref = Tensor({cfg.ref_tokens(), d});
    p.ref_index = Tensor({cfg.max_refs, d});
    p.prompt = Tensor({cfg.prompt_classes, d});
    p.time = Tensor({cfg.time_buckets, d});
    p.layers.resize(cfg.layers);
    for (auto& l : p.layers) {
        l.wq = Tensor({d, d});
        l.wk = Tensor({d, d});
        l.wv = Tensor({d, d});
        l.wo = Tensor({d, d});
        l.w1 = Tensor({d, f});
        l.b1 = Tensor({f});
        l.w2 = Tensor({f, d});
        l.b2 = Tensor({d});
    }
    p.w_out = Tensor({d, p2});
    p.b_out = Tensor({p2});
    return p;
}

DenoiserParams DenoiserParams::initialize(const DenoiserConfig& cfg, std::uint64_t seed) {
    DenoiserParams p = zeros(cfg);
    Rng rng(seed);
    const double d = static_cast<double>(cfg.width);
    const double f = static_cast<double>(cfg.ffn_hidden);
    const double p2 = static_cast<double>(cfg.patch_area());
    p.w_in = normal_init(rng, p.w_in.dims(), 1.0 / std::sqrt(p2));
    p.pos_target = normal_init(rng, p.pos_target.dims(), 0.1);
    p.pos_ref = normal_init(rng, p.pos_ref.dims(), 0.1);
    p.ref_index = normal_init(rng, p.ref_index.dims(), 0.1);
    p.prompt = normal_init(rng, p.prompt.dims(), 0.1);
    p.time = normal_init(rng, p.time.dims(), 0.1);
    for (auto& l : p.layers) {
        l.wq = normal_init(rng, l.wq.dims(), 1.0 / std::sqrt(d));
        l.wk = normal_init(rng, l.wk.dims(), 1.0 / std::sqrt(d));
        l.wv = normal_init(rng, l.wv.dims(), 1.0 / std::sqrt(d));
        l.wo = normal_init(rng, l.wo.dims(), 0.5 / std::sqrt(d));
        l.w1 = normal_init(rng, l.w1.dims(), 1.0 / std::sqrt(d));
        l.w2 = normal_init(rng, l.w2.dims(), 0.5 / std::sqrt(f));
    }
    p.w_out = normal_init(rng, p.w_out.dims(), 0.5 / std::sqrt(d));
    return p;
}

std::vector<std::pair<std::string, Tensor*>> DenoiserParams::named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out = {
        {"w_in", &w_in},       {"b_in", &b_in},     {"pos_target", &pos_target}, {"pos_ref", &pos_ref},
        {"ref_index", &ref_index}, {"prompt", &prompt}, {"time", &time},
    };
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string pre = "layer" + std::to_string(i) + ".";
        auto& l = layers[i];
        out.insert(out.end(), {{pre + "wq", &l.wq}, {pre + "wk", &l.wk}, {pre + "wv", &l.wv}, {pre + "wo", &l.wo},
                               {pre + "w1", &l.w1}, {pre + "b1", &l.b1}, {pre + "w2", &l.w2}, {pre + "b2", &l.b2}});
    }
    out.emplace_back("w_out", &w_out);
    out.emplace_back("b_out", &b_out);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> DenoiserParams::named_tensors() const {
    auto mut = const_cast<DenoiserParams*>(this)->named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [n, t] : mut) out.emplace_back(std::move(n), t);
    return out;
}

std::size_t DenoiserParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_tensors()) n += t->size();
    return n;
}

bool DenoiserParams::all_finite() const {
    for (const auto& [name, t] : named_tensors())
        if (!t->all_finite()) return false;
    return true;
}

Tensor flatten(const DenoiserParams& params) {
    std::vector<double> flat;
    flat.reserve(params.parameter_count());
    for (const auto& [name, t] : params.named_tensors()) flat.insert(flat.end(), t->data().begin(), t->data().end());
    const std::size_t n = flat.size();
    return Tensor({n}, std::move(flat));
}

void unflatten(const Tensor& flat, DenoiserParams& params) {
    if (flat.size() != params.parameter_count()) throw ShapeError("flat parameter vector has the wrong length");
    std::size_t off = 0;
    for (auto& [name, t] : params.named_tensors()) {
        std::copy_n(flat.data().begin() + static_cast<std::ptrdiff_t>(off), t->size(), t->data().begin());
        off += t->size();
    }
    ++params.generation;
}

Tensor patchify(const Tensor& image, std::size_t patch) {
    if (image.rank() != 2) throw ShapeError("patchify expects [H x W], got " + dims_to_string(image.dims()));
    const std::size_t h = image.dim(0), w = image.dim(1);
    if (h % patch || w % patch) {
        throw ShapeError("image " + dims_to_string(image.dims()) + " not divisible by patch " + std::to_string(patch));
    }
    const std::size_t gh = h / patch, gw = w / patch;
    Tensor out({gh * gw, patch * patch});
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            out.at((r / patch) * gw + c / patch, (r % patch) * patch + c % patch) = image.at(r, c);
    return out;
}

Tensor unpatchify(const Tensor& tokens, std::size_t h, std::size_t w, std::size_t patch) {
    const std::size_t gw = w / patch;
    if (tokens.rank() != 2 || tokens.dim(0) != (h / patch) * gw || tokens.dim(1) != patch * patch) {
        throw ShapeError("unpatchify: token tensor " + dims_to_string(tokens.dims()) + " does not match image");
    }
    Tensor out({h, w});
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            out.at(r, c) = tokens.at((r / patch) * gw + c / patch, (r % patch) * patch + c % patch);
    return out;
}

namespace {

void add_row(Tensor& m, std::size_t row, const Tensor& table, std::size_t table_row) {
    const std::size_t d = m.dim(1);
    for (std::size_t j = 0; j < d; ++j) m.at(row, j) += table.at(table_row, j);
}

Tensor rows(const Tensor& m, std::size_t begin, std::size_t count) {
    const std::size_t d = m.dim(1);
    Tensor out({count, d});
    std::copy_n(m.data().begin() + static_cast<std::ptrdiff_t>(begin * d), count * d, out.data().begin());
    return out;
}

void accumulate(Tensor& into, const Tensor& g) {
    for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

void check_inputs(const DenoiserParams& params, const Tensor& x_t, const ConditionBundle& cond) {
    const auto& cfg = params.config;
    if (x_t.rank() != 2 || x_t.dim(0) % cfg.patch || x_t.dim(1) % cfg.patch) {
        throw ShapeError("x_t " + dims_to_string(x_t.dims()) + " not divisible by patch " + std::to_string(cfg.patch));
    }
    if (x_t.dim(0) != cfg.image_h || x_t.dim(1) != cfg.image_w) {
        throw ShapeError("x_t " + dims_to_string(x_t.dims()) + " does not match model image size");
    }
    if (cond.references.size() > cfg.max_refs) throw ShapeError("too many reference images");
    for (const auto& r : cond.references) {
        if (r.rank() != 2 || r.dim(0) != cfg.ref_h || r.dim(1) != cfg.ref_w) {
            throw ShapeError("reference " + dims_to_string(r.dims()) + " does not match model reference size");
        }
    }
    if (cond.prompt_class >= cfg.prompt_classes) throw RangeError("prompt class out of range");
    if (cond.timestep < 1 || cond.timestep > cfg.timesteps) {
        throw RangeError("timestep " + std::to_string(cond.timestep) + " outside [1, T]");
    }
    if (!params.all_finite()) throw NumericError("denoiser parameters contain non-finite values");
}

}  // namespace

ForwardPass forward(const DenoiserParams& params, const Tensor& x_t, const ConditionBundle& cond, bool capture) {
    check_inputs(params, x_t, cond);
    const auto& cfg = params.config;
    const std::size_t pt = cfg.target_tokens(), pr = cfg.ref_tokens(), d = cfg.width;
    const std::size_t nrefs = cond.references.size();
    const std::size_t n = pt + nrefs * pr;

    ForwardPass out;
    SavedActivations& s = out.saved;
    s.owner = &params;
    s.generation = params.generation;
    s.bucket = cfg.time_bucket(cond.timestep);
    s.prompt_class = cond.prompt_class;
    s.target_patches = patchify(x_t, cfg.patch);

    // Token embeddings: [target; ref_0; ref_1; ...] along the token axis.
    Tensor h({n, d});
    {
        const Tensor et = add_row_bias(matmul(s.target_patches, params.w_in), params.b_in);
        std::copy(et.data().begin(), et.data().end(), h.data().begin());
        for (std::size_t i = 0; i < pt; ++i) add_row(h, i, params.pos_target, i);
    }
    for (std::size_t r = 0; r < nrefs; ++r) {
        s.ref_patches.push_back(patchify(cond.references[r], cfg.patch));
        const Tensor er = add_row_bias(matmul(s.ref_patches.back(), params.w_in), params.b_in);
        const std::size_t base = pt + r * pr;
        std::copy(er.data().begin(), er.data().end(), h.data().begin() + static_cast<std::ptrdiff_t>(base * d));
        for (std::size_t i = 0; i < pr; ++i) {
            add_row(h, base + i, params.pos_ref, i);
            add_row(h, base + i, params.ref_index, r);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        add_row(h, i, params.time, s.bucket);
        add_row(h, i, params.prompt, s.prompt_class);
    }

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    if (capture) {
        out.trace.emplace();
        out.trace->references.resize(cfg.layers);
    }
    for (std::size_t li = 0; li < cfg.layers; ++li) {
        const auto& lp = params.layers[li];
        LayerActivations a;
        a.input = h;
        a.q = matmul(h, lp.wq);
        a.k = matmul(h, lp.wk);
        a.v = matmul(h, lp.wv);
        a.attn = softmax_rows(scale(matmul(a.q, transpose(a.k)), inv_sqrt_d));
        a.mixed = matmul(a.attn, a.v);
        a.post_attn = add(h, matmul(a.mixed, lp.wo));
        a.pre_act = add_row_bias(matmul(a.post_attn, lp.w1), lp.b1);
        a.act = silu(a.pre_act);
        h = add(a.post_attn, add_row_bias(matmul(a.act, lp.w2), lp.b2));
        if (capture) {
            out.trace->target.push_back(rows(a.post_attn, 0, pt));
            for (std::size_t r = 0; r < nrefs; ++r) out.trace->references[li].push_back(rows(a.post_attn, pt + r * pr, pr));
        }
        s.layers.push_back(std::move(a));
    }
    s.final_tokens = rows(h, 0, pt);
    const Tensor y = add_row_bias(matmul(s.final_tokens, params.w_out), params.b_out);
    out.eps_hat = unpatchify(y, cfg.image_h, cfg.image_w, cfg.patch);
    if (!out.eps_hat.all_finite()) throw NumericError("denoiser produced non-finite output");
    return out;
}

Tensor denoise(const DenoiserParams& params, const Tensor& x_t, const ConditionBundle& cond) {
    return forward(params, x_t, cond, false).eps_hat;
}

DenoiserParams backward(const DenoiserParams& params, const SavedActivations& saved, const Tensor& g_eps) {
    if (saved.owner != &params || saved.generation != params.generation) {
        throw UsageError("backward called with activations from a different or since-updated parameter set");
    }
    const auto& cfg = params.config;
    if (g_eps.dims() != Dims{cfg.image_h, cfg.image_w}) throw ShapeError("g_eps does not match image dims");
    const std::size_t pt = cfg.target_tokens(), pr = cfg.ref_tokens(), d = cfg.width;
    const std::size_t nrefs = saved.ref_patches.size();
    const std::size_t n = pt + nrefs * pr;

    DenoiserParams g = DenoiserParams::zeros(cfg);

    const Tensor gy = patchify(g_eps, cfg.patch);
    {
        auto mg = matmul_backward(saved.final_tokens, params.w_out, gy);
        g.w_out = std::move(mg.b);
        g.b_out = sum_rows(gy);
        Tensor gh({n, d});
        std::copy(mg.a.data().begin(), mg.a.data().end(), gh.data().begin());

        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        for (std::size_t li = cfg.layers; li-- > 0;) {
            const auto& lp = params.layers[li];
            const auto& a = saved.layers[li];
            auto& gl = g.layers[li];

            // h_out = post_attn + silu(post_attn w1 + b1) w2 + b2
            Tensor g_post = gh;
            auto m2 = matmul_backward(a.act, lp.w2, gh);
            gl.w2 = std::move(m2.b);
            gl.b2 = sum_rows(gh);
            const Tensor g_pre = silu_backward(a.pre_act, m2.a);
            auto m1 = matmul_backward(a.post_attn, lp.w1, g_pre);
            gl.w1 = std::move(m1.b);
            gl.b1 = sum_rows(g_pre);
            accumulate(g_post, m1.a);

            // post_attn = input + (softmax(q k^T / sqrt d) v) wo
            Tensor g_in = g_post;
            auto mo = matmul_backward(a.mixed, lp.wo, g_post);
            gl.wo = std::move(mo.b);
            auto mav = matmul_backward(a.attn, a.v, mo.a);
            const Tensor g_scores = scale(softmax_rows_backward(a.attn, mav.a), inv_sqrt_d);
            const Tensor g_q = matmul(g_scores, a.k);
            const Tensor g_k = matmul(transpose(g_scores), a.q);
            auto mq = matmul_backward(a.input, lp.wq, g_q);
            auto mk = matmul_backward(a.input, lp.wk, g_k);
            auto mv = matmul_backward(a.input, lp.wv, mav.b);
            gl.wq = std::move(mq.b);
            gl.wk = std::move(mk.b);
            gl.wv = std::move(mv.b);
            accumulate(g_in, mq.a);
            accumulate(g_in, mk.a);
            accumulate(g_in, mv.a);
            gh = std::move(g_in);
        }

        // Embedding tables.
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const double v = gh.at(i, j);
                g.time.at(saved.bucket, j) += v;
                g.prompt.at(saved.prompt_class, j) += v;
                g.b_in[j] += v;
            }
        }
        const Tensor gt = rows(gh, 0, pt);
        accumulate(g.pos_target, gt);
        accumulate(g.w_in, matmul(transpose(saved.target_patches), gt));
        for (std::size_t r = 0; r < nrefs; ++r) {
            const Tensor gr = rows(gh, pt + r * pr, pr);
            accumulate(g.pos_ref, gr);
            accumulate(g.w_in, matmul(transpose(saved.ref_patches[r]), gr));
            const Tensor gsum = sum_rows(gr);
            for (std::size_t j = 0; j < d; ++j) g.ref_index.at(r, j) += gsum[j];
        }
    }
    return g;
}

FrozenDenoiser::FrozenDenoiser(DenoiserParams params)
    : params_(std::make_shared<const DenoiserParams>(std::move(params))) {}

ForwardPass FrozenDenoiser::forward(const Tensor& x_t, const ConditionBundle& cond, bool capture) const {
    return focusdpo::forward(*params_, x_t, cond, capture);
}

FrozenDenoiser clone_frozen(const DenoiserParams& params) {
    if (!params.all_finite()) throw NumericError("cannot freeze non-finite parameters");
    return FrozenDenoiser(params);
}

namespace {

constexpr std::size_t kConfigFields = 12;

Tensor encode_config(const DenoiserConfig& c) {
    return Tensor({kConfigFields},
                  {double(c.image_h), double(c.image_w), double(c.patch), double(c.ref_h), double(c.ref_w),
                   double(c.width), double(c.layers), double(c.ffn_hidden), double(c.max_refs),
                   double(c.prompt_classes), double(c.time_buckets), double(c.timesteps)});
}

DenoiserConfig decode_config(const Tensor& t) {
    if (t.size() != kConfigFields) throw DataError("checkpoint config record has the wrong length");
    auto u = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
    DenoiserConfig c;
    c.image_h = u(0);
    c.image_w = u(1);
    c.patch = u(2);
    c.ref_h = u(3);
    c.ref_w = u(4);
    c.width = u(5);
    c.layers = u(6);
    c.ffn_hidden = u(7);
    c.max_refs = u(8);
    c.prompt_classes = u(9);
    c.time_buckets = u(10);
    c.timesteps = static_cast<int>(t[11]);
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params) {
    io::NamedTensors named;
    named.emplace_back("config", encode_config(params.config));
    for (const auto& [name, t] : params.named_tensors()) named.emplace_back(name, *t);
    io::write_checkpoint(path, named);
}

DenoiserParams load_checkpoint(const std::filesystem::path& path) {
    const auto named = io::read_checkpoint(path);
    if (named.empty() || named.front().first != "config") throw DataError("checkpoint lacks a config record: " + path.string());
    DenoiserParams p = DenoiserParams::zeros(decode_config(named.front().second));
    auto slots = p.named_tensors();
    if (slots.size() + 1 != named.size()) throw DataError("checkpoint tensor count mismatch: " + path.string());
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& [name, t] = named[i + 1];
        if (name != slots[i].first || t.dims() != slots[i].second->dims()) {
            throw DataError("checkpoint entry " + name + " does not match the model layout");
        }
        *slots[i].second = t;
    }
    return p;
}

}  // namespace focusdpo
