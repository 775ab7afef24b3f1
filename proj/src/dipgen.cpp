#include "focusdpo/dipgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>

#include "focusdpo/error.hpp"
#include "focusdpo/tensor_io.hpp"

namespace focusdpo::dip {

using nlohmann::json;

const char* to_string(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
    }
    return "?";
}

const char* to_string(Texture t) {
    switch (t) {
        case Texture::stripes: return "stripes";
        case Texture::checker: return "checker";
        case Texture::dots: return "dots";
    }
    return "?";
}

const char* to_string(PerturbationKind k) {
    switch (k) {
        case PerturbationKind::texture_swap: return "texture_swap";
        case PerturbationKind::intensity_jitter: return "intensity_jitter";
        case PerturbationKind::shape_morph: return "shape_morph";
    }
    return "?";
}

Shape parse_shape(const std::string& s) {
    for (auto v : {Shape::circle, Shape::square, Shape::triangle})
        if (s == to_string(v)) return v;
    throw DataError("unknown shape '" + s + "'");
}

Texture parse_texture(const std::string& s) {
    for (auto v : {Texture::stripes, Texture::checker, Texture::dots})
        if (s == to_string(v)) return v;
    throw DataError("unknown texture '" + s + "'");
}

PerturbationKind parse_perturbation(const std::string& s) {
    for (auto v : {PerturbationKind::texture_swap, PerturbationKind::intensity_jitter, PerturbationKind::shape_morph})
        if (s == to_string(v)) return v;
    throw DataError("unknown perturbation '" + s + "'");
}

void DipConfig::validate() const {
    if (patch == 0 || image_size % patch || ref_size % patch) {
        throw ConfigError("image and reference sizes must be multiples of the patch size");
    }
    if (ref_size > image_size) throw ConfigError("reference crops cannot exceed the image size");
    if (ref_size < 4) throw ConfigError("reference crops must be at least 4 pixels");
    if (!(strength >= 0.0 && strength <= 1.0)) throw ConfigError("perturbation strength must lie in [0, 1]");
    if (!(strength_jitter >= 0.0 && strength_jitter < 1.0)) throw ConfigError("strength_jitter must lie in [0, 1)");
    if (!(max_overlap >= 0.0 && max_overlap <= 1.0)) throw ConfigError("max_overlap must lie in [0, 1]");
    if (max_placement_retries < 1 || max_gate_attempts < 1) throw ConfigError("retry budgets must be positive");
    if (single_pairs + multi_pairs == 0) throw ConfigError("corpus needs at least one pair");
    if (kinds.empty()) throw ConfigError("at least one perturbation kind is required");
}

std::vector<Tensor> PreferenceQuadruplet::references() const {
    std::vector<Tensor> out;
    if (x_r.empty()) return out;
    const std::size_t h = x_r.dim(1), w = x_r.dim(2);
    for (std::size_t r = 0; r < x_r.dim(0); ++r) {
        std::vector<double> px(x_r.data().begin() + static_cast<std::ptrdiff_t>(r * h * w),
                               x_r.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * h * w));
        out.emplace_back(Dims{h, w}, std::move(px));
    }
    return out;
}

ConditionBundle PreferenceQuadruplet::condition(int timestep) const {
    return ConditionBundle{prompt_class, references(), timestep};
}

std::vector<std::size_t> PreferenceQuadruplet::ref_token_counts(std::size_t patch) const {
    const std::size_t k = (x_r.dim(1) / patch) * (x_r.dim(2) / patch);
    return std::vector<std::size_t>(reference_count(), k);
}

namespace {

constexpr double kIntensityRange = 0.3;

bool inside_shape(Shape s, double dy, double dx, double scale) {
    switch (s) {
        case Shape::circle: return dx * dx + dy * dy <= scale * scale;
        case Shape::square: return std::abs(dx) <= 0.8 * scale && std::abs(dy) <= 0.8 * scale;
        case Shape::triangle: return dy >= -scale && dy <= 0.8 * scale && std::abs(dx) <= 0.55 * (dy + scale);
    }
    return false;
}

double pattern(Texture t, double dy, double dx, double frequency, double scale) {
    const double w = std::numbers::pi * frequency / scale;
    switch (t) {
        case Texture::stripes: return std::cos(w * dx);
        case Texture::checker: return std::cos(w * dx) * std::cos(w * dy) >= 0.0 ? 1.0 : -1.0;
        case Texture::dots: return std::cos(w * dx) * std::cos(w * dy) > 0.5 ? 1.0 : -1.0;
    }
    return 0.0;
}

/// A subject as actually drawn, including any perturbation mix.
struct Appearance {
    SubjectSpec spec;
    Shape morph_shape = Shape::circle;
    double morph_mix = 0.0;
    Texture swap_texture = Texture::stripes;
    double swap_mix = 0.0;
    double intensity_delta = 0.0;
};

Appearance appearance(const SubjectSpec& s, const SubjectPerturbation* p) {
    Appearance a;
    a.spec = s;
    a.morph_shape = s.shape;
    a.swap_texture = s.texture;
    if (!p) return a;
    switch (p->kind) {
        case PerturbationKind::shape_morph:
            a.morph_shape = p->morph_shape;
            a.morph_mix = p->strength;
            break;
        case PerturbationKind::texture_swap:
            a.swap_texture = p->swap_texture;
            a.swap_mix = p->strength;
            break;
        case PerturbationKind::intensity_jitter:
            a.intensity_delta = p->intensity_delta;
            break;
    }
    return a;
}

int extent(double scale) { return static_cast<int>(std::ceil(scale)); }

/// Alpha-composites one subject centred at (row, col). Marks covered pixels
/// in *support when given.
void draw_subject(Tensor& img, const Appearance& a, int row, int col, double amplitude, Tensor* support) {
    const int h = static_cast<int>(img.dim(0)), w = static_cast<int>(img.dim(1));
    const int e = extent(a.spec.scale);
    for (int r = std::max(0, row - e); r <= std::min(h - 1, row + e); ++r) {
        for (int c = std::max(0, col - e); c <= std::min(w - 1, col + e); ++c) {
            const double dy = r - row, dx = c - col;
            // A morph erodes the subject toward the target shape: covered
            // pixels outside it fade by morph_mix; no new pixels are added.
            if (!inside_shape(a.spec.shape, dy, dx, a.spec.scale)) continue;
            const double cover = inside_shape(a.morph_shape, dy, dx, a.spec.scale) ? 1.0 : 1.0 - a.morph_mix;
            if (cover <= 0.0) continue;
            const double tex = (1.0 - a.swap_mix) * pattern(a.spec.texture, dy, dx, a.spec.frequency, a.spec.scale) +
                               a.swap_mix * pattern(a.swap_texture, dy, dx, a.spec.frequency, a.spec.scale);
            const double value = std::clamp(a.spec.base_intensity + a.intensity_delta + amplitude * tex, 0.0, 1.0);
            auto& px = img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
            px = cover * value + (1.0 - cover) * px;
            if (support) support->at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 1.0;
        }
    }
}

struct Background {
    double level, grad_r, grad_c, wave_amp, wave_freq, phase;

    Tensor render(std::size_t h, std::size_t w) const {
        Tensor t({h, w});
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const double v = level + grad_r * (static_cast<double>(r) / h - 0.5) +
                                 grad_c * (static_cast<double>(c) / w - 0.5) +
                                 wave_amp * std::sin(wave_freq * static_cast<double>(r + c) + phase);
                t.at(r, c) = std::clamp(v, 0.0, 1.0);
            }
        }
        return t;
    }
};

Background random_background(Rng& rng, bool dark) {
    Background b;
    b.level = dark ? rng.uniform(0.05, 0.2) : rng.uniform(0.8, 0.95);
    b.grad_r = rng.uniform(-0.08, 0.08);
    b.grad_c = rng.uniform(-0.08, 0.08);
    b.wave_amp = rng.uniform(0.0, 0.03);
    b.wave_freq = rng.uniform(0.2, 0.8);
    b.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return b;
}

Tensor shape_support(const SubjectSpec& s, std::size_t h, std::size_t w) {
    Tensor img({h, w});
    Tensor support({h, w});
    draw_subject(img, appearance(s, nullptr), s.row, s.col, 0.0, &support);
    return support;
}

double overlap_fraction(const Tensor& a, const Tensor& b) {
    double both = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        both += a[i] * b[i];
        na += a[i];
        nb += b[i];
    }
    const double smaller = std::min(na, nb);
    return smaller > 0.0 ? both / smaller : 0.0;
}

template <class T>
T pick_other(Rng& rng, T current) {
    const int offset = rng.uniform_int(1, 2);
    return static_cast<T>((static_cast<int>(current) + offset) % 3);
}

/// Nearest centre within [e, size-1-e] whose offset from the reference-crop
/// centre is a whole number of patches, so target and reference tokens share
/// one lattice.
int snap_to_lattice(int v, int e, int size, const DipConfig& cfg) {
    const int p = static_cast<int>(cfg.patch);
    const int phase = static_cast<int>(cfg.ref_size / 2) % p;
    const int lo = e + ((phase - e) % p + p) % p;
    int best = lo;
    for (int c = lo; c <= size - 1 - e; c += p)
        if (std::abs(c - v) < std::abs(best - v)) best = c;
    if (best > size - 1 - e) throw ConfigError("image too small for a patch-aligned subject");
    return best;
}

}  // namespace

std::vector<SubjectSpec> random_subjects(Rng& rng, std::size_t n, const DipConfig& cfg) {
    cfg.validate();
    std::vector<SubjectSpec> out;
    const int size = static_cast<int>(cfg.image_size);
    for (std::size_t i = 0; i < n; ++i) {
        SubjectSpec s;
        s.shape = static_cast<Shape>(rng.uniform_int(0, 2));
        s.texture = static_cast<Texture>(rng.uniform_int(0, 2));
        s.frequency = rng.uniform(1.0, 2.5);
        s.base_intensity = rng.uniform(0.35, 0.65);
        s.scale = rng.uniform(cfg.min_scale(), cfg.max_scale());
        const int e = extent(s.scale);
        s.row = rng.uniform_int(e, size - 1 - e);
        s.col = rng.uniform_int(e, size - 1 - e);
        out.push_back(s);
    }
    return out;
}

PreferenceQuadruplet synthesize_pair(const std::vector<SubjectSpec>& spec, std::uint64_t seed, std::size_t n_subjects,
                                     const DipConfig& cfg) {
    cfg.validate();
    if (n_subjects < 1 || n_subjects > 3) throw ConfigError("n_subjects must be 1, 2 or 3");
    if (spec.size() < n_subjects) throw ConfigError("not enough subject specs for n_subjects");
    const std::size_t hw = cfg.image_size, rs = cfg.ref_size;
    const int size = static_cast<int>(hw);
    for (std::size_t i = 0; i < n_subjects; ++i) {
        const auto& s = spec[i];
        if (!(s.frequency >= 1.0)) throw ConfigError("texture frequency must be >= 1");
        if (!(s.scale > 0.0) || static_cast<int>(rs / 2) + extent(s.scale) > static_cast<int>(rs) - 1) {
            throw ConfigError("subject scale does not fit inside the reference crop");
        }
        if (!(s.base_intensity >= 0.0 && s.base_intensity <= 1.0)) throw ConfigError("base intensity outside [0, 1]");
    }

    Rng rng(seed);
    PreferenceQuadruplet q;
    q.seed = seed;

    // Placement in the winning image: translated copies on the patch lattice, bounded overlap.
    std::vector<SubjectSpec> placed;
    bool ok = false;
    for (int attempt = 0; attempt < cfg.max_placement_retries && !ok; ++attempt) {
        placed.assign(spec.begin(), spec.begin() + static_cast<std::ptrdiff_t>(n_subjects));
        std::vector<Tensor> supports;
        for (auto& s : placed) {
            const int e = extent(s.scale);
            const double t = cfg.max_translation;
            s.row = std::clamp(s.row + static_cast<int>(std::lround(rng.uniform(-t, t))), e, size - 1 - e);
            s.col = std::clamp(s.col + static_cast<int>(std::lround(rng.uniform(-t, t))), e, size - 1 - e);
            s.row = snap_to_lattice(s.row, e, size, cfg);
            s.col = snap_to_lattice(s.col, e, size, cfg);
            supports.push_back(shape_support(s, hw, hw));
        }
        ok = true;
        for (std::size_t a = 0; a < supports.size() && ok; ++a)
            for (std::size_t b = a + 1; b < supports.size() && ok; ++b)
                if (overlap_fraction(supports[a], supports[b]) > cfg.max_overlap) ok = false;
    }
    if (!ok) throw DataError("could not place subjects within the overlap limit");
    q.subjects = placed;
    q.prompt_class = static_cast<std::size_t>(placed[0].shape) * 3 + static_cast<std::size_t>(placed[0].texture) +
                     (n_subjects > 1 ? 9 : 0);

    const Background bg_ref = random_background(rng, false);
    const Background bg_win = random_background(rng, true);

    // One reference crop per subject, centred, on background A.
    q.x_r = Tensor({n_subjects, rs, rs});
    const Tensor ref_bg = bg_ref.render(rs, rs);
    for (std::size_t i = 0; i < n_subjects; ++i) {
        Tensor crop = ref_bg;
        const int centre = static_cast<int>(rs / 2);
        draw_subject(crop, appearance(placed[i], nullptr), centre, centre, cfg.texture_amplitude, nullptr);
        std::copy(crop.data().begin(), crop.data().end(),
                  q.x_r.data().begin() + static_cast<std::ptrdiff_t>(i * rs * rs));
    }

    // Winning image on background B; any-coverage downsampling gives M_prior.
    q.x0_w = bg_win.render(hw, hw);
    Tensor support({hw, hw});
    for (const auto& s : placed) draw_subject(q.x0_w, appearance(s, nullptr), s.row, s.col, cfg.texture_amplitude, &support);
    const std::size_t grid = hw / cfg.patch;
    q.m_prior = BinaryMask(grid, grid);
    for (std::size_t r = 0; r < hw; ++r)
        for (std::size_t c = 0; c < hw; ++c)
            if (support.at(r, c) > 0.0) q.m_prior.set((r / cfg.patch) * grid + c / cfg.patch, true);

    // Losing image: every subject perturbed, confined to the prior's pixel support.
    for (std::size_t i = 0; i < n_subjects; ++i) {
        SubjectPerturbation p;
        p.subject = i;
        p.kind = cfg.kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cfg.kinds.size()) - 1))];
        const double j = cfg.strength_jitter;
        p.strength = std::clamp(cfg.strength * rng.uniform(1.0 - j, 1.0 + j), 0.0, 1.0);
        p.morph_shape = pick_other(rng, placed[i].shape);
        p.swap_texture = pick_other(rng, placed[i].texture);
        if (p.kind == PerturbationKind::intensity_jitter) {
            p.intensity_delta = -p.strength * kIntensityRange;
        }
        q.provenance.perturbations.push_back(p);
    }
    q.x0_l = bg_win.render(hw, hw);
    for (std::size_t i = 0; i < n_subjects; ++i) {
        const auto& s = placed[i];
        draw_subject(q.x0_l, appearance(s, &q.provenance.perturbations[i]), s.row, s.col, cfg.texture_amplitude, nullptr);
    }
    const Tensor allowed = prior_pixel_support(q);
    for (std::size_t i = 0; i < allowed.size(); ++i)
        if (allowed[i] == 0.0) q.x0_l[i] = q.x0_w[i];
    return q;
}

Tensor prior_pixel_support(const PreferenceQuadruplet& q) {
    const std::size_t patch = q.x0_w.dim(0) / q.m_prior.rows();
    return WeightMask::from_binary(q.m_prior).upsample(patch);
}

std::vector<Tensor> subject_supports(const PreferenceQuadruplet& q) {
    const std::size_t h = q.x0_w.dim(0), w = q.x0_w.dim(1);
    std::vector<Tensor> out;
    for (const auto& s : q.subjects) {
        Tensor sup = shape_support(s, h, w);
        for (auto& earlier : out)
            for (std::size_t i = 0; i < sup.size(); ++i)
                if (sup[i] > 0.0) earlier[i] = 0.0;  // occluded by a later subject
        out.push_back(std::move(sup));
    }
    return out;
}

double attribute_distance(const SubjectSpec& subject, const SubjectPerturbation* p) {
    if (!p) return 0.0;
    double d = 0.0;
    switch (p->kind) {
        case PerturbationKind::shape_morph: d = p->morph_shape != subject.shape ? p->strength : 0.0; break;
        case PerturbationKind::texture_swap: d = p->swap_texture != subject.texture ? p->strength : 0.0; break;
        case PerturbationKind::intensity_jitter: d = std::abs(p->intensity_delta) / kIntensityRange; break;
    }
    return std::clamp(d, 0.0, 1.0);
}

GateResult quality_gate(const PreferenceQuadruplet& q, const GateThresholds& thresholds) {
    const std::size_t n = q.subjects.size();
    GateResult g;
    if (n == 0 || q.reference_count() != n) return g;

    // Winner: fraction of visible subject pixels that disagree with the
    // reference crop at the same subject-relative offset.
    const auto supports = subject_supports(q);
    const int rs = static_cast<int>(q.x_r.dim(1));
    const int centre = rs / 2;
    double dist_w = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& s = q.subjects[k];
        double seen = 0.0, mismatched = 0.0;
        for (std::size_t r = 0; r < q.x0_w.dim(0); ++r) {
            for (std::size_t c = 0; c < q.x0_w.dim(1); ++c) {
                if (supports[k].at(r, c) == 0.0) continue;
                const int rr = centre + static_cast<int>(r) - s.row;
                const int cc = centre + static_cast<int>(c) - s.col;
                seen += 1.0;
                if (rr < 0 || cc < 0 || rr >= rs || cc >= rs ||
                    std::abs(q.x0_w.at(r, c) - q.x_r.at(k, static_cast<std::size_t>(rr), static_cast<std::size_t>(cc))) > 1e-12) {
                    mismatched += 1.0;
                }
            }
        }
        dist_w += seen > 0.0 ? mismatched / seen : 1.0;
    }
    dist_w /= static_cast<double>(n);

    double dist_l = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const SubjectPerturbation* p = nullptr;
        for (const auto& cand : q.provenance.perturbations)
            if (cand.subject == k) p = &cand;
        dist_l += attribute_distance(q.subjects[k], p);
    }
    dist_l /= static_cast<double>(n);

    g.score_w = 10.0 * (1.0 - dist_w);
    g.score_l = 10.0 * (1.0 - dist_l);
    g.accept = g.score_w >= thresholds.min_score_w && g.score_l <= thresholds.max_score_l && q.m_prior.count() > 0;
    return g;
}

Dataset generate_corpus(const DipConfig& cfg, std::uint64_t seed, const GateThresholds& thresholds) {
    cfg.validate();
    Dataset out;
    const std::size_t total = cfg.single_pairs + cfg.multi_pairs;
    for (std::size_t i = 0; i < total; ++i) {
        const std::uint64_t pair_seed = splitmix64(seed ^ splitmix64(i + 1));
        Rng count_rng = Rng::derive(pair_seed, 0xc0ffee);
        const std::size_t n = i < cfg.single_pairs ? 1 : static_cast<std::size_t>(count_rng.uniform_int(2, 3));
        bool accepted = false;
        for (int attempt = 0; attempt < cfg.max_gate_attempts && !accepted; ++attempt) {
            Rng rng = Rng::derive(pair_seed, static_cast<std::uint64_t>(attempt));
            const auto subjects = random_subjects(rng, n, cfg);
            PreferenceQuadruplet q;
            try {
                q = synthesize_pair(subjects, rng.next_u64(), n, cfg);
            } catch (const DataError&) {
                continue;  // placement failed; draw fresh attributes
            }
            const GateResult g = quality_gate(q, thresholds);
            if (!g.accept) continue;
            q.id = i;
            q.score_w = g.score_w;
            q.score_l = g.score_l;
            q.provenance.gate_attempts = attempt + 1;
            out.push_back(std::move(q));
            accepted = true;
        }
        if (!accepted) {
            throw DataError("pair " + std::to_string(i) + ": no candidate passed the quality gate in " +
                            std::to_string(cfg.max_gate_attempts) + " attempts");
        }
    }
    return out;
}

namespace {

json subject_json(const SubjectSpec& s) {
    return {{"shape", to_string(s.shape)},   {"texture", to_string(s.texture)}, {"frequency", s.frequency},
            {"base_intensity", s.base_intensity}, {"row", s.row},           {"col", s.col},
            {"scale", s.scale}};
}

SubjectSpec subject_from_json(const json& j) {
    SubjectSpec s;
    s.shape = parse_shape(j.at("shape").get<std::string>());
    s.texture = parse_texture(j.at("texture").get<std::string>());
    s.frequency = j.at("frequency").get<double>();
    s.base_intensity = j.at("base_intensity").get<double>();
    s.row = j.at("row").get<int>();
    s.col = j.at("col").get<int>();
    s.scale = j.at("scale").get<double>();
    return s;
}

json record_json(const PreferenceQuadruplet& q, const std::string& dir) {
    json subjects = json::array();
    for (const auto& s : q.subjects) subjects.push_back(subject_json(s));
    json perts = json::array();
    for (const auto& p : q.provenance.perturbations) {
        perts.push_back({{"subject", p.subject},
                         {"kind", to_string(p.kind)},
                         {"strength", p.strength},
                         {"morph_shape", to_string(p.morph_shape)},
                         {"swap_texture", to_string(p.swap_texture)},
                         {"intensity_delta", p.intensity_delta}});
    }
    return {{"id", q.id},
            {"seed", q.seed},
            {"c", q.prompt_class},
            {"n_subjects", q.subjects.size()},
            {"subjects", subjects},
            {"provenance", {{"gate_attempts", q.provenance.gate_attempts}, {"perturbations", perts}}},
            {"score_w", q.score_w},
            {"score_l", q.score_l},
            {"dir", dir}};
}

std::string pair_dir_name(std::uint64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pair_%05llu", static_cast<unsigned long long>(id));
    return buf;
}

}  // namespace

Manifest write_dataset(const Dataset& pairs, const std::filesystem::path& dir, const GateThresholds& thresholds) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    std::string manifest;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& q = pairs[i];
        if (!quality_gate(q, thresholds).accept) {
            throw DataError("record " + std::to_string(i) + " (pair " + std::to_string(q.id) +
                            ") is not accepted by the quality gate");
        }
        const std::string name = pair_dir_name(q.id);
        try {
            fs::create_directories(dir / name);
            io::write_tensor(dir / name / "xr.fdt", q.x_r);
            io::write_tensor(dir / name / "x0w.fdt", q.x0_w);
            io::write_tensor(dir / name / "x0l.fdt", q.x0_l);
            io::write_tensor(dir / name / "mprior.fdt", q.m_prior.to_tensor());
        } catch (const std::exception& e) {
            throw IoError("record " + std::to_string(i) + ": " + e.what());
        }
        manifest += record_json(q, name).dump();
        manifest += '\n';
    }
    io::write_file(dir / "manifest.jsonl", manifest);
    return {pairs.size(), dir / "manifest.jsonl"};
}

Dataset read_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.jsonl";
    if (!std::filesystem::exists(manifest_path)) throw DataError("no dataset manifest at " + manifest_path.string());
    std::ifstream in(manifest_path);
    Dataset out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            PreferenceQuadruplet q;
            q.id = j.at("id").get<std::uint64_t>();
            q.seed = j.at("seed").get<std::uint64_t>();
            q.prompt_class = j.at("c").get<std::size_t>();
            for (const auto& s : j.at("subjects")) q.subjects.push_back(subject_from_json(s));
            const auto& prov = j.at("provenance");
            q.provenance.gate_attempts = prov.at("gate_attempts").get<int>();
            for (const auto& p : prov.at("perturbations")) {
                SubjectPerturbation sp;
                sp.subject = p.at("subject").get<std::size_t>();
                sp.kind = parse_perturbation(p.at("kind").get<std::string>());
                sp.strength = p.at("strength").get<double>();
                sp.morph_shape = parse_shape(p.at("morph_shape").get<std::string>());
                sp.swap_texture = parse_texture(p.at("swap_texture").get<std::string>());
                sp.intensity_delta = p.at("intensity_delta").get<double>();
                q.provenance.perturbations.push_back(sp);
            }
            q.score_w = j.at("score_w").get<double>();
            q.score_l = j.at("score_l").get<double>();
            const auto pd = dir / j.at("dir").get<std::string>();
            q.x_r = io::read_tensor(pd / "xr.fdt");
            q.x0_w = io::read_tensor(pd / "x0w.fdt");
            q.x0_l = io::read_tensor(pd / "x0l.fdt");
            q.m_prior = BinaryMask::from_tensor(io::read_tensor(pd / "mprior.fdt"));
            if (q.x_r.rank() != 3 || q.x0_w.rank() != 2 || q.x0_w.dims() != q.x0_l.dims()) {
                throw DataError("tensor ranks do not match the dataset layout");
            }
            if (q.x_r.dim(0) != q.subjects.size()) throw DataError("one reference crop per subject expected");
            out.push_back(std::move(q));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw DataError(manifest_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (out.empty()) throw DataError("dataset at " + dir.string() + " has no records");
    return out;
}

std::uint64_t dataset_fingerprint(const Dataset& pairs) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& q : pairs) {
        h = io::fnv1a(record_json(q, pair_dir_name(q.id)).dump(), h);
        h = io::fnv1a(io::encode_tensor(q.x_r), h);
        h = io::fnv1a(io::encode_tensor(q.x0_w), h);
        h = io::fnv1a(io::encode_tensor(q.x0_l), h);
        h = io::fnv1a(io::encode_tensor(q.m_prior.to_tensor()), h);
    }
    return h;
}

bool is_heldout(std::uint64_t pair_id) { return splitmix64(pair_id ^ 0x5eedULL) % 10 == 0; }

DatasetSplit split_dataset(const Dataset& pairs) {
    DatasetSplit s;
    for (const auto& q : pairs) (is_heldout(q.id) ? s.heldout : s.train).push_back(q);
    return s;
}

}  // namespace focusdpo::dip
