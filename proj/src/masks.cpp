#include "focusdpo/masks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "focusdpo/error.hpp"
#include "focusdpo/log.hpp"

namespace focusdpo {

BinaryMask::BinaryMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits)
    : rows_(rows), cols_(cols), bits_(std::move(bits)) {
    if (bits_.size() != rows_ * cols_) throw ShapeError("binary mask length does not match its dims");
    for (auto& b : bits_) {
        if (b > 1) throw RangeError("binary mask entries must be 0 or 1");
    }
}

BinaryMask BinaryMask::ones(std::size_t rows, std::size_t cols) {
    return BinaryMask(rows, cols, std::vector<std::uint8_t>(rows * cols, 1));
}

BinaryMask BinaryMask::from_tensor(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("binary mask tensor must be 2-D");
    std::vector<std::uint8_t> bits(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] != 0.0 && t[i] != 1.0) throw DataError("binary mask tensor holds a value other than 0 or 1");
        bits[i] = t[i] == 1.0 ? 1 : 0;
    }
    return BinaryMask(t.dim(0), t.dim(1), std::move(bits));
}

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

Tensor BinaryMask::to_tensor() const {
    Tensor t({rows_, cols_});
    for (std::size_t i = 0; i < bits_.size(); ++i) t[i] = bits_[i];
    return t;
}

namespace {

template <class A, class B>
void require_same_grid(const A& a, const B& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": mask grids differ (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                         ")");
    }
}

}  // namespace

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
    require_same_grid(a, b, "mask_union");
    BinaryMask out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.set(i, a[i] || b[i]);
    return out;
}

BinaryMask mask_difference(const BinaryMask& a, const BinaryMask& b) {
    require_same_grid(a, b, "mask_difference");
    BinaryMask out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.set(i, a[i] && !b[i]);
    return out;
}

WeightMask::WeightMask(std::size_t rows, std::size_t cols, std::vector<double> weights)
    : rows_(rows), cols_(cols), w_(std::move(weights)) {
    if (w_.size() != rows_ * cols_) throw ShapeError("weight mask length does not match its dims");
    for (double v : w_) {
        if (!(v >= 0.0 && v <= 1.0)) throw RangeError("weight mask entries must lie in [0, 1]");
    }
}

WeightMask WeightMask::from_binary(const BinaryMask& m) {
    WeightMask w(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) w[i] = m[i] ? 1.0 : 0.0;
    return w;
}

Tensor WeightMask::to_tensor() const { return Tensor({rows_, cols_}, w_); }

Tensor WeightMask::upsample(std::size_t patch) const {
    Tensor t({rows_ * patch, cols_ * patch});
    for (std::size_t r = 0; r < rows_ * patch; ++r)
        for (std::size_t c = 0; c < cols_ * patch; ++c) t.at(r, c) = w_[(r / patch) * cols_ + c / patch];
    return t;
}

const char* to_string(FusionVariant v) {
    switch (v) {
        case FusionVariant::full: return "full";
        case FusionVariant::prior_only: return "prior_only";
        case FusionVariant::density_only: return "density_only";
        case FusionVariant::prior_free: return "prior_free";
        case FusionVariant::no_Ms: return "no_Ms";
        case FusionVariant::no_Md: return "no_Md";
    }
    return "?";
}

FusionVariant parse_variant(const std::string& name) {
    for (auto v : all_variants())
        if (name == to_string(v)) return v;
    throw ConfigError("unknown fusion variant '" + name + "'");
}

const std::vector<FusionVariant>& all_variants() {
    static const std::vector<FusionVariant> v = {FusionVariant::full,       FusionVariant::prior_only,
                                                 FusionVariant::density_only, FusionVariant::prior_free,
                                                 FusionVariant::no_Ms,      FusionVariant::no_Md};
    return v;
}

void FusionConfig::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (entropy_bins < 2) throw ConfigError("entropy_bins must be >= 2");
}

Tensor correspondence_scores(const AttentionTrace& trace, std::size_t ref_index) {
    const std::size_t layers = trace.layers();
    if (layers == 0) throw ShapeError("attention trace has no layers");
    if (ref_index >= trace.reference_count()) throw RangeError("reference index out of range");
    const std::size_t pt = trace.target.front().dim(0);
    const std::size_t d = trace.target.front().dim(1);
    Tensor scores({pt});
    std::size_t degenerate = 0;
    for (std::size_t li = 0; li < layers; ++li) {
        const Tensor& ht = trace.target[li];
        const Tensor& hr = trace.references[li][ref_index];
        if (ht.dim(0) != pt || ht.dim(1) != d || hr.dim(1) != d) throw ShapeError("inconsistent trace shapes");

        std::vector<double> cls(d, 0.0);
        for (std::size_t i = 0; i < hr.dim(0); ++i)
            for (std::size_t j = 0; j < d; ++j) cls[j] += hr.at(i, j);
        double cls_norm = 0.0;
        for (auto& v : cls) {
            v /= static_cast<double>(hr.dim(0));
            cls_norm += v * v;
        }
        cls_norm = std::sqrt(cls_norm);

        for (std::size_t tok = 0; tok < pt; ++tok) {
            double dotp = 0.0, norm = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dotp += cls[j] * ht.at(tok, j);
                norm += ht.at(tok, j) * ht.at(tok, j);
            }
            norm = std::sqrt(norm);
            if (cls_norm == 0.0 || norm == 0.0) {
                ++degenerate;
                continue;
            }
            scores[tok] += dotp / (cls_norm * norm) / static_cast<double>(layers);
        }
    }
    if (degenerate) {
        log::warn("correspondence_scores: " + std::to_string(degenerate) + " zero-norm vectors scored as 0");
    }
    return scores;
}

BinaryMask topk_mask(const Tensor& scores, std::size_t k, std::size_t rows, std::size_t cols) {
    const std::size_t n = scores.size();
    if (rows * cols != n) throw ShapeError("score vector does not match the token grid");
    if (k < 1 || k > n) throw RangeError("top-K needs 1 <= K <= " + std::to_string(n) + ", got " + std::to_string(k));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    BinaryMask m(rows, cols);
    for (std::size_t i = 0; i < k; ++i) m.set(idx[i], true);
    return m;
}

StructureField structure_field(const AttentionTrace& trace, const BinaryMask& m_prior,
                               const std::vector<std::size_t>& ref_token_counts) {
    const std::size_t prior = m_prior.count();
    if (prior == 0) throw DataError("M_prior is empty; the record cannot be weighted");
    if (ref_token_counts.size() != trace.reference_count()) {
        throw ShapeError("need one reference token count per reference in the trace");
    }
    if (ref_token_counts.empty()) throw ShapeError("structure field needs at least one reference");

    StructureField out;
    out.attention = BinaryMask(m_prior.rows(), m_prior.cols());
    for (std::size_t r = 0; r < ref_token_counts.size(); ++r) {
        const Tensor s = correspondence_scores(trace, r);
        const std::size_t k = std::min(ref_token_counts[r], s.size());
        out.attention = mask_union(out.attention, topk_mask(s, k, m_prior.rows(), m_prior.cols()));
    }
    out.structure = mask_difference(m_prior, out.attention);
    out.a_focus = static_cast<double>(out.structure.count()) / static_cast<double>(prior);
    return out;
}

Tensor patch_entropy(const Tensor& image, std::size_t patch, int bins) {
    if (image.rank() != 2) throw ShapeError("complexity field expects a [H x W] image");
    if (bins < 2) throw ConfigError("entropy needs at least 2 bins");
    if (patch == 0 || image.dim(0) % patch || image.dim(1) % patch) {
        throw ShapeError("patch size does not divide the image " + dims_to_string(image.dims()));
    }
    const std::size_t gh = image.dim(0) / patch, gw = image.dim(1) / patch;
    const double area = static_cast<double>(patch * patch);
    bool clamped = false;
    Tensor out({gh, gw});
    std::vector<std::size_t> hist(static_cast<std::size_t>(bins));
    for (std::size_t pr = 0; pr < gh; ++pr) {
        for (std::size_t pc = 0; pc < gw; ++pc) {
            std::fill(hist.begin(), hist.end(), 0);
            for (std::size_t r = pr * patch; r < (pr + 1) * patch; ++r) {
                for (std::size_t c = pc * patch; c < (pc + 1) * patch; ++c) {
                    double v = image.at(r, c);
                    if (!(v >= 0.0 && v <= 1.0)) {
                        clamped = true;
                        v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
                    }
                    const auto b = std::min(static_cast<std::size_t>(v * bins), static_cast<std::size_t>(bins - 1));
                    ++hist[b];
                }
            }
            double h = 0.0;
            for (std::size_t count : hist) {
                if (count == 0) continue;
                const double q = static_cast<double>(count) / area;
                h -= q * std::log2(q);
            }
            out.at(pr, pc) = h;
        }
    }
    if (clamped) log::warn("complexity_field: pixel values outside [0,1] were clamped");
    return out;
}

WeightMask minmax_normalize(const Tensor& scores) {
    if (scores.rank() != 2) throw ShapeError("minmax_normalize expects a 2-D score grid");
    const auto [lo, hi] = std::minmax_element(scores.data().begin(), scores.data().end());
    const double cmin = *lo, cmax = *hi;
    WeightMask m(scores.dim(0), scores.dim(1));
    if (cmax == cmin) return m;
    for (std::size_t i = 0; i < scores.size(); ++i) m[i] = std::clamp((scores[i] - cmin) / (cmax - cmin), 0.0, 1.0);
    return m;
}

WeightMask complexity_field(const Tensor& image, std::size_t patch, int bins) {
    return minmax_normalize(patch_entropy(image, patch, bins));
}

FusedMask fuse(const BinaryMask& m_s, const WeightMask& m_d, const BinaryMask& m_prior, double a_focus,
               const FusionConfig& cfg) {
    require_same_grid(m_s, m_d, "fuse");
    require_same_grid(m_s, m_prior, "fuse");
    const std::size_t n = m_s.size();
    FusedMask out;
    out.mask = WeightMask(m_s.rows(), m_s.cols());
    auto blend = [&](bool restrict_to_prior) {
        for (std::size_t i = 0; i < n; ++i) {
            const double density = restrict_to_prior ? m_d[i] * (m_prior[i] ? 1.0 : 0.0) : m_d[i];
            out.mask[i] = std::clamp(cfg.gamma * (m_s[i] ? 1.0 : 0.0) + (1.0 - cfg.gamma) * density, 0.0, 1.0);
        }
    };
    auto take_structure = [&] {
        out.mask = WeightMask::from_binary(m_s);
        out.structure_branch = true;
    };

    switch (cfg.variant) {
        case FusionVariant::full:
            if (a_focus > cfg.tau) take_structure();
            else blend(true);
            break;
        case FusionVariant::prior_free:
            if (a_focus > cfg.tau) take_structure();
            else blend(false);
            break;
        case FusionVariant::prior_only:
            out.mask = WeightMask::from_binary(m_prior);
            break;
        case FusionVariant::density_only:
            out.mask = m_d;
            break;
        case FusionVariant::no_Ms:
            for (std::size_t i = 0; i < n; ++i) out.mask[i] = m_prior[i] ? m_d[i] : 0.0;
            break;
        case FusionVariant::no_Md:
            take_structure();
            break;
    }
    return out;
}

}  // namespace focusdpo
