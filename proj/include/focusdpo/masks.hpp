#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "focusdpo/denoiser.hpp"
#include "focusdpo/tensor.hpp"

namespace focusdpo {

/// {0,1} field on the token grid.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}
    BinaryMask(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits);

    static BinaryMask ones(std::size_t rows, std::size_t cols);
    static BinaryMask from_tensor(const Tensor& t);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return bits_.size(); }
    bool operator[](std::size_t i) const { return bits_[i] != 0; }
    void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }
    bool at(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
    std::size_t count() const;
    const std::vector<std::uint8_t>& bits() const { return bits_; }

    Tensor to_tensor() const;

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b);
/// a AND NOT b
BinaryMask mask_difference(const BinaryMask& a, const BinaryMask& b);

/// [0,1]-valued field on the token grid.
class WeightMask {
public:
    WeightMask() = default;
    WeightMask(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), w_(rows * cols, fill) {}
    WeightMask(std::size_t rows, std::size_t cols, std::vector<double> weights);

    static WeightMask from_binary(const BinaryMask& m);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return w_.size(); }
    double operator[](std::size_t i) const { return w_[i]; }
    double& operator[](std::size_t i) { return w_[i]; }
    const std::vector<double>& weights() const { return w_; }

    /// [rows x cols] tensor.
    Tensor to_tensor() const;
    /// Nearest-neighbour expansion to pixel resolution, [rows*patch x cols*patch].
    Tensor upsample(std::size_t patch) const;

    friend bool operator==(const WeightMask&, const WeightMask&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> w_;
};

enum class FusionVariant { full, prior_only, density_only, prior_free, no_Ms, no_Md };

const char* to_string(FusionVariant v);
FusionVariant parse_variant(const std::string& name);
const std::vector<FusionVariant>& all_variants();

struct FusionConfig {
    double tau = 0.1;     // focus threshold
    double gamma = 0.3;   // structure/complexity trade-off
    int entropy_bins = 32;
    FusionVariant variant = FusionVariant::full;

    void validate() const;
};

/// Mean over layers of cos(mean-pooled reference tokens, each target token).
/// Zero-norm vectors contribute 0 for that layer and token.
Tensor correspondence_scores(const AttentionTrace& trace, std::size_t ref_index);

/// Exactly K ones at the K largest scores; ties go to the lower flat index.
BinaryMask topk_mask(const Tensor& scores, std::size_t k, std::size_t rows, std::size_t cols);

struct StructureField {
    BinaryMask attention;  // union of per-reference top-K maps (M')
    BinaryMask structure;  // prior AND NOT attention (M_s)
    double a_focus = 0.0;  // |M_s|_1 / |M_prior|_1
};

StructureField structure_field(const AttentionTrace& trace, const BinaryMask& m_prior,
                               const std::vector<std::size_t>& ref_token_counts);

/// Per-patch Shannon entropy (bits) of a `bins`-bin intensity histogram,
/// [grid_h x grid_w]. Values outside [0,1] are clamped with a warning.
Tensor patch_entropy(const Tensor& image, std::size_t patch, int bins);

/// (c - min) / (max - min); all zeros when max == min.
WeightMask minmax_normalize(const Tensor& scores);

/// Normalized per-patch complexity (M_d).
WeightMask complexity_field(const Tensor& image, std::size_t patch, int bins);

struct FusedMask {
    WeightMask mask;
    bool structure_branch = false;  // true when the result is M_s itself
};

FusedMask fuse(const BinaryMask& m_s, const WeightMask& m_d, const BinaryMask& m_prior, double a_focus,
               const FusionConfig& cfg);

}  // namespace focusdpo
