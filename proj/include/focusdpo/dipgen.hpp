#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "focusdpo/denoiser.hpp"
#include "focusdpo/masks.hpp"
#include "focusdpo/rng.hpp"
#include "focusdpo/tensor.hpp"

// Procedural disrupted-instance pairs: a reference crop per subject, a
// winning image with the same subjects on a different background, and a
// losing image that differs from the winner only inside the subject mask.
namespace focusdpo::dip {

enum class Shape { circle, square, triangle };
enum class Texture { stripes, checker, dots };
enum class PerturbationKind { texture_swap, intensity_jitter, shape_morph };

const char* to_string(Shape s);
const char* to_string(Texture t);
const char* to_string(PerturbationKind k);
Shape parse_shape(const std::string& s);
Texture parse_texture(const std::string& s);
PerturbationKind parse_perturbation(const std::string& s);

/// Identity attributes of one subject. (row, col) is the nominal centre in
/// target-image pixels.
struct SubjectSpec {
    Shape shape = Shape::circle;
    Texture texture = Texture::stripes;
    double frequency = 1.0;
    double base_intensity = 0.5;
    int row = 0;
    int col = 0;
    double scale = 4.0;

    friend bool operator==(const SubjectSpec&, const SubjectSpec&) = default;
};

struct SubjectPerturbation {
    std::size_t subject = 0;
    PerturbationKind kind = PerturbationKind::intensity_jitter;
    double strength = 0.0;
    Shape morph_shape = Shape::circle;
    Texture swap_texture = Texture::stripes;
    double intensity_delta = 0.0;

    friend bool operator==(const SubjectPerturbation&, const SubjectPerturbation&) = default;
};

struct Provenance {
    std::vector<SubjectPerturbation> perturbations;
    int gate_attempts = 1;

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct DipConfig {
    std::size_t image_size = 32;
    std::size_t ref_size = 16;
    std::size_t patch = 4;
    double strength = 0.6;         // nominal perturbation strength in [0, 1]
    double strength_jitter = 0.4;  // per-subject strength ~ strength * U(1-j, 1+j)
    double texture_amplitude = 0.25;
    double max_translation = 6.0;
    double max_overlap = 0.3;
    int max_placement_retries = 50;
    int max_gate_attempts = 20;
    std::size_t single_pairs = 200;
    std::size_t multi_pairs = 200;
    /// Perturbation families drawn from, uniformly.
    std::vector<PerturbationKind> kinds{PerturbationKind::texture_swap, PerturbationKind::intensity_jitter,
                                        PerturbationKind::shape_morph};

    double min_scale() const { return 0.25 * static_cast<double>(ref_size); }
    double max_scale() const { return 0.4 * static_cast<double>(ref_size); }
    void validate() const;
};

/// One training record (c, x_r, x_0^w, x_0^l, M_prior).
struct PreferenceQuadruplet {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    std::size_t prompt_class = 0;
    std::vector<SubjectSpec> subjects;  // as placed in the winning image
    Tensor x_r;                         // [R x ref x ref], one crop per subject
    Tensor x0_w;                        // [H x W]
    Tensor x0_l;                        // [H x W]
    BinaryMask m_prior;                 // token grid
    Provenance provenance;
    double score_w = 0.0;
    double score_l = 0.0;

    std::size_t reference_count() const { return x_r.empty() ? 0 : x_r.dim(0); }
    std::vector<Tensor> references() const;
    ConditionBundle condition(int timestep) const;
    /// Top-K budget per reference: the reference's own token count.
    std::vector<std::size_t> ref_token_counts(std::size_t patch) const;
};

using Dataset = std::vector<PreferenceQuadruplet>;

/// Random identity attributes for n subjects (positions are nominal).
std::vector<SubjectSpec> random_subjects(Rng& rng, std::size_t n, const DipConfig& cfg);

/// Renders one quadruplet from the first n_subjects specs. Placement and
/// perturbations are drawn from `seed`; scores are left at 0.
PreferenceQuadruplet synthesize_pair(const std::vector<SubjectSpec>& spec, std::uint64_t seed, std::size_t n_subjects,
                                     const DipConfig& cfg);

struct GateThresholds {
    double min_score_w = 9.0;
    double max_score_l = 6.0;
};

struct GateResult {
    bool accept = false;
    double score_w = 0.0;
    double score_l = 0.0;
};

/// Normalized attribute distance in [0, 1] of a subject's rendered appearance
/// from its reference, given the perturbation applied to it (if any).
double attribute_distance(const SubjectSpec& subject, const SubjectPerturbation* perturbation);

/// score = 10 (1 - mean attribute distance); accept iff w >= 9 and l <= 6.
GateResult quality_gate(const PreferenceQuadruplet& q, const GateThresholds& thresholds = {});

/// Seeded corpus: single-subject records first, then 2-3 subject records.
/// Each record retries with fresh attributes until the gate accepts it.
Dataset generate_corpus(const DipConfig& cfg, std::uint64_t seed, const GateThresholds& thresholds = {});

/// Pixel support of M_prior at image resolution.
Tensor prior_pixel_support(const PreferenceQuadruplet& q);

/// Visible support of each subject in the winning image, [H x W] in {0,1}.
std::vector<Tensor> subject_supports(const PreferenceQuadruplet& q);

struct Manifest {
    std::size_t pair_count = 0;
    std::filesystem::path path;
};

/// <dir>/manifest.jsonl plus <dir>/pair_<id>/{xr,x0w,x0l,mprior}.fdt.
Manifest write_dataset(const Dataset& pairs, const std::filesystem::path& dir,
                       const GateThresholds& thresholds = {});
Dataset read_dataset(const std::filesystem::path& dir);

/// Stable fingerprint over every tensor and record field.
std::uint64_t dataset_fingerprint(const Dataset& pairs);

struct DatasetSplit {
    Dataset train;
    Dataset heldout;
};

/// 90/10 split by a seed-stable hash of the pair id.
DatasetSplit split_dataset(const Dataset& pairs);
bool is_heldout(std::uint64_t pair_id);

}  // namespace focusdpo::dip
