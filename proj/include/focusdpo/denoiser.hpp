#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "focusdpo/tensor.hpp"

namespace focusdpo {

struct DenoiserConfig {
    std::size_t image_h = 32;
    std::size_t image_w = 32;
    std::size_t patch = 4;
    std::size_t ref_h = 16;
    std::size_t ref_w = 16;
    std::size_t width = 16;        // token embedding dim d
    std::size_t layers = 2;        // N joint attention layers
    std::size_t ffn_hidden = 32;
    std::size_t max_refs = 3;
    std::size_t prompt_classes = 18;
    std::size_t time_buckets = 16;
    int timesteps = 1000;

    std::size_t grid_h() const { return image_h / patch; }
    std::size_t grid_w() const { return image_w / patch; }
    std::size_t target_tokens() const { return grid_h() * grid_w(); }
    std::size_t ref_tokens() const { return (ref_h / patch) * (ref_w / patch); }
    std::size_t patch_area() const { return patch * patch; }
    std::size_t time_bucket(int t) const;

    /// Throws ConfigError on inconsistent sizes.
    void validate() const;
    friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

struct LayerParams {
    Tensor wq, wk, wv, wo;  // [d x d]
    Tensor w1, b1;          // [d x f], [f]
    Tensor w2, b2;          // [f x d], [d]
};

/// Trainable state of the toy denoiser. Gradients use the same type.
struct DenoiserParams {
    DenoiserConfig config;
    Tensor w_in, b_in;        // patch embed [P^2 x d], [d]
    Tensor pos_target;        // [p_xt x d]
    Tensor pos_ref;           // [p_xr x d]
    Tensor ref_index;         // [max_refs x d]
    Tensor prompt;            // [classes x d]
    Tensor time;              // [buckets x d]
    std::vector<LayerParams> layers;
    Tensor w_out, b_out;      // patch unembed [d x P^2], [P^2]

    /// Bumped by every in-place update so saved activations can detect
    /// that they no longer belong to these parameters.
    std::uint64_t generation = 0;

    static DenoiserParams initialize(const DenoiserConfig& config, std::uint64_t seed);
    static DenoiserParams zeros(const DenoiserConfig& config);

    std::vector<std::pair<std::string, Tensor*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
    std::size_t parameter_count() const;
    bool all_finite() const;
};

Tensor flatten(const DenoiserParams& params);
void unflatten(const Tensor& flat, DenoiserParams& params);

/// Conditioning for one prediction: prompt class c, reference images x_r
/// and the timestep t.
struct ConditionBundle {
    std::size_t prompt_class = 0;
    std::vector<Tensor> references;
    int timestep = 1;
};

/// Post-attention, pre-feed-forward token embeddings per layer.
struct AttentionTrace {
    std::vector<Tensor> target;                  // N x [p_xt x d]
    std::vector<std::vector<Tensor>> references; // N x R x [p_xr x d]

    std::size_t layers() const { return target.size(); }
    std::size_t reference_count() const { return references.empty() ? 0 : references.front().size(); }
};

struct LayerActivations {
    Tensor input, q, k, v, attn, mixed, post_attn, pre_act, act;
};

/// Everything backward needs from one forward call.
struct SavedActivations {
    const DenoiserParams* owner = nullptr;
    std::uint64_t generation = 0;
    Tensor target_patches;
    std::vector<Tensor> ref_patches;
    std::vector<LayerActivations> layers;
    Tensor final_tokens;
    std::size_t bucket = 0;
    std::size_t prompt_class = 0;
};

struct ForwardPass {
    Tensor eps_hat;
    std::optional<AttentionTrace> trace;
    SavedActivations saved;
};

ForwardPass forward(const DenoiserParams& params, const Tensor& x_t, const ConditionBundle& cond, bool capture);

/// Prediction only.
Tensor denoise(const DenoiserParams& params, const Tensor& x_t, const ConditionBundle& cond);

/// Exact vector-Jacobian product of eps_hat with respect to every parameter.
DenoiserParams backward(const DenoiserParams& params, const SavedActivations& saved, const Tensor& g_eps);

/// Immutable snapshot used as the reference model.
class FrozenDenoiser {
public:
    explicit FrozenDenoiser(DenoiserParams params);

    const DenoiserParams& params() const { return *params_; }
    Tensor predict(const Tensor& x_t, const ConditionBundle& cond) const { return denoise(*params_, x_t, cond); }
    ForwardPass forward(const Tensor& x_t, const ConditionBundle& cond, bool capture) const;

private:
    std::shared_ptr<const DenoiserParams> params_;
};

FrozenDenoiser clone_frozen(const DenoiserParams& params);

/// [H x W] image -> [tokens x P^2] rows, token order row-major over the grid.
Tensor patchify(const Tensor& image, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, std::size_t h, std::size_t w, std::size_t patch);

void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params);
DenoiserParams load_checkpoint(const std::filesystem::path& path);

}  // namespace focusdpo
