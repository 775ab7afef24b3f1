#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "focusdpo/denoiser.hpp"
#include "focusdpo/trainer.hpp"

namespace focusdpo {

struct GradcheckConfig {
    DenoiserConfig model = toy_model();
    int seeds = 10;
    std::uint64_t first_seed = 0;
    double eps = 3e-5;
    double tolerance = 1e-4;
    /// Reference parameters are the policy plus N(0, ref_offset^2) noise, so
    /// the log-sigmoid is probed away from zero.
    double ref_offset = 1e-4;

    static DenoiserConfig toy_model();
    void validate() const;
};

struct GradcheckCase {
    std::uint64_t seed = 0;
    int t = 0;
    double loss = 0.0;
    double max_rel_error = 0.0;
    std::string worst_parameter;  // "name[index]"
    double analytic = 0.0;
    double numeric = 0.0;
    bool pass = false;
};

/// Full masked preference loss through the denoiser against central finite
/// differences over every parameter. Each seed draws random winning/losing
/// images, one reference crop, a nonempty prior, t and a shared noise draw.
std::vector<GradcheckCase> run_gradcheck(const GradcheckConfig& cfg);

}  // namespace focusdpo
