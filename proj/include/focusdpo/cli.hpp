#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "focusdpo/error.hpp"
#include "focusdpo/masks.hpp"
#include "focusdpo/tensor.hpp"

namespace focusdpo::cli {

enum ExitCode { ok = 0, usage = 2, config = 3, data = 4, numeric = 5, internal = 70 };

/// Exit code for a library error kind.
int exit_code_for(ErrorKind kind);

/// Binary PGM (P5, maxval 255), value round(255 w), row-major.
void emit_pgm(const WeightMask& mask, const std::filesystem::path& path);
/// Grayscale values in [0, 1] as a [rows x cols] tensor.
Tensor read_pgm(const std::filesystem::path& path);

/// Every configurable key with its default value, grouped by section.
nlohmann::json default_config();

/// Applies one "section.key=value" override. The value is parsed as JSON when
/// possible and otherwise taken as a string; it must match the default's type.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Recursively merges `patch` into `config`; unknown keys throw ConfigError.
void merge_config(nlohmann::json& config, const nlohmann::json& patch, const std::string& where);

/// Entry point shared by the binary and the tests. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace focusdpo::cli
