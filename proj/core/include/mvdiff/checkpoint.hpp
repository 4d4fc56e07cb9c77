#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "mvdiff/autodiff.hpp"

namespace mvdiff::numerics {

inline constexpr int kCheckpointSchema = 1;

struct Checkpoint {
  ParameterStore params;
  nlohmann::json hyperparameters;
};

/// Writes `dir/manifest.json` and `dir/weights.bin` (little-endian float32,
/// parameters concatenated in store order). Creates `dir` if needed.
void save_checkpoint(const std::filesystem::path& dir, const ParameterStore& params,
                     const nlohmann::json& hyperparameters);

Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Rounds every value through float32, matching what a save/load cycle does.
void round_to_float32(ParameterStore& params);

}  // namespace mvdiff::numerics
