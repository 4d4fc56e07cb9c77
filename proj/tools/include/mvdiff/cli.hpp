#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace mvdiff::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Environment variable naming the directory for outputs given without --out.
inline constexpr const char* kOutDirEnv = "MVDIFF_OUT_DIR";

/// `args` excludes the program name. Usage errors return 2, library errors 1.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Full configuration of a named profile ("desk" or "full"), sections
/// cohort, data, diffusion, impute, predictor and evaluate.
nlohmann::json profile_config(std::string_view name);

/// Later layers win; a key absent from `base` is a ConfigError naming it.
void merge_config(nlohmann::json& base, const nlohmann::json& layer);

}  // namespace mvdiff::cli
