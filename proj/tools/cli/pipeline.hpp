#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include <json.hpp>

namespace bsift::cli {

using Logger = std::function<void(const std::string&)>;

// Runs dataset -> attack -> train -> score -> detect -> eval [-> retrain]
// from a JSON config with sections {dataset, attack, train, detect, eval}
// and writes every artifact plus manifest.json under `out`. Throws
// ConfigError for malformed configs and StageError for stage failures.
nlohmann::json run_pipeline(const nlohmann::json& config, const std::filesystem::path& out, const Logger& log);

// Section names every pipeline config must contain.
inline constexpr const char* kPipelineSections[] = {"dataset", "attack", "train", "detect", "eval"};

}  // namespace bsift::cli
