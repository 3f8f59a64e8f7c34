#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "uninpaint/baselines.hpp"
#include "uninpaint/data.hpp"
#include "uninpaint/evaluation.hpp"
#include "uninpaint/nets.hpp"
#include "uninpaint/training.hpp"

namespace uninpaint {

struct DataConfig {
    std::int64_t resolution = 64;
    CropMode crop = CropMode::CenterSquare;
    double holdout_fraction = 0.15;
    std::int64_t synthetic_count = 2000; // used by `ingest --synthetic`
};

struct EvalConfig {
    std::int64_t n_z = 10;
    std::int64_t max_images = 1000;
    std::int64_t batch_size = 64;
    std::uint64_t embedder_seed = kDefaultEmbedderSeed;
};

// Everything a CLI verb needs. JSON layout:
//   {"models": ModelSpecs, "train": TrainConfig, "baseline": {...},
//    "data": {...}, "eval": {...}}
struct ExperimentConfig {
    ModelSpecs models = desk_specs();
    TrainConfig train;
    BaselineConfig baseline; // kind/train are filled in from the verb
    DataConfig data;
    EvalConfig eval;

    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

// Full default document; every overridable key is present.
nlohmann::json default_config_json();

// Defaults, then the file (if non-empty), then environment overrides.
nlohmann::json load_config_json(const std::filesystem::path& path, const std::map<std::string, std::string>& env);

// "train.total_steps=100": the value is parsed as JSON, falling back to a
// plain string. Unknown keys are a ConfigError.
void apply_override(nlohmann::json& config, const std::string& assignment);
void apply_override(nlohmann::json& config, const std::string& dotted_key, const std::string& value);

// UNINPAINT_TRAIN__TOTAL_STEPS=100 sets train.total_steps; "__" separates
// levels and names are lower-cased.
inline constexpr const char* kEnvPrefix = "UNINPAINT_";
void apply_env_overrides(nlohmann::json& config, const std::map<std::string, std::string>& env);

// Snapshot of the process environment restricted to kEnvPrefix variables.
std::map<std::string, std::string> prefixed_environment();

} // namespace uninpaint
