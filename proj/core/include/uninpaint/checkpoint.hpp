#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>

#include "uninpaint/training.hpp"

namespace uninpaint {

inline constexpr std::int64_t kCheckpointSchemaVersion = 1;

// A checkpoint is a single torch archive holding
//   schema_version, kind ("unsupervised"), specs and config as JSON strings,
//   counters (step, micro_step, seed), the parameters and buffers of every
//   network under its name ("generator", "discriminator", "encoder"), the
//   Adam moments of every optimizer and any queued micro-batches.
// The random streams are counter based, so the counters fully restore them.
void checkpoint_save(const TrainState& state, const TrainConfig& cfg, const std::filesystem::path& path);
void checkpoint_save(const TrainState& state, const TrainConfig& cfg, std::ostream& out);

// Throws CheckpointError on unreadable archives or schema mismatch. Nothing is
// returned unless the whole archive loaded.
TrainState checkpoint_load(const std::filesystem::path& path, TrainConfig* cfg_out = nullptr);
TrainState checkpoint_load(std::istream& in, TrainConfig* cfg_out = nullptr);

// Reads only the kind tag of a checkpoint ("unsupervised", "unpaired", ...).
std::string checkpoint_kind(const std::filesystem::path& path);

namespace archive {

void write_json(torch::serialize::OutputArchive& ar, const std::string& key, const nlohmann::json& j);
nlohmann::json read_json(torch::serialize::InputArchive& ar, const std::string& key);
void write_int(torch::serialize::OutputArchive& ar, const std::string& key, std::int64_t v);
std::int64_t read_int(torch::serialize::InputArchive& ar, const std::string& key);
void write_string(torch::serialize::OutputArchive& ar, const std::string& key, const std::string& s);
std::string read_string(torch::serialize::InputArchive& ar, const std::string& key);
void write_module(torch::serialize::OutputArchive& ar, const std::string& key, const torch::nn::Module& m);
void read_module(torch::serialize::InputArchive& ar, const std::string& key, torch::nn::Module& m);
void write_optimizer(torch::serialize::OutputArchive& ar, const std::string& key, const torch::optim::Optimizer& o);
void read_optimizer(torch::serialize::InputArchive& ar, const std::string& key, torch::optim::Optimizer& o);
// Checks schema_version and wraps torch loading errors in CheckpointError.
void check_schema(torch::serialize::InputArchive& ar, const std::string& expected_kind);
void load_archive(torch::serialize::InputArchive& ar, std::istream& in);
void load_archive(torch::serialize::InputArchive& ar, const std::filesystem::path& path);
// Replaces the random serialization id of a saved archive with a content hash.
void make_deterministic(std::string& bytes);
std::string serialize(torch::serialize::OutputArchive& ar);
// Writes to a sibling temporary file and renames it into place.
void save_archive(torch::serialize::OutputArchive& ar, const std::filesystem::path& path);

} // namespace archive

} // namespace uninpaint
