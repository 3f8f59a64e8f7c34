#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "uninpaint/corruption.hpp"

namespace uninpaint {

// A micro-batch of observations with their stored masks.
struct ObservationBatch {
    torch::Tensor y;    // [B, C, H, W]
    torch::Tensor mask; // [B, 1, H, W]
    std::vector<std::int64_t> ids;

    std::int64_t size() const { return y.defined() ? y.size(0) : 0; }
};

// In-memory corrupted dataset. `clean` is only populated for evaluation and
// supervised baselines; the unsupervised training path never reads it.
struct ObservationSet {
    torch::Tensor y;     // [N, C, H, W]
    torch::Tensor mask;  // [N, 1, H, W]
    torch::Tensor clean; // [N, C, H, W] or undefined
    std::vector<std::string> source_ids;

    std::int64_t size() const { return y.defined() ? y.size(0) : 0; }
    bool has_clean() const { return clean.defined(); }

    ObservationBatch batch(std::span<const std::int64_t> indices) const;
    ObservationSet subset(std::span<const std::int64_t> indices) const;
    // Checks shapes and that masked pixels are exactly zero.
    void validate() const;
};

// Training iteration order: sample position p maps to epoch p / N and to the
// (p mod N)-th entry of a permutation that depends only on (seed, epoch).
class DataOrder {
public:
    DataOrder(std::uint64_t seed, std::int64_t size);

    std::int64_t at(std::int64_t position);
    std::vector<std::int64_t> range(std::int64_t first_position, std::int64_t count);
    std::vector<std::int64_t> epoch_permutation(std::int64_t epoch) const;

private:
    std::uint64_t seed_;
    std::int64_t size_;
    std::int64_t cached_epoch_ = -1;
    std::vector<std::int64_t> cached_;
};

// Applies one mask per image (corrupt-once). Mask i comes from the
// CorruptOnce stream keyed on (seed, i).
ObservationSet corrupt_once(const torch::Tensor& clean, const MeasurementConfig& cfg, std::uint64_t seed,
                            bool keep_clean);

enum class Split { Train, Holdout };

std::string to_string(Split s);
Split split_from_string(const std::string& name);

// Seeded uniform assignment with exactly floor(fraction * n) holdout items.
std::vector<Split> assign_splits(std::int64_t n, double holdout_fraction, std::uint64_t seed);
std::vector<std::int64_t> indices_of(const std::vector<Split>& splits, Split which);

enum class CropMode { CenterSquare, None };

std::string to_string(CropMode c);
CropMode crop_mode_from_string(const std::string& name);

// Largest centred square (CenterSquare) followed by a bilinear resize to
// out_size x out_size. Input [C, H, W].
torch::Tensor crop_and_resize(const torch::Tensor& image, CropMode crop, std::int64_t out_size);

// A directory of PNG images plus store.json listing them in a fixed order.
struct ImageStore {
    std::filesystem::path root;
    std::vector<std::string> source_ids;
    std::vector<std::string> files; // relative to root

    std::int64_t size() const { return static_cast<std::int64_t>(files.size()); }
    torch::Tensor load(std::int64_t i) const;
    torch::Tensor load_all() const;

    static ImageStore open(const std::filesystem::path& root);
};

struct IngestReport {
    std::int64_t written = 0;
    std::int64_t skipped = 0;
};

// Decodes every image file in src_dir (sorted by name), crops and resizes it,
// and writes the result as an image store. Undecodable files are skipped and
// counted; a directory without usable images is an error.
ImageStore ingest(const std::filesystem::path& src_dir, CropMode crop, std::int64_t out_size,
                  const std::filesystem::path& out_dir, IngestReport* report = nullptr);

// Writes in-memory images ([N, C, H, W]) as an image store.
ImageStore write_image_store(const torch::Tensor& images, const std::filesystem::path& out_dir,
                             const std::string& id_prefix = "img");

inline constexpr std::int64_t kManifestSchemaVersion = 1;

struct ManifestRecord {
    std::string source_id;
    std::string image_path;       // clean image in the store (evaluation only)
    std::string observation_path; // corrupted image
    std::string mask_path;
    MeasurementConfig config;
    Split split = Split::Train;

    bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
    std::vector<ManifestRecord> records;
    std::uint64_t seed = 0;
    double holdout_fraction = 0.15;
    std::int64_t schema_version = kManifestSchemaVersion;

    nlohmann::json to_json() const;
    static Manifest from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static Manifest load(const std::filesystem::path& path);
    std::vector<std::int64_t> indices(Split which) const;
};

// Corrupt-once dataset construction: one mask per store image, corrupted
// images and masks written under out_dir, manifest.json written last.
Manifest build_manifest(const ImageStore& store, const MeasurementConfig& cfg, std::uint64_t seed,
                        const std::filesystem::path& out_dir, double holdout_fraction = 0.15);

// Loads one split of a manifest. Paths resolve relative to `base_dir`;
// `with_clean` also reads the clean store images (for evaluation).
ObservationSet load_observations(const Manifest& manifest, const std::filesystem::path& base_dir, Split which,
                                 bool with_clean);

} // namespace uninpaint
