#include "uninpaint/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "uninpaint/errors.hpp"
#include "uninpaint/image_io.hpp"
#include "uninpaint/rng.hpp"

namespace uninpaint {

namespace fs = std::filesystem;

ObservationBatch ObservationSet::batch(std::span<const std::int64_t> indices) const {
    auto idx = torch::tensor(std::vector<std::int64_t>(indices.begin(), indices.end()), torch::kInt64);
    return {y.index_select(0, idx), mask.index_select(0, idx), std::vector<std::int64_t>(indices.begin(), indices.end())};
}

ObservationSet ObservationSet::subset(std::span<const std::int64_t> indices) const {
    auto idx = torch::tensor(std::vector<std::int64_t>(indices.begin(), indices.end()), torch::kInt64);
    ObservationSet out;
    out.y = y.index_select(0, idx);
    out.mask = mask.index_select(0, idx);
    if (clean.defined()) {
        out.clean = clean.index_select(0, idx);
    }
    for (auto i : indices) {
        out.source_ids.push_back(source_ids.empty() ? std::to_string(i) : source_ids[static_cast<std::size_t>(i)]);
    }
    return out;
}

void ObservationSet::validate() const {
    if (!y.defined() || y.dim() != 4 || !mask.defined() || mask.dim() != 4 || mask.size(0) != y.size(0) ||
        mask.size(1) != 1 || mask.size(2) != y.size(2) || mask.size(3) != y.size(3)) {
        throw DataError("observation set tensors have inconsistent shapes");
    }
    if (clean.defined() && clean.sizes() != y.sizes()) {
        throw DataError("clean images do not match observations");
    }
    if ((y * (1.0 - mask)).abs().max().item<double>() != 0.0) {
        throw DataError("observation set has non-zero values in masked regions");
    }
}

DataOrder::DataOrder(std::uint64_t seed, std::int64_t size) : seed_(seed), size_(size) {
    if (size <= 0) {
        throw DataError("cannot iterate an empty dataset");
    }
}

std::vector<std::int64_t> DataOrder::epoch_permutation(std::int64_t epoch) const {
    auto engine = stream_engine(seed_, Stream::DataOrder, static_cast<std::uint64_t>(epoch));
    return permutation(size_, engine);
}

std::int64_t DataOrder::at(std::int64_t position) {
    const auto epoch = position / size_;
    if (epoch != cached_epoch_) {
        cached_ = epoch_permutation(epoch);
        cached_epoch_ = epoch;
    }
    return cached_[static_cast<std::size_t>(position % size_)];
}

std::vector<std::int64_t> DataOrder::range(std::int64_t first_position, std::int64_t count) {
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t p = first_position; p < first_position + count; ++p) {
        out.push_back(at(p));
    }
    return out;
}

ObservationSet corrupt_once(const torch::Tensor& clean, const MeasurementConfig& cfg, std::uint64_t seed,
                            bool keep_clean) {
    if (clean.dim() != 4) {
        throw ContractViolation("corrupt_once expects [N, C, H, W] images");
    }
    const auto n = clean.size(0);
    const auto h = clean.size(2);
    const auto w = clean.size(3);
    cfg.validate(h, w);
    ObservationSet out;
    out.mask = torch::empty({n, 1, h, w});
    for (std::int64_t i = 0; i < n; ++i) {
        auto engine = stream_engine(seed, Stream::CorruptOnce, static_cast<std::uint64_t>(i));
        out.mask[i][0].copy_(sample_mask(cfg, h, w, engine).bits());
        out.source_ids.push_back(std::to_string(i));
    }
    out.y = apply_measurement(clean, out.mask, cfg.tau);
    if (keep_clean) {
        out.clean = clean;
    }
    return out;
}

std::string to_string(Split s) {
    return s == Split::Train ? "train" : "holdout";
}

Split split_from_string(const std::string& name) {
    if (name == "train") {
        return Split::Train;
    }
    if (name == "holdout") {
        return Split::Holdout;
    }
    throw DataError("unknown split '" + name + "'");
}

std::vector<Split> assign_splits(std::int64_t n, double holdout_fraction, std::uint64_t seed) {
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
        throw ConfigError("holdout fraction must lie in [0, 1)");
    }
    const auto holdout = static_cast<std::int64_t>(std::floor(holdout_fraction * static_cast<double>(n) + 1e-9));
    auto engine = stream_engine(seed, Stream::Split);
    auto perm = permutation(n, engine);
    std::vector<Split> out(static_cast<std::size_t>(n), Split::Train);
    for (std::int64_t i = 0; i < holdout; ++i) {
        out[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = Split::Holdout;
    }
    return out;
}

std::vector<std::int64_t> indices_of(const std::vector<Split>& splits, Split which) {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i) {
        if (splits[i] == which) {
            out.push_back(static_cast<std::int64_t>(i));
        }
    }
    return out;
}

std::string to_string(CropMode c) {
    return c == CropMode::CenterSquare ? "center_square" : "none";
}

CropMode crop_mode_from_string(const std::string& name) {
    if (name == "center_square" || name == "center") {
        return CropMode::CenterSquare;
    }
    if (name == "none") {
        return CropMode::None;
    }
    throw ConfigError("unknown crop mode '" + name + "'");
}

torch::Tensor crop_and_resize(const torch::Tensor& image, CropMode crop, std::int64_t out_size) {
    if (image.dim() != 3 || out_size <= 0) {
        throw ContractViolation("crop_and_resize expects [C, H, W] and a positive size");
    }
    auto img = image;
    if (crop == CropMode::CenterSquare) {
        const auto side = std::min(img.size(1), img.size(2));
        const auto top = (img.size(1) - side) / 2;
        const auto left = (img.size(2) - side) / 2;
        img = img.slice(1, top, top + side).slice(2, left, left + side);
    }
    if (img.size(1) == out_size && img.size(2) == out_size) {
        return img.contiguous();
    }
    namespace F = torch::nn::functional;
    auto resized = F::interpolate(img.unsqueeze(0), F::InterpolateFuncOptions()
                                                         .size(std::vector<std::int64_t>{out_size, out_size})
                                                         .mode(torch::kBilinear)
                                                         .align_corners(false));
    return resized.squeeze(0).clamp(0.0, 1.0).contiguous();
}

namespace {

std::string indexed_name(const std::string& prefix, std::int64_t i, const char* ext) {
    std::ostringstream s;
    s << prefix << std::setw(6) << std::setfill('0') << i << ext;
    return s.str();
}

void write_json_file(const nlohmann::json& j, const fs::path& path) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) {
            throw IoError("cannot write '" + path.string() + "'");
        }
        out << j.dump(2) << '\n';
        if (!out) {
            throw IoError("failed writing '" + path.string() + "'");
        }
    }
    fs::rename(tmp, path);
}

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

ImageStore store_from_entries(const fs::path& out_dir, std::vector<std::string> ids, std::vector<std::string> files) {
    ImageStore store{out_dir, std::move(ids), std::move(files)};
    nlohmann::json j;
    j["schema_version"] = 1;
    j["images"] = nlohmann::json::array();
    for (std::size_t i = 0; i < store.files.size(); ++i) {
        j["images"].push_back({{"source_id", store.source_ids[i]}, {"path", store.files[i]}});
    }
    write_json_file(j, out_dir / "store.json");
    return store;
}

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

} // namespace

torch::Tensor ImageStore::load(std::int64_t i) const {
    return read_image(root / files.at(static_cast<std::size_t>(i)));
}

torch::Tensor ImageStore::load_all() const {
    std::vector<torch::Tensor> images;
    for (std::int64_t i = 0; i < size(); ++i) {
        images.push_back(load(i));
    }
    return torch::stack(images);
}

ImageStore ImageStore::open(const fs::path& root) {
    auto j = read_json_file(root / "store.json");
    ImageStore store;
    store.root = root;
    for (const auto& e : j.at("images")) {
        store.source_ids.push_back(e.at("source_id").get<std::string>());
        store.files.push_back(e.at("path").get<std::string>());
    }
    return store;
}

ImageStore ingest(const fs::path& src_dir, CropMode crop, std::int64_t out_size, const fs::path& out_dir,
                  IngestReport* report) {
    if (!fs::is_directory(src_dir)) {
        throw DataError("source directory '" + src_dir.string() + "' does not exist");
    }
    std::vector<fs::path> inputs;
    for (const auto& entry : fs::directory_iterator(src_dir)) {
        if (entry.is_regular_file() && is_image_file(entry.path())) {
            inputs.push_back(entry.path());
        }
    }
    std::sort(inputs.begin(), inputs.end());

    fs::create_directories(out_dir / "images");
    IngestReport counts;
    std::vector<std::string> ids;
    std::vector<std::string> files;
    for (const auto& path : inputs) {
        torch::Tensor img;
        try {
            img = read_image(path);
        } catch (const IoError& e) {
            std::cerr << "warning: skipping " << path << ": " << e.what() << '\n';
            ++counts.skipped;
            continue;
        }
        if (img.size(0) == 1) {
            img = img.expand({3, img.size(1), img.size(2)});
        }
        const auto rel = indexed_name("images/", counts.written, ".png");
        write_png(crop_and_resize(img, crop, out_size), out_dir / rel);
        ids.push_back(path.stem().string());
        files.push_back(rel);
        ++counts.written;
    }
    if (report != nullptr) {
        *report = counts;
    }
    if (counts.written == 0) {
        throw DataError("no usable images in '" + src_dir.string() + "'");
    }
    return store_from_entries(out_dir, std::move(ids), std::move(files));
}

ImageStore write_image_store(const torch::Tensor& images, const fs::path& out_dir, const std::string& id_prefix) {
    if (images.dim() != 4 || images.size(0) == 0) {
        throw ContractViolation("write_image_store expects a non-empty [N, C, H, W] tensor");
    }
    fs::create_directories(out_dir / "images");
    std::vector<std::string> ids;
    std::vector<std::string> files;
    for (std::int64_t i = 0; i < images.size(0); ++i) {
        const auto rel = indexed_name("images/", i, ".png");
        write_png(images[i], out_dir / rel);
        ids.push_back(indexed_name(id_prefix, i, ""));
        files.push_back(rel);
    }
    return store_from_entries(out_dir, std::move(ids), std::move(files));
}

nlohmann::json Manifest::to_json() const {
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["seed"] = seed;
    j["holdout_fraction"] = holdout_fraction;
    j["records"] = nlohmann::json::array();
    for (const auto& r : records) {
        j["records"].push_back({{"source_id", r.source_id},
                                {"image_path", r.image_path},
                                {"observation_path", r.observation_path},
                                {"mask_path", r.mask_path},
                                {"config", r.config},
                                {"split", to_string(r.split)}});
    }
    return j;
}

Manifest Manifest::from_json(const nlohmann::json& j) {
    Manifest m;
    try {
        m.schema_version = j.at("schema_version").get<std::int64_t>();
        if (m.schema_version != kManifestSchemaVersion) {
            throw DataError("unsupported manifest schema version " + std::to_string(m.schema_version));
        }
        m.seed = j.at("seed").get<std::uint64_t>();
        m.holdout_fraction = j.value("holdout_fraction", 0.15);
        for (const auto& r : j.at("records")) {
            ManifestRecord rec;
            rec.source_id = r.at("source_id").get<std::string>();
            rec.image_path = r.at("image_path").get<std::string>();
            rec.observation_path = r.at("observation_path").get<std::string>();
            rec.mask_path = r.at("mask_path").get<std::string>();
            rec.config = r.at("config").get<MeasurementConfig>();
            rec.split = split_from_string(r.at("split").get<std::string>());
            m.records.push_back(std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

void Manifest::save(const fs::path& path) const {
    write_json_file(to_json(), path);
}

Manifest Manifest::load(const fs::path& path) {
    return from_json(read_json_file(path));
}

std::vector<std::int64_t> Manifest::indices(Split which) const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].split == which) {
            out.push_back(static_cast<std::int64_t>(i));
        }
    }
    return out;
}

Manifest build_manifest(const ImageStore& store, const MeasurementConfig& cfg, std::uint64_t seed,
                        const fs::path& out_dir, double holdout_fraction) {
    if (store.size() == 0) {
        throw DataError("image store is empty");
    }
    fs::create_directories(out_dir / "observations");
    fs::create_directories(out_dir / "masks");
    const auto store_rel = fs::relative(fs::absolute(store.root), fs::absolute(out_dir));
    const auto splits = assign_splits(store.size(), holdout_fraction, seed);

    Manifest manifest;
    manifest.seed = seed;
    manifest.holdout_fraction = holdout_fraction;
    for (std::int64_t i = 0; i < store.size(); ++i) {
        auto image = store.load(i);
        cfg.validate(image.size(1), image.size(2));
        auto engine = stream_engine(seed, Stream::CorruptOnce, static_cast<std::uint64_t>(i));
        auto mask = sample_mask(cfg, image.size(1), image.size(2), engine);
        // Quantise first so the stored observation equals F(stored image, mask).
        auto quantised = image.mul(255.0f).round().div(255.0f);
        auto y = apply_measurement(quantised, mask, cfg.tau);

        ManifestRecord rec;
        rec.source_id = store.source_ids[static_cast<std::size_t>(i)];
        rec.image_path = (store_rel / store.files[static_cast<std::size_t>(i)]).generic_string();
        rec.observation_path = indexed_name("observations/", i, ".png");
        rec.mask_path = indexed_name("masks/", i, ".png");
        rec.config = cfg;
        rec.split = splits[static_cast<std::size_t>(i)];
        write_png(y, out_dir / rec.observation_path);
        write_mask_png(mask, out_dir / rec.mask_path);
        manifest.records.push_back(std::move(rec));
    }
    manifest.save(out_dir / "manifest.json");
    return manifest;
}

ObservationSet load_observations(const Manifest& manifest, const fs::path& base_dir, Split which, bool with_clean) {
    ObservationSet out;
    std::vector<torch::Tensor> ys;
    std::vector<torch::Tensor> masks;
    std::vector<torch::Tensor> cleans;
    for (const auto& rec : manifest.records) {
        if (rec.split != which) {
            continue;
        }
        auto y = read_image(base_dir / rec.observation_path);
        auto mask = read_mask_png(base_dir / rec.mask_path);
        if (mask.height() != y.size(1) || mask.width() != y.size(2)) {
            throw DataError("mask of '" + rec.source_id + "' does not match its image");
        }
        ys.push_back(y);
        masks.push_back(mask.as_channel());
        if (with_clean) {
            cleans.push_back(read_image(base_dir / rec.image_path));
        }
        out.source_ids.push_back(rec.source_id);
    }
    if (ys.empty()) {
        throw DataError("manifest has no '" + to_string(which) + "' records");
    }
    out.y = torch::stack(ys);
    out.mask = torch::stack(masks);
    if (with_clean) {
        out.clean = torch::stack(cleans);
    }
    out.validate();
    return out;
}

} // namespace uninpaint
