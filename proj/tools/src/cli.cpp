#include "uninpaint/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "uninpaint/baselines.hpp"
#include "uninpaint/checkpoint.hpp"
#include "uninpaint/config.hpp"
#include "uninpaint/data.hpp"
#include "uninpaint/errors.hpp"
#include "uninpaint/evaluation.hpp"
#include "uninpaint/image_io.hpp"
#include "uninpaint/rng.hpp"
#include "uninpaint/toy.hpp"
#include "uninpaint/training.hpp"

namespace fs = std::filesystem;

namespace uninpaint {

namespace {

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string checkpoint;
    std::optional<std::int64_t> n_z;
    std::string variant;
    std::string corruption;
    std::vector<std::string> positional;
};

// Removes everything a failed command wrote: the whole output directory when
// the command created it, otherwise the individual entries it added.
class OutputGuard {
public:
    explicit OutputGuard(fs::path dir) : dir_(std::move(dir)), existed_(fs::exists(dir_)) {}
    OutputGuard(const OutputGuard&) = delete;
    OutputGuard& operator=(const OutputGuard&) = delete;

    ~OutputGuard() {
        if (committed_) {
            return;
        }
        std::error_code ec;
        if (!existed_) {
            fs::remove_all(dir_, ec);
            return;
        }
        for (auto it = created_.rbegin(); it != created_.rend(); ++it) {
            fs::remove_all(*it, ec);
            auto tmp = *it;
            tmp += ".tmp";
            fs::remove(tmp, ec);
        }
    }

    fs::path track(const fs::path& relative) {
        auto p = dir_ / relative;
        if (!fs::exists(p)) {
            created_.push_back(p);
        }
        return p;
    }

    const fs::path& dir() const { return dir_; }
    void commit() { committed_ = true; }

private:
    fs::path dir_;
    bool existed_;
    bool committed_ = false;
    std::vector<fs::path> created_;
};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') {
            out += '\\';
            out += c;
        } else if (c == '\n') {
            out += "\\n";
        } else {
            out += c;
        }
    }
    return out;
}

void print_error(std::ostream& err, const std::string& kind, const std::string& msg) {
    err << "error: kind=" << kind << " msg=\"" << escape(msg) << "\"\n";
}

std::vector<std::string> inputs_of(const Options& o) {
    std::vector<std::string> paths;
    for (const auto& p : o.positional) {
        if (p.find('=') == std::string::npos) {
            paths.push_back(p);
        }
    }
    return paths;
}

ExperimentConfig load_config(const Options& o) {
    auto j = load_config_json(o.config_path, prefixed_environment());
    for (const auto& p : o.positional) {
        if (p.find('=') != std::string::npos) {
            apply_override(j, p);
        }
    }
    if (o.seed) {
        j["train"]["seed"] = *o.seed;
    }
    return experiment_from_json(j);
}

std::string single_input(const Options& o, const char* what) {
    auto in = inputs_of(o);
    if (in.size() != 1) {
        throw ConfigError(std::string("expected exactly one ") + what + " argument");
    }
    return in.front();
}

void require_out_dir(const Options& o) {
    if (o.out_dir.empty()) {
        throw ConfigError("--out-dir is required");
    }
}

std::string fnv1a_hex(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read '" + path.string() + "'");
    }
    std::uint64_t h = 1469598103934665603ULL;
    char c;
    while (in.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << h;
    return s.str();
}

Manifest open_manifest(const fs::path& dataset) {
    const auto path = dataset / "manifest.json";
    if (!fs::exists(path)) {
        throw DataError("'" + dataset.string() + "' has no manifest.json");
    }
    auto m = Manifest::load(path);
    if (m.records.empty()) {
        throw DataError("manifest '" + path.string() + "' is empty");
    }
    return m;
}

MeasurementConfig dataset_measurement(const Manifest& m) {
    const auto& first = m.records.front().config;
    for (const auto& r : m.records) {
        if (!(r.config == first)) {
            throw DataError("manifest mixes corruption settings; the training corruption must be unique");
        }
    }
    return first;
}

void check_images_fit(const ObservationSet& set, const ModelSpecs& specs) {
    if (set.size() == 0) {
        throw DataError("selected split is empty");
    }
    if (set.y.size(1) != specs.generator.image_channels || set.y.size(2) != specs.generator.resolution ||
        set.y.size(3) != specs.generator.resolution) {
        std::ostringstream msg;
        msg << "dataset images " << set.y.sizes() << " do not match the model (" << specs.generator.image_channels
            << " channels, " << specs.generator.resolution << " pixels)";
        throw DataError(msg.str());
    }
}

bool is_baseline(const std::string& variant) {
    return variant == "unpaired" || variant == "paired" || variant == "misgan";
}

// Loss weights of the unsupervised ablation variants.
LossWeights variant_weights(const std::string& variant, LossWeights w) {
    if (variant == "base") {
        w.lambda_z = 0.0;
        w.lambda_y = 0.0;
    } else if (variant == "z") {
        w.lambda_y = 0.0;
    } else if (variant == "y") {
        w.lambda_z = 0.0;
    } else if (variant != "zy") {
        throw ConfigError("unknown variant '" + variant + "'");
    }
    if (variant != "base" && variant != "y" && w.lambda_z == 0.0) {
        throw ConfigError("variant '" + variant + "' needs lambda_z > 0");
    }
    if (variant != "base" && variant != "z" && w.lambda_y == 0.0) {
        throw ConfigError("variant '" + variant + "' needs lambda_y > 0");
    }
    return w;
}

std::string variant_of(const LossWeights& w) {
    if (w.lambda_z != 0.0 && w.lambda_y != 0.0) {
        return "zy";
    }
    if (w.lambda_z != 0.0) {
        return "z";
    }
    if (w.lambda_y != 0.0) {
        return "y";
    }
    return "base";
}

struct LoadedModel {
    Generator generator{nullptr};
    ModelSpecs specs;
    std::string variant;
    std::uint64_t seed = 0;
};

LoadedModel load_model(const std::string& checkpoint) {
    if (checkpoint.empty()) {
        throw ConfigError("--checkpoint is required");
    }
    const auto kind = checkpoint_kind(checkpoint);
    LoadedModel out;
    if (kind == "unsupervised") {
        TrainConfig cfg;
        auto state = checkpoint_load(checkpoint, &cfg);
        out.generator = state.generator;
        out.specs = state.specs;
        out.variant = variant_of(cfg.loss_weights);
        out.seed = cfg.seed;
    } else {
        BaselineConfig cfg;
        auto state = baseline_checkpoint_load(checkpoint, &cfg);
        out.generator = state.generator;
        out.specs = state.specs;
        out.variant = to_string(cfg.kind);
        out.seed = cfg.train.seed;
    }
    return out;
}

int cmd_ingest(const Options& o, std::ostream& out) {
    require_out_dir(o);
    const auto cfg = load_config(o);
    const auto source = single_input(o, "source");
    OutputGuard guard(o.out_dir);
    guard.track("images");
    guard.track("store.json");
    ImageStore store;
    IngestReport report;
    if (source == "synthetic") {
        const auto images = make_toy_images(cfg.data.synthetic_count, cfg.data.resolution, cfg.train.seed);
        store = write_image_store(images, o.out_dir, "toy");
        report.written = store.size();
    } else {
        if (!fs::is_directory(source)) {
            throw DataError("source directory '" + source + "' does not exist");
        }
        store = ingest(source, cfg.data.crop, cfg.data.resolution, o.out_dir, &report);
    }
    guard.commit();
    out << "ingested " << report.written << " images into " << o.out_dir << " (skipped " << report.skipped << ")\n";
    return 0;
}

int cmd_corrupt(const Options& o, std::ostream& out) {
    require_out_dir(o);
    const auto cfg = load_config(o);
    const auto store_dir = single_input(o, "image store");
    auto measurement = cfg.train.measurement;
    if (!o.corruption.empty()) {
        measurement.kind = corruption_kind_from_string(o.corruption);
    }
    measurement.validate();
    const auto store = ImageStore::open(store_dir);
    OutputGuard guard(o.out_dir);
    for (const char* entry : {"observations", "masks", "manifest.json"}) {
        guard.track(entry);
    }
    build_manifest(store, measurement, cfg.train.seed, o.out_dir, cfg.data.holdout_fraction);
    guard.commit();
    out << "manifest " << (fs::path(o.out_dir) / "manifest.json").string() << " hash "
        << fnv1a_hex(fs::path(o.out_dir) / "manifest.json") << '\n';
    return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
    require_out_dir(o);
    auto cfg = load_config(o);
    const fs::path dataset = single_input(o, "dataset");
    const auto variant = o.variant.empty() ? std::string("zy") : o.variant;
    const auto manifest = open_manifest(dataset);
    cfg.train.measurement = dataset_measurement(manifest);

    OutputGuard guard(o.out_dir);
    fs::create_directories(o.out_dir);
    const auto log_path = guard.track("train.jsonl");
    const auto config_path = guard.track("config.json");
    const auto final_path = guard.track("final.ckpt");
    const auto ckpt_dir = guard.track("checkpoints");

    nlohmann::json record = to_json(cfg);
    record["variant"] = variant;
    record["dataset"] = dataset.string();

    std::int64_t steps = 0;
    if (is_baseline(variant)) {
        BaselineConfig bc = cfg.baseline;
        bc.kind = baseline_kind_from_string(variant);
        bc.train = cfg.train;
        bc.validate();
        const bool clean = bc.kind != BaselineKind::MisGan;
        auto train_set = load_observations(manifest, dataset, Split::Train, clean);
        check_images_fit(train_set, cfg.models);
        std::optional<BaselineState> resume;
        if (!o.checkpoint.empty()) {
            resume = baseline_checkpoint_load(o.checkpoint);
        }
        {
            std::ofstream cf(config_path);
            cf << record.dump(2) << '\n';
        }
        auto state = fit_baseline(bc, cfg.models, train_set, {log_path, ckpt_dir, nullptr}, std::move(resume));
        baseline_checkpoint_save(state, bc, final_path);
        steps = state.step;
    } else {
        cfg.train.loss_weights = variant_weights(variant, cfg.train.loss_weights);
        cfg.train.validate();
        record["train"] = cfg.train;
        // The unsupervised model never sees clean images.
        auto train_set = load_observations(manifest, dataset, Split::Train, /*with_clean=*/false);
        check_images_fit(train_set, cfg.models);
        std::optional<TrainState> resume;
        if (!o.checkpoint.empty()) {
            resume = checkpoint_load(o.checkpoint);
            if (!(resume->specs == cfg.models)) {
                throw ConfigError("checkpoint networks differ from the configured models");
            }
        }
        {
            std::ofstream cf(config_path);
            cf << record.dump(2) << '\n';
        }
        auto state = fit(cfg.train, cfg.models, train_set, {log_path, ckpt_dir, nullptr}, std::move(resume));
        checkpoint_save(state, cfg.train, final_path);
        steps = state.step;
    }
    guard.commit();
    out << "trained " << variant << " for " << steps << " updates; checkpoint " << final_path.string() << '\n';
    return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
    require_out_dir(o);
    const auto cfg = load_config(o);
    const fs::path dataset = single_input(o, "dataset");
    const auto manifest = open_manifest(dataset);
    auto model = load_model(o.checkpoint);
    auto holdout = load_observations(manifest, dataset, Split::Holdout, /*with_clean=*/true);
    check_images_fit(holdout, model.specs);

    EvalOptions opt;
    opt.n_z = o.n_z.value_or(cfg.eval.n_z);
    opt.max_images = cfg.eval.max_images;
    opt.batch_size = cfg.eval.batch_size;
    opt.seed = o.seed.value_or(cfg.train.seed);
    if (opt.n_z < 2) {
        throw ConfigError("--n-z must be at least 2");
    }
    RandomConvEmbedder embedder(model.specs.generator.image_channels, cfg.eval.embedder_seed);
    const auto metrics = evaluate_generator(model.generator, holdout, &embedder, opt);

    ReportRow row;
    row.variant = o.variant.empty() ? model.variant : o.variant;
    row.corruption = o.corruption.empty() ? to_string(dataset_measurement(manifest).kind) : o.corruption;
    row.fid = metrics.fid;
    row.mse = metrics.mse;
    row.std_dev = metrics.std_dev;

    OutputGuard guard(o.out_dir);
    fs::create_directories(o.out_dir);
    write_report_csv({row}, guard.track("metrics.csv"));
    const auto table = render_report_table({row});
    {
        std::ofstream tf(guard.track("metrics.txt"));
        tf << table;
        if (!tf) {
            throw IoError("cannot write metrics.txt");
        }
    }
    guard.commit();
    out << table;
    out << "images " << metrics.images << ", observations without masked pixels " << metrics.std_skipped << '\n';
    return 0;
}

int cmd_reconstruct(const Options& o, std::ostream& out) {
    require_out_dir(o);
    const auto cfg = load_config(o);
    const fs::path dataset = single_input(o, "dataset");
    const auto manifest = open_manifest(dataset);
    auto model = load_model(o.checkpoint);
    auto holdout = load_observations(manifest, dataset, Split::Holdout, /*with_clean=*/false);
    check_images_fit(holdout, model.specs);
    const auto n_z = o.n_z.value_or(4);
    if (n_z < 1) {
        throw ConfigError("--n-z must be at least 1");
    }
    const auto seed = o.seed.value_or(cfg.train.seed);

    constexpr std::int64_t kColumns = 8;
    constexpr std::int64_t kPad = 2;
    auto engine = stream_engine(seed, Stream::EvalLatent, 0, 1u << 20);
    auto order = permutation(holdout.size(), engine);
    order.resize(static_cast<std::size_t>(std::min<std::int64_t>(kColumns, holdout.size())));
    auto picked = holdout.subset(order);
    const auto cols = picked.size();
    const auto c = picked.y.size(1);
    const auto h = picked.y.size(2);
    const auto w = picked.y.size(3);
    const auto rows = 1 + n_z;

    auto grid = torch::ones({c, rows * (h + kPad) + kPad, cols * (w + kPad) + kPad});
    auto place = [&](std::int64_t r, const torch::Tensor& images) {
        for (std::int64_t j = 0; j < cols; ++j) {
            grid.slice(1, kPad + r * (h + kPad), kPad + r * (h + kPad) + h)
                .slice(2, kPad + j * (w + kPad), kPad + j * (w + kPad) + w)
                .copy_(images[j]);
        }
    };
    place(0, picked.y);
    for (std::int64_t k = 0; k < n_z; ++k) {
        auto z = eval_latents(seed, 0, cols, model.specs.generator.z_dim, k);
        place(1 + k, reconstruct(model.generator, picked.y, picked.mask, z));
    }

    OutputGuard guard(o.out_dir);
    fs::create_directories(o.out_dir);
    write_png(grid, guard.track("grid.png"));
    guard.commit();
    out << "grid " << (fs::path(o.out_dir) / "grid.png").string() << " rows " << rows << " cols " << cols << '\n';
    return 0;
}

int cmd_report(const Options& o, std::ostream& out) {
    require_out_dir(o);
    load_config(o);
    const auto inputs = inputs_of(o);
    if (inputs.empty()) {
        throw ConfigError("report needs at least one metrics CSV");
    }
    std::vector<ReportRow> rows;
    for (const auto& p : inputs) {
        for (auto& r : read_report_csv(p)) {
            auto same = [&](const ReportRow& x) { return x.variant == r.variant && x.corruption == r.corruption; };
            if (std::find_if(rows.begin(), rows.end(), same) != rows.end()) {
                throw DataError("duplicate row for variant '" + r.variant + "' and corruption '" + r.corruption + "'");
            }
            rows.push_back(std::move(r));
        }
    }
    const auto table = render_report_table(rows);
    OutputGuard guard(o.out_dir);
    fs::create_directories(o.out_dir);
    write_report_csv(rows, guard.track("report.csv"));
    {
        std::ofstream tf(guard.track("report.txt"));
        tf << table;
        if (!tf) {
            throw IoError("cannot write report.txt");
        }
    }
    guard.commit();
    out << table;
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Learn image reconstructions from corrupted observations only", "uninpaint"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "JSON config file");
        sub->add_option("--seed", o.seed, "random seed (overrides train.seed)");
        sub->add_option("--out-dir", o.out_dir, "output directory");
    };
    auto* ingest = app.add_subcommand("ingest", "build an image store from a directory, or `synthetic` toy images");
    auto* corrupt = app.add_subcommand("corrupt", "corrupt an image store once and write a manifest");
    auto* train = app.add_subcommand("train", "train a model on the training split of a dataset");
    auto* eval = app.add_subcommand("eval", "FID, MSE and diversity std on the holdout split");
    auto* recon = app.add_subcommand("reconstruct", "grid of observations and reconstructions");
    auto* report = app.add_subcommand("report", "merge metrics CSV files into one table");
    for (auto* sub : {ingest, corrupt, train, eval, recon, report}) {
        add_common(sub);
        sub->add_option("args", o.positional, "input paths followed by key=value config overrides");
    }
    const std::vector<std::string> variants{"base", "z", "y", "zy", "unpaired", "paired", "misgan"};
    const std::vector<std::string> corruptions{"patch", "drop"};
    for (auto* sub : {corrupt, eval}) {
        sub->add_option("--corruption", o.corruption, "corruption kind")->check(CLI::IsMember(corruptions));
    }
    for (auto* sub : {train, eval}) {
        sub->add_option("--variant", o.variant, "model variant")->check(CLI::IsMember(variants));
    }
    for (auto* sub : {train, eval, recon}) {
        sub->add_option("--checkpoint", o.checkpoint, "checkpoint to resume from / evaluate");
    }
    for (auto* sub : {eval, recon}) {
        sub->add_option("--n-z", o.n_z, "latent samples per observation");
    }

    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        print_error(err, "usage", e.what());
        return 2;
    }

    try {
        if (ingest->parsed()) {
            return cmd_ingest(o, out);
        }
        if (corrupt->parsed()) {
            return cmd_corrupt(o, out);
        }
        if (train->parsed()) {
            return cmd_train(o, out);
        }
        if (eval->parsed()) {
            return cmd_eval(o, out);
        }
        if (recon->parsed()) {
            return cmd_reconstruct(o, out);
        }
        return cmd_report(o, out);
    } catch (const Error& e) {
        print_error(err, e.kind(), e.what());
    } catch (const c10::Error& e) {
        print_error(err, "torch", e.what_without_backtrace());
    } catch (const fs::filesystem_error& e) {
        print_error(err, "io", e.what());
    } catch (const std::exception& e) {
        print_error(err, "internal", e.what());
    }
    return 1;
}

} // namespace uninpaint
