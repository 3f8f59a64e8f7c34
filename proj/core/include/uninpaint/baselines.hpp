#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "uninpaint/data.hpp"
#include "uninpaint/nets.hpp"
#include "uninpaint/training.hpp"

namespace uninpaint {

// Comparison systems trained with extra supervision (unpaired, paired) or with
// a MisGAN-style pair of adversarial games driven by the known mask process.
enum class BaselineKind { Unpaired, Paired, MisGan };

std::string to_string(BaselineKind k);
BaselineKind baseline_kind_from_string(const std::string& name);

struct BaselineConfig {
    BaselineKind kind = BaselineKind::Paired;
    TrainConfig train;
    double test_fraction = 0.10;
    // Weight of the adversarial term relative to the squared error (paired).
    double paired_adv_weight = 0.01;
    // Weight of the imputer game against the data game (MisGAN).
    double misgan_imputer_weight = 0.1;

    void validate() const;
};

void to_json(nlohmann::json& j, const BaselineConfig& c);
void from_json(const nlohmann::json& j, BaselineConfig& c);

// `generator` is the reconstruction network for every kind (the imputer for
// MisGAN), so evaluation treats all systems alike. The MisGAN data generator
// G_x(z) is a Generator fed an empty observation.
struct BaselineState {
    BaselineKind kind = BaselineKind::Paired;
    ModelSpecs specs;
    std::uint64_t seed = 0;
    Generator generator{nullptr};
    Discriminator discriminator{nullptr};           // D on clean images, or D_x on measurements
    Generator data_generator{nullptr};              // MisGAN only
    Discriminator imputer_discriminator{nullptr};   // MisGAN only
    std::unique_ptr<torch::optim::Adam> opt_g, opt_d, opt_gx, opt_di;
    std::int64_t step = 0;

    void zero_grad();
};

// Builds the networks and checks that their parameter counts equal those of
// the unsupervised model built from the same specs.
BaselineState make_baseline_state(const ModelSpecs& specs, const BaselineConfig& cfg);

// Micro-batch of observations with their clean counterparts.
struct PairedBatch {
    ObservationBatch observed;
    torch::Tensor clean; // [B, C, H, W]
};

struct BaselineReport {
    std::int64_t step = 0;
    std::map<std::string, double> losses;
    double observed_max_abs_diff = 0.0;

    nlohmann::json to_json() const;
};

// D: clean images vs compose(G(y, z), y). G: adversarial on the composition.
// `clean` must be drawn independently of `observed`.
BaselineReport unpaired_step(BaselineState& state, std::span<const ObservationBatch> observed,
                             std::span<const torch::Tensor> clean, const BaselineConfig& cfg);

// G: ||x~ - x||^2 + paired_adv_weight * adversarial term; D: x vs x~.
BaselineReport paired_step(BaselineState& state, std::span<const PairedBatch> pairs, const BaselineConfig& cfg);

// Data game: D_x(y) vs D_x(F(G_x(z), m)) with m from the known mask process.
// Imputer game: D_i(G_x(z)) vs D_i(compose(G(y, z), y)).
BaselineReport misgan_step(BaselineState& state, std::span<const ObservationBatch> observed, const BaselineConfig& cfg);

struct BaselineFitOptions {
    std::filesystem::path log_path;
    std::filesystem::path checkpoint_dir;
    std::function<void(const BaselineState&, const BaselineReport&)> on_update;
};

// Trains until state.step == cfg.train.total_steps. `train_set` must carry
// clean images for the unpaired and paired kinds.
BaselineState fit_baseline(const BaselineConfig& cfg, const ModelSpecs& specs, const ObservationSet& train_set,
                           const BaselineFitOptions& options = {}, std::optional<BaselineState> resume = std::nullopt);

void baseline_checkpoint_save(const BaselineState& state, const BaselineConfig& cfg,
                              const std::filesystem::path& path);
BaselineState baseline_checkpoint_load(const std::filesystem::path& path, BaselineConfig* cfg_out = nullptr);

} // namespace uninpaint
