#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "uninpaint/corruption.hpp"
#include "uninpaint/data.hpp"
#include "uninpaint/losses.hpp"
#include "uninpaint/nets.hpp"

namespace uninpaint {

// Input of the encoder inside the encoding-z loss.
//   MaskedGenerated: E(y~ * (1 - m_y)), only content G produced.
//   Full: E(y~).
enum class EncoderZInput { MaskedGenerated, Full };

std::string to_string(EncoderZInput e);
EncoderZInput encoder_z_input_from_string(const std::string& name);

struct TrainConfig {
    // Micro-batch size; one optimizer update consumes accumulation_steps of them.
    std::int64_t batch_size = 128;
    std::int64_t accumulation_steps = 4;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.99;
    double lr_g = 1e-4;
    double lr_d = 4e-4;
    double lr_e = 1e-4;
    std::int64_t total_steps = 10000;
    std::uint64_t seed = 0;
    LossWeights loss_weights;
    MeasurementConfig measurement;

    // compose = false trains on G(y, z) directly instead of G(y, z) * (1 - m_y) + y.
    bool compose = true;
    // Composes x~ with the fresh mask m~ instead of m_y; observed pixels are then
    // no longer guaranteed to survive.
    bool algorithm1_mask_reading = false;
    EncoderZInput encoder_z_input = EncoderZInput::MaskedGenerated;
    int spectral_norm_iterations = 1;
    std::int64_t checkpoint_every = 0; // 0 disables periodic checkpoints
    int threads = 1;                   // 1 = strict single-threaded mode

    std::int64_t effective_batch() const { return batch_size * accumulation_steps; }
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainState {
    ModelSpecs specs;
    std::uint64_t seed = 0;
    Generator generator{nullptr};
    Discriminator discriminator{nullptr};
    Encoder encoder{nullptr};
    std::unique_ptr<torch::optim::Adam> opt_g, opt_d, opt_e;
    std::int64_t step = 0;       // optimizer updates applied
    std::int64_t micro_step = 0; // micro-batches consumed
    std::vector<ObservationBatch> pending;

    void to(torch::Dtype dtype);
    void zero_grad();
};

// Fresh networks and optimizers. Parameter initialisation is seeded from cfg.seed.
TrainState make_train_state(const ModelSpecs& specs, const TrainConfig& cfg);

// Deep copy (through an in-memory checkpoint).
TrainState clone_state(const TrainState& state, const TrainConfig& cfg);

// Random quantities for one micro-batch. Row j is keyed on the global sample
// position, so splitting a batch into micro-batches does not change them.
struct StepDraws {
    torch::Tensor fresh_mask; // m~, [B, 1, H, W]
    torch::Tensor z;          // [B, z_dim]
    torch::Tensor eps;        // encoder noise, [B, z_dim]
};

StepDraws draw_step_randomness(const TrainConfig& cfg, const ModelSpecs& specs, std::int64_t first_position,
                               std::int64_t count);

// Intermediate tensors of one pass of the training procedure.
struct ForwardPass {
    torch::Tensor g_out;   // G(y, z)
    torch::Tensor x_tilde; // composed reconstruction
    torch::Tensor y_tilde; // F(x~, m~)
    torch::Tensor z_hat;   // E(y~ * (1 - m_y)) mean
    torch::Tensor z_tilde; // reparameterised sample of E(y)
    torch::Tensor x_hat;   // G(y~, z~) composed with y~
    torch::Tensor y_hat;   // F(x^, m_y)
};

ForwardPass forward_pass(TrainState& state, const ObservationBatch& batch, const StepDraws& draws,
                         const TrainConfig& cfg, bool need_z_branch, bool need_y_branch);

struct UpdateReport {
    std::int64_t step = 0; // index of the update just applied (1-based)
    std::int64_t effective_batch = 0;
    LossReport losses;
    // max |x~ - y| over observed pixels of every micro-batch; 0 when the
    // observed region is preserved exactly.
    double observed_max_abs_diff = 0.0;

    nlohmann::json to_json() const;
};

// One optimizer update over accumulation_steps micro-batches: the
// discriminator is updated first from gradients averaged over the
// micro-batches, then G and E from fresh forward passes against the updated D.
UpdateReport train_update(TrainState& state, std::span<const ObservationBatch> micro_batches, const TrainConfig& cfg);

// Queues a micro-batch; runs train_update once accumulation_steps are queued.
std::optional<UpdateReport> train_micro_step(TrainState& state, ObservationBatch batch, const TrainConfig& cfg);

struct FitOptions {
    std::filesystem::path log_path;       // JSON-lines, one record per update (optional)
    std::filesystem::path checkpoint_dir; // used when cfg.checkpoint_every > 0
    std::function<void(const TrainState&, const UpdateReport&)> on_update;
};

// Runs updates until state.step == cfg.total_steps. When `resume` is given
// training continues from it; otherwise fresh state is created from cfg.seed.
TrainState fit(const TrainConfig& cfg, const ModelSpecs& specs, const ObservationSet& train_set,
               const FitOptions& options = {}, std::optional<TrainState> resume = std::nullopt);

// Micro-batch consumed at global micro-step `micro_step`.
ObservationBatch micro_batch_at(const ObservationSet& set, DataOrder& order, std::int64_t micro_step,
                                std::int64_t batch_size);

// RAII guard: disables requires_grad on a module's parameters.
class FreezeParameters {
public:
    explicit FreezeParameters(torch::nn::Module& module);
    ~FreezeParameters();
    FreezeParameters(const FreezeParameters&) = delete;
    FreezeParameters& operator=(const FreezeParameters&) = delete;

private:
    std::vector<torch::Tensor> params_;
};

// RAII guard: restores a module's buffers (batch-norm statistics) on exit.
class BufferSnapshot {
public:
    explicit BufferSnapshot(torch::nn::Module& module);
    ~BufferSnapshot();
    BufferSnapshot(const BufferSnapshot&) = delete;
    BufferSnapshot& operator=(const BufferSnapshot&) = delete;

private:
    std::vector<std::pair<torch::Tensor, torch::Tensor>> saved_;
};

// Throws NonFiniteLossError naming the term, step and batch ids.
void require_finite(const torch::Tensor& value, const char* term, std::int64_t step, const ObservationBatch& batch);

} // namespace uninpaint
