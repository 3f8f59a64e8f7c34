#pragma once

#include <cstdint>
#include <random>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace uninpaint {

enum class CorruptionKind { Patch, DropPixel };

std::string to_string(CorruptionKind kind);
CorruptionKind corruption_kind_from_string(const std::string& name);

// Parameters of the measurement process.
//   Patch(n, k): n independent k x k windows are observed, everything else is
//   filled with tau. Window corners stay `border` pixels away from the edges.
//   DropPixel(p): round(p * H * W) pixels are filled with tau on all channels.
struct MeasurementConfig {
    CorruptionKind kind = CorruptionKind::DropPixel;
    std::int64_t n = 1;
    std::int64_t k = 32;
    double p = 0.9;
    std::int64_t border = 4;
    double tau = 0.0;

    static MeasurementConfig patch(std::int64_t n, std::int64_t k, std::int64_t border = 4);
    static MeasurementConfig drop_pixel(double p);

    // Throws ConfigError when the configuration cannot be applied to H x W images.
    void validate(std::int64_t height, std::int64_t width) const;
    void validate() const;

    bool operator==(const MeasurementConfig&) const = default;
};

void to_json(nlohmann::json& j, const MeasurementConfig& cfg);
void from_json(const nlohmann::json& j, MeasurementConfig& cfg);

// Binary spatial mask, 1 = observed and 0 = masked. Stored as a float32 [H, W]
// tensor and broadcast over the channels of the image it is applied to.
class Mask {
public:
    explicit Mask(torch::Tensor bits);

    static Mask ones(std::int64_t height, std::int64_t width);
    static Mask zeros(std::int64_t height, std::int64_t width);

    const torch::Tensor& bits() const noexcept { return bits_; }
    std::int64_t height() const { return bits_.size(0); }
    std::int64_t width() const { return bits_.size(1); }
    std::int64_t count_ones() const;

    Mask complement() const;
    // [1, H, W] view suitable for broadcasting against a [C, H, W] image.
    torch::Tensor as_channel() const { return bits_.unsqueeze(0); }

    bool operator==(const Mask& other) const;

private:
    torch::Tensor bits_;
};

Mask sample_patch_mask(const MeasurementConfig& cfg, std::int64_t height, std::int64_t width,
                       std::mt19937_64& rng);
Mask sample_drop_pixel_mask(const MeasurementConfig& cfg, std::int64_t height, std::int64_t width,
                            std::mt19937_64& rng);
// Dispatches on cfg.kind.
Mask sample_mask(const MeasurementConfig& cfg, std::int64_t height, std::int64_t width,
                 std::mt19937_64& rng);

// y = x * m + tau * (1 - m). `mask` may be [H, W], [1, H, W] or [B, 1, H, W]
// and is broadcast over the channel dimension of x ([C, H, W] or [B, C, H, W]).
torch::Tensor apply_measurement(const torch::Tensor& x, const torch::Tensor& mask, double tau);
torch::Tensor apply_measurement(const torch::Tensor& x, const Mask& mask, double tau);

// Recovers the mask from an observation: a pixel is masked iff every channel
// equals tau. Returns a tensor shaped like y with a single channel. An observed
// pixel whose true value is exactly tau on all channels is reported as masked;
// the pipeline reads stored masks and keeps this only as a fallback.
torch::Tensor extract_mask(const torch::Tensor& y, double tau);
Mask extract_mask_image(const torch::Tensor& y, double tau);

// x~ = g_out * (1 - m_y) + y. Observed pixels of y pass through unchanged.
torch::Tensor compose_reconstruction(const torch::Tensor& g_out, const torch::Tensor& y,
                                     const torch::Tensor& m_y);

// A corrupted image and the mask that produced it.
struct Observation {
    torch::Tensor y; // [C, H, W]
    Mask mask;
    MeasurementConfig config;
    std::string source_id;

    // Checks that the masked region holds exactly config.tau.
    void validate() const;
};

// Reshapes `mask` so it broadcasts against `image` and checks the spatial
// dimensions agree. Throws ContractViolation otherwise.
torch::Tensor broadcast_mask(const torch::Tensor& mask, const torch::Tensor& image);

} // namespace uninpaint
