#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "uninpaint/layers.hpp"

namespace uninpaint {

// Image-to-image reconstruction network G(y, z). The input stacks the
// observation, its mask and a spatially broadcast linear projection of z.
struct GeneratorSpec {
    std::int64_t image_channels = 3;
    std::int64_t resolution = 64;
    std::int64_t base_width = 32;
    std::int64_t n_blocks = 3;
    std::int64_t z_dim = 128;
    std::int64_t z_channels = 16;
    std::vector<std::int64_t> attention_at = {16};
    Norm norm = Norm::Batch;

    std::int64_t in_channels() const { return image_channels + 1 + z_channels; }
    void validate() const;
    bool operator==(const GeneratorSpec&) const = default;
};

struct DiscriminatorSpec {
    std::int64_t image_channels = 3;
    std::int64_t resolution = 64;
    std::int64_t base_width = 32;
    std::int64_t n_blocks = 3;
    std::vector<std::int64_t> attention_at = {16};
    Norm norm = Norm::Batch;

    void validate() const;
    bool operator==(const DiscriminatorSpec&) const = default;
};

struct EncoderSpec {
    std::int64_t image_channels = 3;
    std::int64_t resolution = 64;
    std::int64_t base_width = 32;
    std::int64_t n_blocks = 3;
    std::int64_t z_dim = 128;
    Norm norm = Norm::Batch;

    void validate() const;
    bool operator==(const EncoderSpec&) const = default;
};

struct ModelSpecs {
    GeneratorSpec generator;
    DiscriminatorSpec discriminator;
    EncoderSpec encoder;

    void validate() const;
    bool operator==(const ModelSpecs&) const = default;
};

// 64x64 defaults: base width 32, three resolution stages, attention at 16x16.
ModelSpecs desk_specs(std::int64_t resolution = 64);
// Reduced networks for 32x32 synthetic experiments on a CPU.
ModelSpecs toy_specs();

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);
void to_json(nlohmann::json& j, const DiscriminatorSpec& s);
void from_json(const nlohmann::json& j, DiscriminatorSpec& s);
void to_json(nlohmann::json& j, const EncoderSpec& s);
void from_json(const nlohmann::json& j, EncoderSpec& s);
void to_json(nlohmann::json& j, const ModelSpecs& s);
void from_json(const nlohmann::json& j, ModelSpecs& s);

class GeneratorImpl : public torch::nn::Module {
public:
    explicit GeneratorImpl(GeneratorSpec spec);

    // y: [B, C, H, W] with masked pixels equal to 0, m_y: [B, 1, H, W],
    // z: [B, z_dim]. Returns the raw output in [0, 1], shaped like y.
    torch::Tensor forward(const torch::Tensor& y, const torch::Tensor& m_y, const torch::Tensor& z);

    const GeneratorSpec& spec() const { return spec_; }

private:
    GeneratorSpec spec_;
    torch::nn::Linear z_proj_{nullptr};
    Conv2dSN stem_{nullptr};
    torch::nn::ModuleList down_, up_;
    ResBlock mid_{nullptr};
    std::vector<SelfAttention> up_attention_;
    SelfAttention mid_attention_{nullptr};
    Norm2d out_norm_{nullptr};
    Conv2dSN out_conv_{nullptr};
};
TORCH_MODULE(Generator);

class DiscriminatorImpl : public torch::nn::Module {
public:
    explicit DiscriminatorImpl(DiscriminatorSpec spec);

    // [B, C, H, W] -> [B] scores.
    torch::Tensor forward(const torch::Tensor& y);

    const DiscriminatorSpec& spec() const { return spec_; }

private:
    DiscriminatorSpec spec_;
    Conv2dSN stem_{nullptr};
    SelfAttention stem_attention_{nullptr};
    torch::nn::ModuleList down_;
    std::vector<SelfAttention> attention_;
    LinearSN head_{nullptr};
};
TORCH_MODULE(Discriminator);

struct EncoderOutput {
    torch::Tensor mean;   // [B, z_dim]
    torch::Tensor logvar; // [B, z_dim]
};

// Plain residual network (batch norm, no spectral norm) with two linear
// heads predicting the mean and log-variance of the latent code.
class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(EncoderSpec spec);

    EncoderOutput forward(const torch::Tensor& y);

    const EncoderSpec& spec() const { return spec_; }

private:
    EncoderSpec spec_;
    Conv2dSN stem_{nullptr};
    torch::nn::ModuleList down_;
    torch::nn::Linear mean_head_{nullptr}, logvar_head_{nullptr};
};
TORCH_MODULE(Encoder);

// mean + exp(logvar / 2) * eps
torch::Tensor reparameterize(const torch::Tensor& mean, const torch::Tensor& logvar, const torch::Tensor& eps);

std::int64_t parameter_count(const torch::nn::Module& module);

// Channel width at resolution level `level` (resolution / 2^level).
std::int64_t stage_width(std::int64_t base_width, std::int64_t level);

} // namespace uninpaint
