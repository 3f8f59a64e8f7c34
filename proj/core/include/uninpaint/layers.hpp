#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace uninpaint {

enum class Norm { Batch, None };
enum class Resample { None, Down, Up };

std::string to_string(Norm norm);
Norm norm_from_string(const std::string& name);

inline constexpr double kSpectralNormEpsilon = 1e-12;

struct SpectralNormResult {
    torch::Tensor weight; // weight / sigma, same shape as the input weight
    torch::Tensor u;      // updated left singular vector estimate
    torch::Tensor v;      // matching right singular vector estimate
    torch::Tensor sigma;  // u^T W v, clamped below by kSpectralNormEpsilon
};

// Runs n_iters power-iteration steps on weight viewed as [rows, -1] starting
// from u, then divides weight by the estimated top singular value. Gradients
// flow through sigma into weight; u and v are treated as constants.
SpectralNormResult spectral_norm_apply(const torch::Tensor& weight, const torch::Tensor& u,
                                       int n_iters);

// out[c, h*r + i, w*r + j] = in[c*r*r + i*r + j, h, w]. Accepts [C, H, W] or
// [B, C, H, W]; the channel count must be divisible by r*r.
torch::Tensor pixel_shuffle(const torch::Tensor& t, std::int64_t r);
// Inverse rearrangement of pixel_shuffle.
torch::Tensor pixel_unshuffle(const torch::Tensor& t, std::int64_t r);

// Convolution whose weight is divided by its spectral norm estimate. The
// estimate (buffers u, v) only changes when refresh() is called; the training
// step refreshes once per optimizer update so that micro-batches within an
// update see the same normalisation.
class Conv2dSNImpl : public torch::nn::Module {
public:
    Conv2dSNImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                 bool spectral = true);

    torch::Tensor forward(const torch::Tensor& x);
    torch::Tensor normalized_weight() const;
    void refresh(int n_iters = 1);
    bool spectral() const noexcept { return spectral_; }

    torch::Tensor weight, bias, u, v;

private:
    std::int64_t padding_;
    bool spectral_;
};
TORCH_MODULE(Conv2dSN);

class LinearSNImpl : public torch::nn::Module {
public:
    LinearSNImpl(std::int64_t in_features, std::int64_t out_features, bool spectral = true);

    torch::Tensor forward(const torch::Tensor& x);
    torch::Tensor normalized_weight() const;
    void refresh(int n_iters = 1);
    bool spectral() const noexcept { return spectral_; }

    torch::Tensor weight, bias, u, v;

private:
    bool spectral_;
};
TORCH_MODULE(LinearSN);

// Batch norm or identity.
class Norm2dImpl : public torch::nn::Module {
public:
    Norm2dImpl(std::int64_t channels, Norm kind);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(Norm2d);

// Self-attention over spatial positions with a learned residual gate gamma
// that starts at zero, so the block is the identity at initialisation.
class SelfAttentionImpl : public torch::nn::Module {
public:
    SelfAttentionImpl(std::int64_t channels, bool spectral = true);

    torch::Tensor forward(const torch::Tensor& x);
    // [B, N, N] attention weights (rows are queries and sum to one).
    torch::Tensor attention_weights(const torch::Tensor& x);

    torch::Tensor gamma;

private:
    Conv2dSN query_{nullptr}, key_{nullptr}, value_{nullptr};
};
TORCH_MODULE(SelfAttention);

// Two [norm -> ReLU -> 3x3 conv] stages with a skip connection. Down blocks
// average-pool between the two convs (and before the skip conv); up blocks use
// a pixel shuffle after the first conv (and in the skip path).
class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, Resample resample, Norm norm,
                 bool spectral = true);

    torch::Tensor forward(const torch::Tensor& x);

private:
    Resample resample_;
    Norm2d norm1_{nullptr}, norm2_{nullptr};
    Conv2dSN conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
};
TORCH_MODULE(ResBlock);

// Refreshes the spectral norm estimate of every Conv2dSN/LinearSN in `module`.
void refresh_spectral_norms(torch::nn::Module& module, int n_iters = 1);

// Largest singular value of weight viewed as [rows, -1] (SVD).
double top_singular_value(const torch::Tensor& weight);

} // namespace uninpaint
