#include "uninpaint/layers.hpp"

#include <cmath>
#include <sstream>

#include "uninpaint/errors.hpp"

namespace uninpaint {

namespace F = torch::nn::functional;

std::string to_string(Norm norm) {
    return norm == Norm::Batch ? "batch" : "none";
}

Norm norm_from_string(const std::string& name) {
    if (name == "batch") {
        return Norm::Batch;
    }
    if (name == "none") {
        return Norm::None;
    }
    throw ConfigError("unknown norm '" + name + "' (expected batch or none)");
}

SpectralNormResult spectral_norm_apply(const torch::Tensor& weight, const torch::Tensor& u, int n_iters) {
    if (n_iters < 1) {
        throw ContractViolation("spectral_norm_apply needs at least one power iteration");
    }
    auto mat = weight.reshape({weight.size(0), -1});
    if (u.dim() != 1 || u.size(0) != mat.size(0)) {
        throw ContractViolation("spectral norm vector u has the wrong length");
    }
    torch::Tensor u_est = u.to(weight.scalar_type());
    torch::Tensor v_est;
    {
        torch::NoGradGuard no_grad;
        const auto opts = F::NormalizeFuncOptions().dim(0).eps(kSpectralNormEpsilon);
        for (int i = 0; i < n_iters; ++i) {
            v_est = F::normalize(torch::mv(mat.t(), u_est), opts);
            u_est = F::normalize(torch::mv(mat, v_est), opts);
        }
    }
    auto sigma = torch::dot(u_est, torch::mv(mat, v_est)).clamp_min(kSpectralNormEpsilon);
    return {weight / sigma, u_est, v_est, sigma};
}

torch::Tensor pixel_shuffle(const torch::Tensor& t, std::int64_t r) {
    if (r < 1 || (t.dim() != 3 && t.dim() != 4)) {
        throw ContractViolation("pixel_shuffle expects [C, H, W] or [B, C, H, W] and r >= 1");
    }
    const bool batched = t.dim() == 4;
    auto x = batched ? t : t.unsqueeze(0);
    const auto channels = x.size(1);
    if (channels % (r * r) != 0) {
        std::ostringstream msg;
        msg << "pixel_shuffle: " << channels << " channels not divisible by r^2 = " << r * r;
        throw ContractViolation(msg.str());
    }
    const auto b = x.size(0);
    const auto c = channels / (r * r);
    const auto h = x.size(2);
    const auto w = x.size(3);
    auto out = x.reshape({b, c, r, r, h, w}).permute({0, 1, 4, 2, 5, 3}).reshape({b, c, h * r, w * r});
    return batched ? out : out.squeeze(0);
}

torch::Tensor pixel_unshuffle(const torch::Tensor& t, std::int64_t r) {
    if (r < 1 || (t.dim() != 3 && t.dim() != 4)) {
        throw ContractViolation("pixel_unshuffle expects [C, H, W] or [B, C, H, W] and r >= 1");
    }
    const bool batched = t.dim() == 4;
    auto x = batched ? t : t.unsqueeze(0);
    if (x.size(2) % r != 0 || x.size(3) % r != 0) {
        throw ContractViolation("pixel_unshuffle: spatial size not divisible by r");
    }
    const auto b = x.size(0);
    const auto c = x.size(1);
    const auto h = x.size(2) / r;
    const auto w = x.size(3) / r;
    auto out = x.reshape({b, c, h, r, w, r}).permute({0, 1, 3, 5, 2, 4}).reshape({b, c * r * r, h, w});
    return batched ? out : out.squeeze(0);
}

namespace {

torch::Tensor initial_u(std::int64_t rows) {
    return F::normalize(torch::randn({rows}), F::NormalizeFuncOptions().dim(0).eps(kSpectralNormEpsilon));
}

} // namespace

Conv2dSNImpl::Conv2dSNImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                           bool spectral)
    : padding_(kernel / 2), spectral_(spectral) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel * kernel));
    weight = register_parameter("weight",
                                torch::empty({out_channels, in_channels, kernel, kernel}).uniform_(-bound, bound));
    bias = register_parameter("bias", torch::zeros({out_channels}));
    u = register_buffer("u", initial_u(out_channels));
    v = register_buffer("v", torch::zeros({in_channels * kernel * kernel}));
    if (spectral_) {
        refresh(5);
    }
}

torch::Tensor Conv2dSNImpl::normalized_weight() const {
    if (!spectral_) {
        return weight;
    }
    auto mat = weight.reshape({weight.size(0), -1});
    auto sigma = torch::dot(u, torch::mv(mat, v)).clamp_min(kSpectralNormEpsilon);
    return weight / sigma;
}

torch::Tensor Conv2dSNImpl::forward(const torch::Tensor& x) {
    return F::conv2d(x, normalized_weight(), F::Conv2dFuncOptions().bias(bias).padding(padding_));
}

void Conv2dSNImpl::refresh(int n_iters) {
    if (!spectral_) {
        return;
    }
    torch::NoGradGuard no_grad;
    auto res = spectral_norm_apply(weight, u, n_iters);
    u.copy_(res.u);
    v.copy_(res.v);
}

LinearSNImpl::LinearSNImpl(std::int64_t in_features, std::int64_t out_features, bool spectral)
    : spectral_(spectral) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
    weight = register_parameter("weight", torch::empty({out_features, in_features}).uniform_(-bound, bound));
    bias = register_parameter("bias", torch::zeros({out_features}));
    u = register_buffer("u", initial_u(out_features));
    v = register_buffer("v", torch::zeros({in_features}));
    if (spectral_) {
        refresh(5);
    }
}

torch::Tensor LinearSNImpl::normalized_weight() const {
    if (!spectral_) {
        return weight;
    }
    auto sigma = torch::dot(u, torch::mv(weight, v)).clamp_min(kSpectralNormEpsilon);
    return weight / sigma;
}

torch::Tensor LinearSNImpl::forward(const torch::Tensor& x) {
    return F::linear(x, normalized_weight(), bias);
}

void LinearSNImpl::refresh(int n_iters) {
    if (!spectral_) {
        return;
    }
    torch::NoGradGuard no_grad;
    auto res = spectral_norm_apply(weight, u, n_iters);
    u.copy_(res.u);
    v.copy_(res.v);
}

Norm2dImpl::Norm2dImpl(std::int64_t channels, Norm kind) {
    if (kind == Norm::Batch) {
        bn_ = register_module("bn", torch::nn::BatchNorm2d(channels));
    }
}

torch::Tensor Norm2dImpl::forward(const torch::Tensor& x) {
    return bn_ ? bn_->forward(x) : x;
}

SelfAttentionImpl::SelfAttentionImpl(std::int64_t channels, bool spectral) {
    const auto inner = std::max<std::int64_t>(channels / 8, 1);
    query_ = register_module("query", Conv2dSN(channels, inner, 1, spectral));
    key_ = register_module("key", Conv2dSN(channels, inner, 1, spectral));
    value_ = register_module("value", Conv2dSN(channels, channels, 1, spectral));
    gamma = register_parameter("gamma", torch::zeros({1}));
}

torch::Tensor SelfAttentionImpl::attention_weights(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto n = x.size(2) * x.size(3);
    auto q = query_->forward(x).reshape({b, -1, n});
    auto k = key_->forward(x).reshape({b, -1, n});
    return torch::softmax(torch::bmm(q.transpose(1, 2), k), /*dim=*/-1);
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto n = x.size(2) * x.size(3);
    auto attn = attention_weights(x);
    auto v = value_->forward(x).reshape({b, x.size(1), n});
    auto out = torch::bmm(v, attn.transpose(1, 2)).reshape(x.sizes());
    return x + gamma * out;
}

ResBlockImpl::ResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, Resample resample,
                           Norm norm, bool spectral)
    : resample_(resample) {
    const auto first_out = resample == Resample::Up ? out_channels * 4 : out_channels;
    norm1_ = register_module("norm1", Norm2d(in_channels, norm));
    conv1_ = register_module("conv1", Conv2dSN(in_channels, first_out, 3, spectral));
    norm2_ = register_module("norm2", Norm2d(out_channels, norm));
    conv2_ = register_module("conv2", Conv2dSN(out_channels, out_channels, 3, spectral));
    if (resample == Resample::Up || in_channels != out_channels) {
        skip_ = register_module("skip", Conv2dSN(in_channels, first_out, 1, spectral));
    }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
    auto h = conv1_->forward(torch::relu(norm1_->forward(x)));
    if (resample_ == Resample::Up) {
        h = uninpaint::pixel_shuffle(h, 2).contiguous(at::MemoryFormat::ChannelsLast);
    } else if (resample_ == Resample::Down) {
        h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2));
    }
    h = conv2_->forward(torch::relu(norm2_->forward(h)));

    // A 1x1 convolution commutes with average pooling, so pool first.
    auto s = resample_ == Resample::Down ? F::avg_pool2d(x, F::AvgPool2dFuncOptions(2)) : x;
    if (skip_) {
        s = skip_->forward(s);
    }
    if (resample_ == Resample::Up) {
        s = uninpaint::pixel_shuffle(s, 2).contiguous(at::MemoryFormat::ChannelsLast);
    }
    return h + s;
}

void refresh_spectral_norms(torch::nn::Module& module, int n_iters) {
    if (auto* conv = dynamic_cast<Conv2dSNImpl*>(&module)) {
        conv->refresh(n_iters);
    } else if (auto* linear = dynamic_cast<LinearSNImpl*>(&module)) {
        linear->refresh(n_iters);
    }
    for (const auto& child : module.modules(/*include_self=*/false)) {
        if (auto conv = std::dynamic_pointer_cast<Conv2dSNImpl>(child)) {
            conv->refresh(n_iters);
        } else if (auto linear = std::dynamic_pointer_cast<LinearSNImpl>(child)) {
            linear->refresh(n_iters);
        }
    }
}

double top_singular_value(const torch::Tensor& weight) {
    auto mat = weight.detach().to(torch::kFloat64).reshape({weight.size(0), -1});
    return torch::linalg_svdvals(mat).max().item<double>();
}

} // namespace uninpaint
