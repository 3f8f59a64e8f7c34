#include "uninpaint/nets.hpp"

#include <algorithm>
#include <sstream>

#include "uninpaint/errors.hpp"

namespace uninpaint {

std::int64_t stage_width(std::int64_t base_width, std::int64_t level) {
    return base_width * std::min<std::int64_t>(std::int64_t{1} << level, 8);
}

namespace {

void validate_common(const char* name, std::int64_t channels, std::int64_t resolution, std::int64_t base_width,
                     std::int64_t n_blocks) {
    std::ostringstream msg;
    msg << name << ": ";
    if (channels <= 0 || base_width <= 0 || n_blocks < 0) {
        msg << "channels, base_width must be positive and n_blocks non-negative";
        throw ConfigError(msg.str());
    }
    if (resolution <= 0 || resolution % (std::int64_t{1} << n_blocks) != 0) {
        msg << "resolution " << resolution << " is not divisible by 2^" << n_blocks;
        throw ConfigError(msg.str());
    }
}

bool has(const std::vector<std::int64_t>& v, std::int64_t x) {
    return std::find(v.begin(), v.end(), x) != v.end();
}

void check_image(const char* who, const torch::Tensor& t, std::int64_t channels, std::int64_t resolution) {
    if (t.dim() != 4 || t.size(1) != channels || t.size(2) != resolution || t.size(3) != resolution) {
        std::ostringstream msg;
        msg << who << ": expected [B, " << channels << ", " << resolution << ", " << resolution << "], got "
            << t.sizes();
        throw ContractViolation(msg.str());
    }
}

} // namespace

void GeneratorSpec::validate() const {
    validate_common("generator", image_channels, resolution, base_width, n_blocks);
    if (z_dim <= 0 || z_channels <= 0) {
        throw ConfigError("generator: z_dim and z_channels must be positive");
    }
}

void DiscriminatorSpec::validate() const {
    validate_common("discriminator", image_channels, resolution, base_width, n_blocks);
}

void EncoderSpec::validate() const {
    validate_common("encoder", image_channels, resolution, base_width, n_blocks);
    if (z_dim <= 0) {
        throw ConfigError("encoder: z_dim must be positive");
    }
}

void ModelSpecs::validate() const {
    generator.validate();
    discriminator.validate();
    encoder.validate();
    if (generator.z_dim != encoder.z_dim) {
        throw ConfigError("generator and encoder disagree on z_dim");
    }
    if (generator.resolution != discriminator.resolution || generator.resolution != encoder.resolution ||
        generator.image_channels != discriminator.image_channels ||
        generator.image_channels != encoder.image_channels) {
        throw ConfigError("generator, discriminator and encoder disagree on image geometry");
    }
}

ModelSpecs desk_specs(std::int64_t resolution) {
    ModelSpecs s;
    s.generator.resolution = s.discriminator.resolution = s.encoder.resolution = resolution;
    return s;
}

ModelSpecs toy_specs() {
    ModelSpecs s;
    s.generator = {.image_channels = 3,
                   .resolution = 32,
                   .base_width = 8,
                   .n_blocks = 2,
                   .z_dim = 16,
                   .z_channels = 8,
                   .attention_at = {8},
                   .norm = Norm::Batch};
    s.discriminator = {.image_channels = 3,
                       .resolution = 32,
                       .base_width = 8,
                       .n_blocks = 2,
                       .attention_at = {},
                       .norm = Norm::Batch};
    s.encoder = {.image_channels = 3, .resolution = 32, .base_width = 8, .n_blocks = 2, .z_dim = 16,
                 .norm = Norm::Batch};
    return s;
}

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
    j = {{"image_channels", s.image_channels}, {"resolution", s.resolution}, {"base_width", s.base_width},
         {"n_blocks", s.n_blocks},             {"z_dim", s.z_dim},           {"z_channels", s.z_channels},
         {"attention_at", s.attention_at},     {"norm", to_string(s.norm)},  {"in_channels", s.in_channels()}};
}

void from_json(const nlohmann::json& j, GeneratorSpec& s) {
    GeneratorSpec o;
    o.image_channels = j.value("image_channels", o.image_channels);
    o.resolution = j.value("resolution", o.resolution);
    o.base_width = j.value("base_width", o.base_width);
    o.n_blocks = j.value("n_blocks", o.n_blocks);
    o.z_dim = j.value("z_dim", o.z_dim);
    o.z_channels = j.value("z_channels", o.z_channels);
    o.attention_at = j.value("attention_at", o.attention_at);
    o.norm = norm_from_string(j.value("norm", to_string(o.norm)));
    s = o;
}

void to_json(nlohmann::json& j, const DiscriminatorSpec& s) {
    j = {{"image_channels", s.image_channels}, {"resolution", s.resolution},
         {"base_width", s.base_width},         {"n_blocks", s.n_blocks},
         {"attention_at", s.attention_at},     {"norm", to_string(s.norm)}};
}

void from_json(const nlohmann::json& j, DiscriminatorSpec& s) {
    DiscriminatorSpec o;
    o.image_channels = j.value("image_channels", o.image_channels);
    o.resolution = j.value("resolution", o.resolution);
    o.base_width = j.value("base_width", o.base_width);
    o.n_blocks = j.value("n_blocks", o.n_blocks);
    o.attention_at = j.value("attention_at", o.attention_at);
    o.norm = norm_from_string(j.value("norm", to_string(o.norm)));
    s = o;
}

void to_json(nlohmann::json& j, const EncoderSpec& s) {
    j = {{"image_channels", s.image_channels}, {"resolution", s.resolution}, {"base_width", s.base_width},
         {"n_blocks", s.n_blocks},             {"z_dim", s.z_dim},           {"norm", to_string(s.norm)}};
}

void from_json(const nlohmann::json& j, EncoderSpec& s) {
    EncoderSpec o;
    o.image_channels = j.value("image_channels", o.image_channels);
    o.resolution = j.value("resolution", o.resolution);
    o.base_width = j.value("base_width", o.base_width);
    o.n_blocks = j.value("n_blocks", o.n_blocks);
    o.z_dim = j.value("z_dim", o.z_dim);
    o.norm = norm_from_string(j.value("norm", to_string(o.norm)));
    s = o;
}

void to_json(nlohmann::json& j, const ModelSpecs& s) {
    j = {{"generator", s.generator}, {"discriminator", s.discriminator}, {"encoder", s.encoder}};
}

void from_json(const nlohmann::json& j, ModelSpecs& s) {
    ModelSpecs o;
    if (j.contains("generator")) {
        o.generator = j.at("generator").get<GeneratorSpec>();
    }
    if (j.contains("discriminator")) {
        o.discriminator = j.at("discriminator").get<DiscriminatorSpec>();
    }
    if (j.contains("encoder")) {
        o.encoder = j.at("encoder").get<EncoderSpec>();
    }
    s = o;
}

GeneratorImpl::GeneratorImpl(GeneratorSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const auto n = spec_.n_blocks;
    const auto w = spec_.base_width;
    z_proj_ = register_module("z_proj", torch::nn::Linear(spec_.z_dim, spec_.z_channels));
    stem_ = register_module("stem", Conv2dSN(spec_.in_channels(), stage_width(w, 0), 3));
    for (std::int64_t i = 0; i < n; ++i) {
        down_->push_back(ResBlock(stage_width(w, i), stage_width(w, i + 1), Resample::Down, spec_.norm));
    }
    register_module("down", down_);
    mid_ = register_module("mid", ResBlock(stage_width(w, n), stage_width(w, n), Resample::None, spec_.norm));
    if (has(spec_.attention_at, spec_.resolution >> n)) {
        mid_attention_ = register_module("mid_attention", SelfAttention(stage_width(w, n)));
    }
    // up_[j] maps level n - j to level n - j - 1.
    for (std::int64_t j = 0; j < n; ++j) {
        const auto level = n - j - 1;
        up_->push_back(ResBlock(stage_width(w, level + 1), stage_width(w, level), Resample::Up, spec_.norm));
        SelfAttention attn{nullptr};
        if (has(spec_.attention_at, spec_.resolution >> level)) {
            attn = register_module("up_attention_" + std::to_string(j), SelfAttention(stage_width(w, level)));
        }
        up_attention_.push_back(attn);
    }
    register_module("up", up_);
    out_norm_ = register_module("out_norm", Norm2d(stage_width(w, 0), spec_.norm));
    out_conv_ = register_module("out_conv", Conv2dSN(stage_width(w, 0), spec_.image_channels, 3));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& y, const torch::Tensor& m_y, const torch::Tensor& z) {
    check_image("generator input", y, spec_.image_channels, spec_.resolution);
    check_image("generator mask", m_y, 1, spec_.resolution);
    const auto b = y.size(0);
    if (m_y.size(0) != b || z.dim() != 2 || z.size(0) != b || z.size(1) != spec_.z_dim) {
        std::ostringstream msg;
        msg << "generator: latent batch " << z.sizes() << " / mask " << m_y.sizes() << " do not match y "
            << y.sizes() << " with z_dim " << spec_.z_dim;
        throw ContractViolation(msg.str());
    }
    {
        torch::NoGradGuard no_grad;
        if ((y * (1.0 - m_y)).abs().max().item<double>() != 0.0) {
            throw ContractViolation("generator: observation has non-zero values in its masked region");
        }
    }
    auto zmap = z_proj_->forward(z).reshape({b, spec_.z_channels, 1, 1}).expand(
        {b, spec_.z_channels, spec_.resolution, spec_.resolution});
    auto h = stem_->forward(torch::cat({y, m_y, zmap}, 1).contiguous(at::MemoryFormat::ChannelsLast));

    std::vector<torch::Tensor> skips{h};
    for (const auto& block : *down_) {
        h = block->as<ResBlockImpl>()->forward(h);
        skips.push_back(h);
    }
    h = mid_->forward(h);
    if (mid_attention_) {
        h = mid_attention_->forward(h);
    }
    const auto n = spec_.n_blocks;
    for (std::int64_t j = 0; j < n; ++j) {
        h = up_[j]->as<ResBlockImpl>()->forward(h);
        h = h + skips[static_cast<std::size_t>(n - j - 1)];
        if (up_attention_[static_cast<std::size_t>(j)]) {
            h = up_attention_[static_cast<std::size_t>(j)]->forward(h);
        }
    }
    h = out_conv_->forward(torch::relu(out_norm_->forward(h)));
    return (torch::tanh(h) + 1.0) * 0.5;
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const auto w = spec_.base_width;
    stem_ = register_module("stem", Conv2dSN(spec_.image_channels, stage_width(w, 0), 3));
    if (has(spec_.attention_at, spec_.resolution)) {
        stem_attention_ = register_module("stem_attention", SelfAttention(stage_width(w, 0)));
    }
    for (std::int64_t i = 0; i < spec_.n_blocks; ++i) {
        down_->push_back(ResBlock(stage_width(w, i), stage_width(w, i + 1), Resample::Down, spec_.norm));
        SelfAttention attn{nullptr};
        if (has(spec_.attention_at, spec_.resolution >> (i + 1))) {
            attn = register_module("attention_" + std::to_string(i), SelfAttention(stage_width(w, i + 1)));
        }
        attention_.push_back(attn);
    }
    register_module("down", down_);
    head_ = register_module("head", LinearSN(stage_width(w, spec_.n_blocks), 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& y) {
    check_image("discriminator input", y, spec_.image_channels, spec_.resolution);
    auto h = stem_->forward(y.contiguous(at::MemoryFormat::ChannelsLast));
    if (stem_attention_) {
        h = stem_attention_->forward(h);
    }
    for (std::size_t i = 0; i < down_->size(); ++i) {
        h = down_[i]->as<ResBlockImpl>()->forward(h);
        if (attention_[i]) {
            h = attention_[i]->forward(h);
        }
    }
    h = torch::relu(h).sum({2, 3});
    return head_->forward(h).squeeze(1);
}

EncoderImpl::EncoderImpl(EncoderSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const auto w = spec_.base_width;
    stem_ = register_module("stem", Conv2dSN(spec_.image_channels, stage_width(w, 0), 3, /*spectral=*/false));
    for (std::int64_t i = 0; i < spec_.n_blocks; ++i) {
        down_->push_back(
            ResBlock(stage_width(w, i), stage_width(w, i + 1), Resample::Down, spec_.norm, /*spectral=*/false));
    }
    register_module("down", down_);
    const auto features = stage_width(w, spec_.n_blocks);
    mean_head_ = register_module("mean_head", torch::nn::Linear(features, spec_.z_dim));
    logvar_head_ = register_module("logvar_head", torch::nn::Linear(features, spec_.z_dim));
}

EncoderOutput EncoderImpl::forward(const torch::Tensor& y) {
    check_image("encoder input", y, spec_.image_channels, spec_.resolution);
    auto h = stem_->forward(y.contiguous(at::MemoryFormat::ChannelsLast));
    for (const auto& block : *down_) {
        h = block->as<ResBlockImpl>()->forward(h);
    }
    h = torch::relu(h).mean({2, 3});
    return {mean_head_->forward(h), logvar_head_->forward(h)};
}

torch::Tensor reparameterize(const torch::Tensor& mean, const torch::Tensor& logvar, const torch::Tensor& eps) {
    if (mean.sizes() != logvar.sizes() || mean.sizes() != eps.sizes()) {
        throw ContractViolation("reparameterize: mean, logvar and eps shapes differ");
    }
    return mean + torch::exp(0.5 * logvar) * eps;
}

std::int64_t parameter_count(const torch::nn::Module& module) {
    std::int64_t total = 0;
    for (const auto& p : module.parameters()) {
        total += p.numel();
    }
    return total;
}

} // namespace uninpaint
