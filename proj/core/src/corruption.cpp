#include "uninpaint/corruption.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "uninpaint/errors.hpp"

namespace uninpaint {

std::string to_string(CorruptionKind kind) {
    return kind == CorruptionKind::Patch ? "patch" : "drop";
}

CorruptionKind corruption_kind_from_string(const std::string& name) {
    if (name == "patch" || name == "Patch") {
        return CorruptionKind::Patch;
    }
    if (name == "drop" || name == "DropPixel" || name == "drop_pixel") {
        return CorruptionKind::DropPixel;
    }
    throw ConfigError("unknown corruption kind '" + name + "' (expected patch or drop)");
}

MeasurementConfig MeasurementConfig::patch(std::int64_t n, std::int64_t k, std::int64_t border) {
    MeasurementConfig cfg;
    cfg.kind = CorruptionKind::Patch;
    cfg.n = n;
    cfg.k = k;
    cfg.border = border;
    return cfg;
}

MeasurementConfig MeasurementConfig::drop_pixel(double p) {
    MeasurementConfig cfg;
    cfg.kind = CorruptionKind::DropPixel;
    cfg.p = p;
    return cfg;
}

void MeasurementConfig::validate() const {
    if (!std::isfinite(tau)) {
        throw ConfigError("measurement tau must be finite");
    }
    if (kind == CorruptionKind::Patch) {
        if (n <= 0 || k <= 0) {
            throw ConfigError("Patch requires n > 0 and k > 0");
        }
        if (border < 0) {
            throw ConfigError("Patch border must be non-negative");
        }
    } else if (!(p >= 0.0 && p <= 1.0)) {
        throw ConfigError("DropPixel requires 0 <= p <= 1");
    }
}

void MeasurementConfig::validate(std::int64_t height, std::int64_t width) const {
    validate();
    if (height <= 0 || width <= 0) {
        throw ConfigError("image dimensions must be positive");
    }
    if (kind == CorruptionKind::Patch && k + 2 * border > std::min(height, width)) {
        std::ostringstream msg;
        msg << "Patch geometry k=" << k << " border=" << border << " does not fit a " << height
            << "x" << width << " image";
        throw ConfigError(msg.str());
    }
}

void to_json(nlohmann::json& j, const MeasurementConfig& cfg) {
    j = nlohmann::json{{"kind", to_string(cfg.kind)}, {"n", cfg.n},           {"k", cfg.k},
                       {"p", cfg.p},                  {"border", cfg.border}, {"tau", cfg.tau}};
}

void from_json(const nlohmann::json& j, MeasurementConfig& cfg) {
    MeasurementConfig out;
    if (j.contains("kind")) {
        out.kind = corruption_kind_from_string(j.at("kind").get<std::string>());
    }
    out.n = j.value("n", out.n);
    out.k = j.value("k", out.k);
    out.p = j.value("p", out.p);
    out.border = j.value("border", out.border);
    out.tau = j.value("tau", out.tau);
    out.validate();
    cfg = out;
}

Mask::Mask(torch::Tensor bits) : bits_(std::move(bits)) {
    if (bits_.dim() != 2) {
        throw ContractViolation("mask must be a 2-D [H, W] tensor");
    }
    bits_ = bits_.to(torch::kFloat32).contiguous();
    auto binary = torch::logical_or(bits_ == 0.0f, bits_ == 1.0f).all().item<bool>();
    if (!binary) {
        throw ContractViolation("mask entries must be 0 or 1");
    }
}

Mask Mask::ones(std::int64_t height, std::int64_t width) {
    return Mask(torch::ones({height, width}));
}

Mask Mask::zeros(std::int64_t height, std::int64_t width) {
    return Mask(torch::zeros({height, width}));
}

std::int64_t Mask::count_ones() const {
    return static_cast<std::int64_t>(std::llround(bits_.sum().item<double>()));
}

Mask Mask::complement() const {
    return Mask(1.0f - bits_);
}

bool Mask::operator==(const Mask& other) const {
    return bits_.sizes() == other.bits_.sizes() && torch::equal(bits_, other.bits_);
}

Mask sample_patch_mask(const MeasurementConfig& cfg, std::int64_t height, std::int64_t width,
                       std::mt19937_64& rng) {
    if (cfg.kind != CorruptionKind::Patch) {
        throw ContractViolation("sample_patch_mask called with a non-Patch configuration");
    }
    cfg.validate(height, width);
    auto bits = torch::zeros({height, width});
    std::uniform_int_distribution<std::int64_t> row(cfg.border, height - cfg.k - cfg.border);
    std::uniform_int_distribution<std::int64_t> col(cfg.border, width - cfg.k - cfg.border);
    for (std::int64_t i = 0; i < cfg.n; ++i) {
        const auto top = row(rng);
        const auto left = col(rng);
        bits.slice(0, top, top + cfg.k).slice(1, left, left + cfg.k).fill_(1.0f);
    }
    return Mask(bits);
}

Mask sample_drop_pixel_mask(const MeasurementConfig& cfg, std::int64_t height, std::int64_t width,
                            std::mt19937_64& rng) {
    if (cfg.kind != CorruptionKind::DropPixel) {
        throw ContractViolation("sample_drop_pixel_mask called with a non-DropPixel configuration");
    }
    cfg.validate(height, width);
    const std::int64_t total = height * width;
    const auto dropped = static_cast<std::int64_t>(std::llround(cfg.p * static_cast<double>(total)));

    // Partial Fisher-Yates: the first `dropped` slots are a uniform sample
    // without replacement.
    std::vector<std::int64_t> idx(static_cast<std::size_t>(total));
    std::iota(idx.begin(), idx.end(), 0);
    for (std::int64_t i = 0; i < dropped; ++i) {
        std::uniform_int_distribution<std::int64_t> pick(i, total - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    auto bits = torch::ones({total});
    auto acc = bits.accessor<float, 1>();
    for (std::int64_t i = 0; i < dropped; ++i) {
        acc[idx[static_cast<std::size_t>(i)]] = 0.0f;
    }
    return Mask(bits.view({height, width}));
}

Mask sample_mask(const MeasurementConfig& cfg, std::int64_t height, std::int64_t width,
                 std::mt19937_64& rng) {
    return cfg.kind == CorruptionKind::Patch ? sample_patch_mask(cfg, height, width, rng)
                                             : sample_drop_pixel_mask(cfg, height, width, rng);
}

torch::Tensor broadcast_mask(const torch::Tensor& mask, const torch::Tensor& image) {
    if (image.dim() < 3) {
        throw ContractViolation("image must be [C, H, W] or [B, C, H, W]");
    }
    torch::Tensor m = mask;
    if (m.dim() == 2) {
        m = m.unsqueeze(0);
    }
    if (m.dim() == 3 && image.dim() == 4) {
        m = m.unsqueeze(0);
    }
    if (m.dim() != image.dim() || m.size(-3) != 1 || m.size(-2) != image.size(-2) ||
        m.size(-1) != image.size(-1) || (image.dim() == 4 && m.size(0) != 1 && m.size(0) != image.size(0))) {
        std::ostringstream msg;
        msg << "mask shape " << mask.sizes() << " is incompatible with image shape " << image.sizes();
        throw ContractViolation(msg.str());
    }
    return m.to(image.scalar_type());
}

torch::Tensor apply_measurement(const torch::Tensor& x, const torch::Tensor& mask, double tau) {
    auto m = broadcast_mask(mask, x);
    if (tau == 0.0) {
        return x * m;
    }
    return x * m + tau * (1.0 - m);
}

torch::Tensor apply_measurement(const torch::Tensor& x, const Mask& mask, double tau) {
    return apply_measurement(x, mask.bits(), tau);
}

torch::Tensor extract_mask(const torch::Tensor& y, double tau) {
    if (y.dim() < 3) {
        throw ContractViolation("observation must be [C, H, W] or [B, C, H, W]");
    }
    auto filled = (y == tau).all(/*dim=*/-3, /*keepdim=*/true);
    return torch::logical_not(filled).to(y.scalar_type());
}

Mask extract_mask_image(const torch::Tensor& y, double tau) {
    if (y.dim() != 3) {
        throw ContractViolation("extract_mask_image expects a single [C, H, W] image");
    }
    return Mask(extract_mask(y, tau).squeeze(0).to(torch::kFloat32));
}

torch::Tensor compose_reconstruction(const torch::Tensor& g_out, const torch::Tensor& y,
                                     const torch::Tensor& m_y) {
    if (g_out.sizes() != y.sizes()) {
        std::ostringstream msg;
        msg << "generator output " << g_out.sizes() << " does not match observation " << y.sizes();
        throw ContractViolation(msg.str());
    }
    auto m = broadcast_mask(m_y, y);
    return g_out * (1.0 - m) + y;
}

void Observation::validate() const {
    if (y.dim() != 3 || y.size(1) != mask.height() || y.size(2) != mask.width()) {
        throw ContractViolation("observation image and mask shapes disagree");
    }
    auto masked = y * (1.0 - mask.as_channel()) + config.tau * mask.as_channel();
    if (!torch::all(masked == config.tau).item<bool>()) {
        throw ContractViolation("observation '" + source_id + "' has masked pixels different from tau");
    }
}

} // namespace uninpaint
