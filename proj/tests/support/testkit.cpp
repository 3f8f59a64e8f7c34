#include "testkit.hpp"

#include <atomic>
#include <cmath>
#include <random>

#include <ATen/CPUGeneratorImpl.h>

#include "uninpaint/corruption.hpp"
#include "uninpaint/layers.hpp"

namespace uninpaint::testkit {

ModelSpecs tiny_specs(Norm norm, std::int64_t channels) {
    ModelSpecs s;
    s.generator = {.image_channels = channels,
                   .resolution = 8,
                   .base_width = 2,
                   .n_blocks = 1,
                   .z_dim = 3,
                   .z_channels = 2,
                   .attention_at = {4},
                   .norm = norm};
    s.discriminator = {.image_channels = channels,
                       .resolution = 8,
                       .base_width = 2,
                       .n_blocks = 1,
                       .attention_at = {8},
                       .norm = norm};
    s.encoder = {.image_channels = channels, .resolution = 8, .base_width = 2, .n_blocks = 1, .z_dim = 3,
                 .norm = norm};
    return s;
}

TrainConfig tiny_config(std::int64_t batch, std::uint64_t seed) {
    TrainConfig c;
    c.batch_size = batch;
    c.accumulation_steps = 1;
    c.total_steps = 0;
    c.seed = seed;
    c.measurement = MeasurementConfig::drop_pixel(0.5);
    return c;
}

ObservationSet random_observations(std::int64_t n, const ModelSpecs& specs, const MeasurementConfig& m,
                                   std::uint64_t seed, torch::Dtype dtype) {
    const auto res = specs.generator.resolution;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed + 1);
    auto clean = torch::rand({n, specs.generator.image_channels, res, res}, gen, torch::kFloat32) * 0.9 + 0.05;
    auto set = corrupt_once(clean, m, seed, /*keep_clean=*/true);
    set.y = set.y.to(dtype);
    set.mask = set.mask.to(dtype);
    set.clean = set.clean.to(dtype);
    return set;
}

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

double relative_error(const torch::Tensor& analytic, const torch::Tensor& numeric) {
    const double diff = (analytic - numeric).norm().item<double>();
    const double scale = std::max(analytic.norm().item<double>(), numeric.norm().item<double>());
    return scale == 0.0 ? diff : diff / scale;
}

torch::Tensor numeric_gradient(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& params,
                               double h) {
    torch::NoGradGuard no_grad;
    std::vector<double> out;
    for (const auto& p : params) {
        auto flat = p.view({-1});
        for (std::int64_t i = 0; i < flat.numel(); ++i) {
            const double orig = flat[i].item<double>();
            flat[i].fill_(orig + h);
            const double up = f().item<double>();
            flat[i].fill_(orig - h);
            const double down = f().item<double>();
            flat[i].fill_(orig);
            out.push_back((up - down) / (2.0 * h));
        }
    }
    return torch::tensor(out, torch::kFloat64);
}

torch::Tensor analytic_gradient(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& params) {
    auto value = f();
    auto grads = torch::autograd::grad({value}, params, {}, /*retain_graph=*/false, /*create_graph=*/false,
                                       /*allow_unused=*/true);
    std::vector<torch::Tensor> flat;
    for (std::size_t i = 0; i < params.size(); ++i) {
        flat.push_back(grads[i].defined() ? grads[i].reshape({-1}).to(torch::kFloat64)
                                          : torch::zeros({params[i].numel()}, torch::kFloat64));
    }
    return torch::cat(flat);
}

double gradient_error(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& params, double h) {
    auto a = analytic_gradient(f, params);
    auto n = numeric_gradient(f, params, h);
    return relative_error(a, n);
}

void pure_gan_update(TrainState& state, const ObservationBatch& batch, const StepDraws& draws, const TrainConfig& cfg) {
    auto& G = state.generator;
    auto& D = state.discriminator;
    G->train();
    D->train();
    state.encoder->train();
    refresh_spectral_norms(*G, cfg.spectral_norm_iterations);
    refresh_spectral_norms(*D, cfg.spectral_norm_iterations);
    refresh_spectral_norms(*state.encoder, cfg.spectral_norm_iterations);

    const auto dtype = batch.y.scalar_type();
    const auto m_fresh = draws.fresh_mask.to(dtype);
    const auto z = draws.z.to(dtype);
    auto simulate = [&] {
        auto x_tilde = G->forward(batch.y, batch.mask, z) * (1.0 - batch.mask) + batch.y;
        return x_tilde * m_fresh;
    };

    state.zero_grad();
    torch::Tensor y_tilde;
    {
        torch::NoGradGuard no_grad;
        y_tilde = simulate();
    }
    // Separate statements: batch-norm running statistics depend on call order.
    auto real_scores = D->forward(batch.y);
    auto fake_scores = D->forward(y_tilde);
    auto d_loss = torch::relu(1.0 - real_scores).mean() + torch::relu(1.0 + fake_scores).mean();
    d_loss.backward();
    state.opt_d->step();

    state.zero_grad();
    for (auto& p : D->parameters()) {
        p.set_requires_grad(false);
    }
    auto g_loss = -D->forward(simulate()).mean();
    g_loss.backward();
    for (auto& p : D->parameters()) {
        p.set_requires_grad(true);
    }
    state.opt_g->step();
    state.opt_e->step();
    state.zero_grad();
    state.step += 1;
}

double frechet_1d(double mean_a, double var_a, double mean_b, double var_b) {
    const double ds = std::sqrt(var_a) - std::sqrt(var_b);
    return (mean_a - mean_b) * (mean_a - mean_b) + ds * ds;
}

double population_std(const std::vector<double>& values) {
    double mean = 0.0;
    for (double v : values) {
        mean += v;
    }
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) {
        var += (v - mean) * (v - mean);
    }
    return std::sqrt(var / static_cast<double>(values.size()));
}

std::vector<torch::Tensor> parameters_of(const torch::nn::Module& m) {
    return m.parameters();
}

bool parameters_equal(const torch::nn::Module& a, const torch::nn::Module& b, bool include_buffers) {
    auto pa = a.named_parameters();
    auto pb = b.named_parameters();
    if (pa.size() != pb.size()) {
        return false;
    }
    for (const auto& item : pa) {
        const auto* other = pb.find(item.key());
        if (other == nullptr || !torch::equal(item.value(), *other)) {
            return false;
        }
    }
    if (include_buffers) {
        auto ba = a.named_buffers();
        auto bb = b.named_buffers();
        for (const auto& item : ba) {
            const auto* other = bb.find(item.key());
            if (other == nullptr || !torch::equal(item.value(), *other)) {
                return false;
            }
        }
    }
    return true;
}

double max_parameter_relative_diff(const torch::nn::Module& a, const torch::nn::Module& b) {
    double worst = 0.0;
    auto pb = b.named_parameters();
    for (const auto& item : a.named_parameters()) {
        worst = std::max(worst, relative_error(item.value().to(torch::kFloat64), pb[item.key()].to(torch::kFloat64)));
    }
    return worst;
}

double parameter_change(const torch::nn::Module& before, const torch::nn::Module& after) {
    double worst = 0.0;
    auto pa = after.named_parameters();
    for (const auto& item : before.named_parameters()) {
        worst = std::max(worst, (item.value() - pa[item.key()]).norm().item<double>());
    }
    return worst;
}

} // namespace uninpaint::testkit
