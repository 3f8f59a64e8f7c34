#include "uninpaint/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "uninpaint/checkpoint.hpp"
#include "uninpaint/errors.hpp"
#include "uninpaint/rng.hpp"

namespace uninpaint {

std::string to_string(EncoderZInput e) {
    return e == EncoderZInput::MaskedGenerated ? "masked_generated" : "full";
}

EncoderZInput encoder_z_input_from_string(const std::string& name) {
    if (name == "masked_generated") {
        return EncoderZInput::MaskedGenerated;
    }
    if (name == "full") {
        return EncoderZInput::Full;
    }
    throw ConfigError("unknown encoder_z_input '" + name + "'");
}

void TrainConfig::validate() const {
    if (batch_size < 1 || accumulation_steps < 1) {
        throw ConfigError("batch_size and accumulation_steps must be >= 1");
    }
    if (!(lr_g > 0.0) || !(lr_d > 0.0) || !(lr_e > 0.0)) {
        throw ConfigError("learning rates must be positive");
    }
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (total_steps < 0 || checkpoint_every < 0 || spectral_norm_iterations < 1 || threads < 1) {
        throw ConfigError("total_steps/checkpoint_every must be >= 0, spectral_norm_iterations and threads >= 1");
    }
    if (measurement.tau != 0.0) {
        throw ConfigError("training supports tau = 0 only");
    }
    loss_weights.validate();
    measurement.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"batch_size", c.batch_size},
         {"accumulation_steps", c.accumulation_steps},
         {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2},
         {"lr_g", c.lr_g},
         {"lr_d", c.lr_d},
         {"lr_e", c.lr_e},
         {"total_steps", c.total_steps},
         {"seed", c.seed},
         {"loss_weights", c.loss_weights},
         {"measurement", c.measurement},
         {"compose", c.compose},
         {"algorithm1_mask_reading", c.algorithm1_mask_reading},
         {"encoder_z_input", to_string(c.encoder_z_input)},
         {"spectral_norm_iterations", c.spectral_norm_iterations},
         {"checkpoint_every", c.checkpoint_every},
         {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig o;
    o.batch_size = j.value("batch_size", o.batch_size);
    o.accumulation_steps = j.value("accumulation_steps", o.accumulation_steps);
    o.adam_beta1 = j.value("adam_beta1", o.adam_beta1);
    o.adam_beta2 = j.value("adam_beta2", o.adam_beta2);
    o.lr_g = j.value("lr_g", o.lr_g);
    o.lr_d = j.value("lr_d", o.lr_d);
    o.lr_e = j.value("lr_e", o.lr_e);
    o.total_steps = j.value("total_steps", o.total_steps);
    o.seed = j.value("seed", o.seed);
    if (j.contains("loss_weights")) {
        o.loss_weights = j.at("loss_weights").get<LossWeights>();
    }
    if (j.contains("measurement")) {
        o.measurement = j.at("measurement").get<MeasurementConfig>();
    }
    o.compose = j.value("compose", o.compose);
    o.algorithm1_mask_reading = j.value("algorithm1_mask_reading", o.algorithm1_mask_reading);
    o.encoder_z_input = encoder_z_input_from_string(j.value("encoder_z_input", to_string(o.encoder_z_input)));
    o.spectral_norm_iterations = j.value("spectral_norm_iterations", o.spectral_norm_iterations);
    o.checkpoint_every = j.value("checkpoint_every", o.checkpoint_every);
    o.threads = j.value("threads", o.threads);
    c = o;
}

void TrainState::to(torch::Dtype dtype) {
    generator->to(dtype);
    discriminator->to(dtype);
    encoder->to(dtype);
}

void TrainState::zero_grad() {
    opt_g->zero_grad();
    opt_d->zero_grad();
    opt_e->zero_grad();
}

namespace {

std::unique_ptr<torch::optim::Adam> make_adam(torch::nn::Module& module, double lr, const TrainConfig& cfg) {
    return std::make_unique<torch::optim::Adam>(
        module.parameters(), torch::optim::AdamOptions(lr).betas({cfg.adam_beta1, cfg.adam_beta2}));
}

} // namespace

TrainState make_train_state(const ModelSpecs& specs, const TrainConfig& cfg) {
    specs.validate();
    cfg.validate();
    TrainState state;
    state.specs = specs;
    state.seed = cfg.seed;
    auto init = stream_engine(cfg.seed, Stream::Init);
    torch::manual_seed(init());
    state.generator = Generator(specs.generator);
    state.discriminator = Discriminator(specs.discriminator);
    state.encoder = Encoder(specs.encoder);
    state.opt_g = make_adam(*state.generator, cfg.lr_g, cfg);
    state.opt_d = make_adam(*state.discriminator, cfg.lr_d, cfg);
    state.opt_e = make_adam(*state.encoder, cfg.lr_e, cfg);
    return state;
}

TrainState clone_state(const TrainState& state, const TrainConfig& cfg) {
    std::stringstream buffer;
    checkpoint_save(state, cfg, buffer);
    return checkpoint_load(buffer);
}

StepDraws draw_step_randomness(const TrainConfig& cfg, const ModelSpecs& specs, std::int64_t first_position,
                               std::int64_t count) {
    const auto res = specs.generator.resolution;
    auto masks = torch::empty({count, 1, res, res});
    for (std::int64_t j = 0; j < count; ++j) {
        auto engine = stream_engine(cfg.seed, Stream::FreshMask, static_cast<std::uint64_t>(first_position + j));
        masks[j][0].copy_(sample_mask(cfg.measurement, res, res, engine).bits());
    }
    return {masks, normal_rows(cfg.seed, Stream::Latent, first_position, count, specs.generator.z_dim),
            normal_rows(cfg.seed, Stream::EncoderNoise, first_position, count, specs.encoder.z_dim)};
}

ForwardPass forward_pass(TrainState& state, const ObservationBatch& batch, const StepDraws& draws,
                         const TrainConfig& cfg, bool need_z_branch, bool need_y_branch) {
    const auto dtype = batch.y.scalar_type();
    const auto& y = batch.y;
    const auto& m_y = batch.mask;
    auto m_fresh = draws.fresh_mask.to(dtype);
    auto z = draws.z.to(dtype);

    ForwardPass out;
    out.g_out = state.generator->forward(y, m_y, z);
    if (cfg.compose) {
        out.x_tilde = compose_reconstruction(out.g_out, y, cfg.algorithm1_mask_reading ? m_fresh : m_y);
    } else {
        out.x_tilde = out.g_out;
    }
    out.y_tilde = apply_measurement(out.x_tilde, m_fresh, cfg.measurement.tau);

    if (need_z_branch) {
        auto enc_in = cfg.encoder_z_input == EncoderZInput::MaskedGenerated ? out.y_tilde * (1.0 - m_y) : out.y_tilde;
        out.z_hat = state.encoder->forward(enc_in).mean;
    }
    if (need_y_branch) {
        auto enc = state.encoder->forward(y);
        out.z_tilde = reparameterize(enc.mean, enc.logvar, draws.eps.to(dtype));
        auto g2 = state.generator->forward(out.y_tilde, m_fresh, out.z_tilde);
        out.x_hat = cfg.compose ? compose_reconstruction(g2, out.y_tilde, m_fresh) : g2;
        out.y_hat = apply_measurement(out.x_hat, m_y, cfg.measurement.tau);
    }
    return out;
}

nlohmann::json UpdateReport::to_json() const {
    nlohmann::json j = losses;
    j["step"] = step;
    j["effective_batch"] = effective_batch;
    j["observed_max_abs_diff"] = observed_max_abs_diff;
    return j;
}

BufferSnapshot::BufferSnapshot(torch::nn::Module& module) {
    torch::NoGradGuard no_grad;
    for (auto& b : module.buffers()) {
        saved_.emplace_back(b, b.clone());
    }
}

BufferSnapshot::~BufferSnapshot() {
    torch::NoGradGuard no_grad;
    for (auto& [live, copy] : saved_) {
        live.copy_(copy);
    }
}

FreezeParameters::FreezeParameters(torch::nn::Module& module) {
    for (auto& p : module.parameters()) {
        if (p.requires_grad()) {
            p.set_requires_grad(false);
            params_.push_back(p);
        }
    }
}

FreezeParameters::~FreezeParameters() {
    for (auto& p : params_) {
        p.set_requires_grad(true);
    }
}

void require_finite(const torch::Tensor& value, const char* term, std::int64_t step, const ObservationBatch& batch) {
    if (std::isfinite(value.item<double>())) {
        return;
    }
    std::ostringstream msg;
    msg << "non-finite " << term << " at step " << step << " (batch ids:";
    for (auto id : batch.ids) {
        msg << ' ' << id;
    }
    msg << ')';
    throw NonFiniteLossError(msg.str());
}

UpdateReport train_update(TrainState& state, std::span<const ObservationBatch> micro_batches, const TrainConfig& cfg) {
    if (static_cast<std::int64_t>(micro_batches.size()) != cfg.accumulation_steps) {
        throw ContractViolation("train_update needs exactly accumulation_steps micro-batches");
    }
    for (const auto& b : micro_batches) {
        if (b.size() != cfg.batch_size) {
            throw ContractViolation("micro-batch size differs from cfg.batch_size");
        }
    }
    const auto& w = cfg.loss_weights;
    const bool need_z = w.lambda_z != 0.0;
    const bool need_y = w.lambda_y != 0.0;
    const double scale = 1.0 / static_cast<double>(cfg.accumulation_steps);
    const auto update_index = state.step;

    state.generator->train();
    state.discriminator->train();
    state.encoder->train();
    refresh_spectral_norms(*state.generator, cfg.spectral_norm_iterations);
    refresh_spectral_norms(*state.discriminator, cfg.spectral_norm_iterations);
    refresh_spectral_norms(*state.encoder, cfg.spectral_norm_iterations);

    std::vector<StepDraws> draws;
    for (std::size_t i = 0; i < micro_batches.size(); ++i) {
        const auto position = (update_index * cfg.accumulation_steps + static_cast<std::int64_t>(i)) * cfg.batch_size;
        draws.push_back(draw_step_randomness(cfg, state.specs, position, cfg.batch_size));
    }

    UpdateReport report;
    report.step = update_index + 1;
    report.effective_batch = cfg.effective_batch();

    // With a single micro-batch the generator/encoder pass is built once and
    // reused for the G phase: G does not depend on D, so it equals a fresh
    // pass. With several micro-batches the D phase runs a throwaway no-grad
    // pass instead (keeping every graph alive would defeat accumulation), and
    // batch-norm running statistics are restored afterwards so both routes
    // update them identically.
    const bool reuse = micro_batches.size() == 1;
    std::vector<ForwardPass> kept;

    // Discriminator ascent.
    state.zero_grad();
    for (std::size_t i = 0; i < micro_batches.size(); ++i) {
        const auto& batch = micro_batches[i];
        ForwardPass pass;
        if (reuse) {
            pass = forward_pass(state, batch, draws[i], cfg, need_z, need_y);
            kept.push_back(pass);
        } else {
            BufferSnapshot g_buffers(*state.generator);
            BufferSnapshot e_buffers(*state.encoder);
            torch::NoGradGuard no_grad;
            pass = forward_pass(state, batch, draws[i], cfg, /*need_z_branch=*/false, need_y);
        }
        auto s_real = state.discriminator->forward(batch.y);
        auto d_loss = d_adv_loss(s_real, state.discriminator->forward(pass.y_tilde.detach()), w.adv_form);
        if (need_y) {
            d_loss = d_loss +
                     w.lambda_y * d_adv_loss(s_real, state.discriminator->forward(pass.y_hat.detach()), w.adv_form);
        }
        require_finite(d_loss, "d_loss", update_index, batch);
        (d_loss * scale).backward();
        report.losses.d_loss += d_loss.item<double>() * scale;
    }
    state.opt_d->step();

    // Generator / encoder descent against the updated discriminator.
    state.zero_grad();
    {
        FreezeParameters frozen(*state.discriminator);
        for (std::size_t i = 0; i < micro_batches.size(); ++i) {
            const auto& batch = micro_batches[i];
            auto pass = reuse ? kept[i] : forward_pass(state, batch, draws[i], cfg, need_z, need_y);
            {
                torch::NoGradGuard no_grad;
                auto diff = ((pass.x_tilde - batch.y) * batch.mask).abs().max().item<double>();
                report.observed_max_abs_diff = std::max(report.observed_max_abs_diff, diff);
            }
            auto g_adv = g_adv_loss(state.discriminator->forward(pass.y_tilde), w.adv_form);
            require_finite(g_adv, "g_adv", update_index, batch);
            auto total = g_adv;
            report.losses.g_adv += g_adv.item<double>() * scale;
            if (need_z) {
                auto z_rec = encoding_z_loss(draws[i].z.to(batch.y.scalar_type()), pass.z_hat);
                require_finite(z_rec, "z_rec", update_index, batch);
                total = total + w.lambda_z * z_rec;
                report.losses.z_rec += z_rec.item<double>() * scale;
            }
            if (need_y) {
                auto terms = encoding_y_terms(batch.y, pass.y_hat, state.discriminator->forward(pass.y_hat), w.adv_form,
                                              w.mse_reduction);
                require_finite(terms.mse, "y_rec_mse", update_index, batch);
                require_finite(terms.adv, "y_rec_adv", update_index, batch);
                total = total + w.lambda_y * (terms.adv + terms.mse);
                report.losses.y_rec_mse += terms.mse.item<double>() * scale;
                report.losses.y_rec_adv += terms.adv.item<double>() * scale;
            }
            (total * scale).backward();
        }
    }
    state.opt_g->step();
    state.opt_e->step();
    state.zero_grad();

    report.losses.total = total_objective(report.losses, w);
    state.step += 1;
    return report;
}

std::optional<UpdateReport> train_micro_step(TrainState& state, ObservationBatch batch, const TrainConfig& cfg) {
    if (batch.size() != cfg.batch_size) {
        throw ContractViolation("micro-batch size differs from cfg.batch_size");
    }
    state.pending.push_back(std::move(batch));
    state.micro_step += 1;
    if (static_cast<std::int64_t>(state.pending.size()) < cfg.accumulation_steps) {
        return std::nullopt;
    }
    auto pending = std::move(state.pending);
    state.pending.clear();
    return train_update(state, pending, cfg);
}

ObservationBatch micro_batch_at(const ObservationSet& set, DataOrder& order, std::int64_t micro_step,
                                std::int64_t batch_size) {
    auto idx = order.range(micro_step * batch_size, batch_size);
    return set.batch(idx);
}

TrainState fit(const TrainConfig& cfg, const ModelSpecs& specs, const ObservationSet& train_set,
               const FitOptions& options, std::optional<TrainState> resume) {
    cfg.validate();
    if (train_set.size() == 0) {
        throw DataError("training set is empty");
    }
    if (train_set.y.size(1) != specs.generator.image_channels || train_set.y.size(2) != specs.generator.resolution ||
        train_set.y.size(3) != specs.generator.resolution) {
        throw DataError("training images do not match the model resolution/channels");
    }
    torch::set_num_threads(cfg.threads);

    TrainState state = resume ? std::move(*resume) : make_train_state(specs, cfg);
    DataOrder order(cfg.seed, train_set.size());

    std::ofstream log;
    if (!options.log_path.empty()) {
        log.open(options.log_path, state.step == 0 ? std::ios::trunc : std::ios::app);
        if (!log) {
            throw IoError("cannot open training log '" + options.log_path.string() + "'");
        }
    }

    while (state.step < cfg.total_steps) {
        std::optional<UpdateReport> report;
        while (!report) {
            report = train_micro_step(state, micro_batch_at(train_set, order, state.micro_step, cfg.batch_size), cfg);
        }
        if (log) {
            log << report->to_json().dump() << '\n';
            log.flush();
        }
        if (options.on_update) {
            options.on_update(state, *report);
        }
        if (cfg.checkpoint_every > 0 && !options.checkpoint_dir.empty() && state.step % cfg.checkpoint_every == 0) {
            std::filesystem::create_directories(options.checkpoint_dir);
            checkpoint_save(state, cfg, options.checkpoint_dir / ("step_" + std::to_string(state.step) + ".ckpt"));
        }
    }
    return state;
}

} // namespace uninpaint
