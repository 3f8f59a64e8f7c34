#include "uninpaint/baselines.hpp"

#include <algorithm>
#include <fstream>

#include "uninpaint/checkpoint.hpp"
#include "uninpaint/corruption.hpp"
#include "uninpaint/errors.hpp"
#include "uninpaint/losses.hpp"
#include "uninpaint/rng.hpp"

namespace uninpaint {

std::string to_string(BaselineKind k) {
    switch (k) {
    case BaselineKind::Unpaired:
        return "unpaired";
    case BaselineKind::Paired:
        return "paired";
    case BaselineKind::MisGan:
        return "misgan";
    }
    return "unknown";
}

BaselineKind baseline_kind_from_string(const std::string& name) {
    if (name == "unpaired") {
        return BaselineKind::Unpaired;
    }
    if (name == "paired") {
        return BaselineKind::Paired;
    }
    if (name == "misgan") {
        return BaselineKind::MisGan;
    }
    throw ConfigError("unknown baseline kind '" + name + "'");
}

void BaselineConfig::validate() const {
    train.validate();
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
        throw ConfigError("test_fraction must lie in [0, 1)");
    }
    if (!(paired_adv_weight >= 0.0) || !(misgan_imputer_weight > 0.0)) {
        throw ConfigError("paired_adv_weight must be >= 0 and misgan_imputer_weight > 0");
    }
}

void to_json(nlohmann::json& j, const BaselineConfig& c) {
    j = {{"kind", to_string(c.kind)},
         {"train", c.train},
         {"test_fraction", c.test_fraction},
         {"paired_adv_weight", c.paired_adv_weight},
         {"misgan_imputer_weight", c.misgan_imputer_weight}};
}

void from_json(const nlohmann::json& j, BaselineConfig& c) {
    BaselineConfig o;
    o.kind = baseline_kind_from_string(j.value("kind", to_string(o.kind)));
    if (j.contains("train")) {
        o.train = j.at("train").get<TrainConfig>();
    }
    o.test_fraction = j.value("test_fraction", o.test_fraction);
    o.paired_adv_weight = j.value("paired_adv_weight", o.paired_adv_weight);
    o.misgan_imputer_weight = j.value("misgan_imputer_weight", o.misgan_imputer_weight);
    c = o;
}

void BaselineState::zero_grad() {
    for (auto* opt : {opt_g.get(), opt_d.get(), opt_gx.get(), opt_di.get()}) {
        if (opt != nullptr) {
            opt->zero_grad();
        }
    }
}

nlohmann::json BaselineReport::to_json() const {
    nlohmann::json j = losses;
    j["step"] = step;
    j["observed_max_abs_diff"] = observed_max_abs_diff;
    return j;
}

namespace {

std::unique_ptr<torch::optim::Adam> make_adam(torch::nn::Module& module, double lr, const TrainConfig& cfg) {
    return std::make_unique<torch::optim::Adam>(
        module.parameters(), torch::optim::AdamOptions(lr).betas({cfg.adam_beta1, cfg.adam_beta2}));
}

void check_batches(std::size_t count, const TrainConfig& cfg) {
    if (static_cast<std::int64_t>(count) != cfg.accumulation_steps) {
        throw ContractViolation("a baseline update needs exactly accumulation_steps micro-batches");
    }
}

std::int64_t position_of(const BaselineState& state, const TrainConfig& cfg, std::size_t micro) {
    return (state.step * cfg.accumulation_steps + static_cast<std::int64_t>(micro)) * cfg.batch_size;
}

torch::Tensor latents(const BaselineState& state, const TrainConfig& cfg, std::size_t micro, std::int64_t count,
                      const torch::Tensor& like) {
    return normal_rows(cfg.seed, Stream::Latent, position_of(state, cfg, micro), count, state.specs.generator.z_dim)
        .to(like.scalar_type());
}

torch::Tensor composed(Generator& g, const ObservationBatch& b, const torch::Tensor& z, const TrainConfig& cfg) {
    auto out = g->forward(b.y, b.mask, z);
    return cfg.compose ? compose_reconstruction(out, b.y, b.mask) : out;
}

double observed_diff(const torch::Tensor& x_tilde, const ObservationBatch& b) {
    torch::NoGradGuard no_grad;
    return ((x_tilde - b.y) * b.mask).abs().max().item<double>();
}

void prepare(BaselineState& state, const TrainConfig& cfg) {
    auto ready = [&](torch::nn::Module& m) {
        m.train();
        refresh_spectral_norms(m, cfg.spectral_norm_iterations);
    };
    ready(*state.generator);
    ready(*state.discriminator);
    if (state.data_generator) {
        ready(*state.data_generator);
    }
    if (state.imputer_discriminator) {
        ready(*state.imputer_discriminator);
    }
}

// Shared body of the unpaired and paired updates: D sees clean images as real
// and the composed reconstructions as fake.
BaselineReport supervised_update(BaselineState& state, std::span<const ObservationBatch> observed,
                                 std::span<const torch::Tensor> clean, const BaselineConfig& cfg, bool paired) {
    const auto& tc = cfg.train;
    const auto form = tc.loss_weights.adv_form;
    const double scale = 1.0 / static_cast<double>(tc.accumulation_steps);
    const double adv_weight = paired ? cfg.paired_adv_weight : 1.0;
    prepare(state, tc);

    BaselineReport report;
    report.step = state.step + 1;
    auto& L = report.losses;
    L["d_loss"] = 0.0;
    L["g_adv"] = 0.0;
    if (paired) {
        L["mse"] = 0.0;
    }

    state.zero_grad();
    if (adv_weight != 0.0) {
        for (std::size_t i = 0; i < observed.size(); ++i) {
            torch::Tensor fake;
            {
                torch::NoGradGuard no_grad;
                fake = composed(state.generator, observed[i], latents(state, tc, i, observed[i].size(), observed[i].y), tc);
            }
            // Real before fake, in separate statements: argument evaluation
            // order is unspecified and batch-norm statistics depend on it.
            auto s_real = state.discriminator->forward(clean[i]);
            auto s_fake = state.discriminator->forward(fake);
            auto d_loss = d_adv_loss(s_real, s_fake, form);
            require_finite(d_loss, "d_loss", state.step, observed[i]);
            (d_loss * scale).backward();
            L["d_loss"] += d_loss.item<double>() * scale;
        }
        state.opt_d->step();
    }

    state.zero_grad();
    {
        FreezeParameters frozen(*state.discriminator);
        for (std::size_t i = 0; i < observed.size(); ++i) {
            auto x_tilde =
                composed(state.generator, observed[i], latents(state, tc, i, observed[i].size(), observed[i].y), tc);
            report.observed_max_abs_diff = std::max(report.observed_max_abs_diff, observed_diff(x_tilde, observed[i]));
            torch::Tensor total = torch::zeros({}, x_tilde.options());
            if (adv_weight != 0.0) {
                auto g_adv = g_adv_loss(state.discriminator->forward(x_tilde), form);
                require_finite(g_adv, "g_adv", state.step, observed[i]);
                total = total + adv_weight * g_adv;
                L["g_adv"] += g_adv.item<double>() * scale;
            }
            if (paired) {
                auto mse = image_squared_error(x_tilde, clean[i], tc.loss_weights.mse_reduction);
                require_finite(mse, "mse", state.step, observed[i]);
                total = total + mse;
                L["mse"] += mse.item<double>() * scale;
            }
            (total * scale).backward();
        }
    }
    state.opt_g->step();
    state.zero_grad();
    L["total"] = adv_weight * L["g_adv"] + (paired ? L["mse"] : 0.0);
    state.step += 1;
    return report;
}

std::vector<std::int64_t> clean_order(std::uint64_t seed, std::int64_t n, std::int64_t first, std::int64_t count) {
    // Independent of the observation order: its own stream per epoch.
    std::vector<std::int64_t> out;
    std::int64_t cached_epoch = -1;
    std::vector<std::int64_t> perm;
    for (std::int64_t p = first; p < first + count; ++p) {
        const auto epoch = p / n;
        if (epoch != cached_epoch) {
            auto engine = stream_engine(seed, Stream::Baseline, static_cast<std::uint64_t>(epoch), 2);
            perm = permutation(n, engine);
            cached_epoch = epoch;
        }
        out.push_back(perm[static_cast<std::size_t>(p % n)]);
    }
    return out;
}

} // namespace

BaselineState make_baseline_state(const ModelSpecs& specs, const BaselineConfig& cfg) {
    specs.validate();
    cfg.validate();
    BaselineState state;
    state.kind = cfg.kind;
    state.specs = specs;
    state.seed = cfg.train.seed;
    auto init = stream_engine(cfg.train.seed, Stream::Init);
    torch::manual_seed(init());
    state.generator = Generator(specs.generator);
    state.discriminator = Discriminator(specs.discriminator);
    state.opt_g = make_adam(*state.generator, cfg.train.lr_g, cfg.train);
    state.opt_d = make_adam(*state.discriminator, cfg.train.lr_d, cfg.train);
    if (cfg.kind == BaselineKind::MisGan) {
        state.data_generator = Generator(specs.generator);
        state.imputer_discriminator = Discriminator(specs.discriminator);
        state.opt_gx = make_adam(*state.data_generator, cfg.train.lr_g, cfg.train);
        state.opt_di = make_adam(*state.imputer_discriminator, cfg.train.lr_d, cfg.train);
    }

    torch::NoGradGuard no_grad;
    const auto g_ref = parameter_count(*Generator(specs.generator));
    const auto d_ref = parameter_count(*Discriminator(specs.discriminator));
    bool same = parameter_count(*state.generator) == g_ref && parameter_count(*state.discriminator) == d_ref;
    if (cfg.kind == BaselineKind::MisGan) {
        same = same && parameter_count(*state.data_generator) == g_ref &&
               parameter_count(*state.imputer_discriminator) == d_ref;
    }
    if (!same) {
        throw ContractViolation("baseline networks differ in size from the unsupervised model");
    }
    return state;
}

BaselineReport unpaired_step(BaselineState& state, std::span<const ObservationBatch> observed,
                             std::span<const torch::Tensor> clean, const BaselineConfig& cfg) {
    check_batches(observed.size(), cfg.train);
    if (clean.size() != observed.size()) {
        throw ContractViolation("unpaired_step needs one clean batch per observed micro-batch");
    }
    return supervised_update(state, observed, clean, cfg, /*paired=*/false);
}

BaselineReport paired_step(BaselineState& state, std::span<const PairedBatch> pairs, const BaselineConfig& cfg) {
    check_batches(pairs.size(), cfg.train);
    std::vector<ObservationBatch> observed;
    std::vector<torch::Tensor> clean;
    for (const auto& p : pairs) {
        if (!p.clean.defined() || p.clean.sizes() != p.observed.y.sizes()) {
            throw ContractViolation("paired_step needs a clean image for every observation");
        }
        observed.push_back(p.observed);
        clean.push_back(p.clean);
    }
    return supervised_update(state, observed, clean, cfg, /*paired=*/true);
}

BaselineReport misgan_step(BaselineState& state, std::span<const ObservationBatch> observed, const BaselineConfig& cfg) {
    if (state.kind != BaselineKind::MisGan || !state.data_generator) {
        throw ContractViolation("misgan_step needs a MisGAN state");
    }
    check_batches(observed.size(), cfg.train);
    const auto& tc = cfg.train;
    const auto form = tc.loss_weights.adv_form;
    const double scale = 1.0 / static_cast<double>(tc.accumulation_steps);
    const double beta = cfg.misgan_imputer_weight;
    prepare(state, tc);

    struct Draws {
        torch::Tensor z_data, z_imp, mask;
    };
    std::vector<Draws> draws;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        const auto& b = observed[i];
        const auto position = position_of(state, tc, i);
        const auto res = b.y.size(2);
        auto masks = torch::empty({b.size(), 1, res, b.y.size(3)});
        for (std::int64_t j = 0; j < b.size(); ++j) {
            auto engine = stream_engine(tc.seed, Stream::FreshMask, static_cast<std::uint64_t>(position + j));
            masks[j][0].copy_(sample_mask(tc.measurement, res, b.y.size(3), engine).bits());
        }
        draws.push_back({normal_rows(tc.seed, Stream::Baseline, position, b.size(), state.specs.generator.z_dim, 1)
                             .to(b.y.scalar_type()),
                         latents(state, tc, i, b.size(), b.y), masks.to(b.y.scalar_type())});
    }
    auto generate = [&](const Draws& d, const ObservationBatch& b) {
        auto empty = torch::zeros_like(b.y);
        return state.data_generator->forward(empty, torch::zeros_like(b.mask), d.z_data);
    };

    BaselineReport report;
    report.step = state.step + 1;
    auto& L = report.losses;
    for (const char* k : {"d_x", "g_x", "d_i", "g_i"}) {
        L[k] = 0.0;
    }

    // Discriminators.
    state.zero_grad();
    for (std::size_t i = 0; i < observed.size(); ++i) {
        const auto& b = observed[i];
        torch::Tensor x_gen, x_imp;
        {
            torch::NoGradGuard no_grad;
            x_gen = generate(draws[i], b);
            x_imp = composed(state.generator, b, draws[i].z_imp, tc);
        }
        auto sx_real = state.discriminator->forward(b.y);
        auto sx_fake = state.discriminator->forward(apply_measurement(x_gen, draws[i].mask, 0.0));
        auto si_real = state.imputer_discriminator->forward(x_gen);
        auto si_fake = state.imputer_discriminator->forward(x_imp);
        auto d_x = d_adv_loss(sx_real, sx_fake, form);
        auto d_i = d_adv_loss(si_real, si_fake, form);
        require_finite(d_x, "d_x", state.step, b);
        require_finite(d_i, "d_i", state.step, b);
        ((d_x + beta * d_i) * scale).backward();
        L["d_x"] += d_x.item<double>() * scale;
        L["d_i"] += d_i.item<double>() * scale;
    }
    state.opt_d->step();
    state.opt_di->step();

    // Data generator and imputer.
    state.zero_grad();
    {
        FreezeParameters frozen_x(*state.discriminator);
        FreezeParameters frozen_i(*state.imputer_discriminator);
        for (std::size_t i = 0; i < observed.size(); ++i) {
            const auto& b = observed[i];
            auto x_gen = generate(draws[i], b);
            auto g_x = g_adv_loss(state.discriminator->forward(apply_measurement(x_gen, draws[i].mask, 0.0)), form);
            auto x_imp = composed(state.generator, b, draws[i].z_imp, tc);
            report.observed_max_abs_diff = std::max(report.observed_max_abs_diff, observed_diff(x_imp, b));
            auto g_i = g_adv_loss(state.imputer_discriminator->forward(x_imp), form);
            require_finite(g_x, "g_x", state.step, b);
            require_finite(g_i, "g_i", state.step, b);
            ((g_x + beta * g_i) * scale).backward();
            L["g_x"] += g_x.item<double>() * scale;
            L["g_i"] += g_i.item<double>() * scale;
        }
    }
    state.opt_gx->step();
    state.opt_g->step();
    state.zero_grad();
    L["total"] = L["g_x"] + beta * L["g_i"];
    state.step += 1;
    return report;
}

BaselineState fit_baseline(const BaselineConfig& cfg, const ModelSpecs& specs, const ObservationSet& train_set,
                           const BaselineFitOptions& options, std::optional<BaselineState> resume) {
    cfg.validate();
    if (train_set.size() == 0) {
        throw DataError("training set is empty");
    }
    if (cfg.kind != BaselineKind::MisGan && !train_set.has_clean()) {
        throw DataError("the " + to_string(cfg.kind) + " baseline needs clean images");
    }
    const auto& tc = cfg.train;
    torch::set_num_threads(tc.threads);
    BaselineState state = resume ? std::move(*resume) : make_baseline_state(specs, cfg);
    if (state.kind != cfg.kind) {
        throw ConfigError("resumed state is a '" + to_string(state.kind) + "' baseline");
    }
    DataOrder order(tc.seed, train_set.size());

    std::ofstream log;
    if (!options.log_path.empty()) {
        log.open(options.log_path, state.step == 0 ? std::ios::trunc : std::ios::app);
        if (!log) {
            throw IoError("cannot open training log '" + options.log_path.string() + "'");
        }
    }

    while (state.step < tc.total_steps) {
        std::vector<ObservationBatch> observed;
        std::vector<torch::Tensor> clean;
        std::vector<PairedBatch> pairs;
        for (std::int64_t i = 0; i < tc.accumulation_steps; ++i) {
            const auto micro = state.step * tc.accumulation_steps + i;
            auto idx = order.range(micro * tc.batch_size, tc.batch_size);
            auto batch = train_set.batch(idx);
            if (cfg.kind == BaselineKind::Paired) {
                auto index = torch::tensor(idx, torch::kInt64);
                pairs.push_back({batch, train_set.clean.index_select(0, index)});
            } else if (cfg.kind == BaselineKind::Unpaired) {
                auto cidx = clean_order(tc.seed, train_set.size(), micro * tc.batch_size, tc.batch_size);
                clean.push_back(train_set.clean.index_select(0, torch::tensor(cidx, torch::kInt64)));
            }
            observed.push_back(std::move(batch));
        }
        BaselineReport report;
        switch (cfg.kind) {
        case BaselineKind::Unpaired:
            report = unpaired_step(state, observed, clean, cfg);
            break;
        case BaselineKind::Paired:
            report = paired_step(state, pairs, cfg);
            break;
        case BaselineKind::MisGan:
            report = misgan_step(state, observed, cfg);
            break;
        }
        if (log) {
            log << report.to_json().dump() << '\n';
            log.flush();
        }
        if (options.on_update) {
            options.on_update(state, report);
        }
        if (tc.checkpoint_every > 0 && !options.checkpoint_dir.empty() && state.step % tc.checkpoint_every == 0) {
            std::filesystem::create_directories(options.checkpoint_dir);
            baseline_checkpoint_save(state, cfg,
                                     options.checkpoint_dir / ("step_" + std::to_string(state.step) + ".ckpt"));
        }
    }
    return state;
}

void baseline_checkpoint_save(const BaselineState& state, const BaselineConfig& cfg,
                              const std::filesystem::path& path) {
    torch::serialize::OutputArchive ar;
    archive::write_int(ar, "schema_version", kCheckpointSchemaVersion);
    archive::write_string(ar, "kind", to_string(state.kind));
    archive::write_json(ar, "specs", state.specs);
    archive::write_json(ar, "config", cfg);
    archive::write_int(ar, "step", state.step);
    archive::write_int(ar, "seed", static_cast<std::int64_t>(state.seed));
    archive::write_module(ar, "generator", *state.generator);
    archive::write_module(ar, "discriminator", *state.discriminator);
    archive::write_optimizer(ar, "opt_g", *state.opt_g);
    archive::write_optimizer(ar, "opt_d", *state.opt_d);
    if (state.kind == BaselineKind::MisGan) {
        archive::write_module(ar, "data_generator", *state.data_generator);
        archive::write_module(ar, "imputer_discriminator", *state.imputer_discriminator);
        archive::write_optimizer(ar, "opt_gx", *state.opt_gx);
        archive::write_optimizer(ar, "opt_di", *state.opt_di);
    }
    archive::save_archive(ar, path);
}

BaselineState baseline_checkpoint_load(const std::filesystem::path& path, BaselineConfig* cfg_out) {
    torch::serialize::InputArchive ar;
    archive::load_archive(ar, path);
    try {
        archive::check_schema(ar, "");
        const auto kind = baseline_kind_from_string(archive::read_string(ar, "kind"));
        auto specs = archive::read_json(ar, "specs").get<ModelSpecs>();
        auto cfg = archive::read_json(ar, "config").get<BaselineConfig>();
        if (cfg.kind != kind) {
            throw CheckpointError("checkpoint kind and stored config disagree");
        }
        BaselineState state = make_baseline_state(specs, cfg);
        state.step = archive::read_int(ar, "step");
        state.seed = static_cast<std::uint64_t>(archive::read_int(ar, "seed"));
        archive::read_module(ar, "generator", *state.generator);
        archive::read_module(ar, "discriminator", *state.discriminator);
        archive::read_optimizer(ar, "opt_g", *state.opt_g);
        archive::read_optimizer(ar, "opt_d", *state.opt_d);
        if (kind == BaselineKind::MisGan) {
            archive::read_module(ar, "data_generator", *state.data_generator);
            archive::read_module(ar, "imputer_discriminator", *state.imputer_discriminator);
            archive::read_optimizer(ar, "opt_gx", *state.opt_gx);
            archive::read_optimizer(ar, "opt_di", *state.opt_di);
        }
        if (cfg_out != nullptr) {
            *cfg_out = cfg;
        }
        return state;
    } catch (const c10::Error& e) {
        throw CheckpointError(std::string("corrupt checkpoint: ") + e.what_without_backtrace());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint metadata is invalid: ") + e.what());
    }
}

} // namespace uninpaint
