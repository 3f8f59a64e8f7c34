#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "testkit.hpp"
#include "uninpaint/checkpoint.hpp"
#include "uninpaint/errors.hpp"
#include "uninpaint/training.hpp"

using namespace uninpaint;

namespace {

ObservationBatch first_batch(const ObservationSet& set, std::int64_t n, std::int64_t offset = 0) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        idx[static_cast<std::size_t>(i)] = offset + i;
    }
    return set.batch(idx);
}

std::string serialized(const TrainState& s, const TrainConfig& cfg) {
    std::ostringstream out;
    checkpoint_save(s, cfg, out);
    return out.str();
}

} // namespace

TEST(TrainUpdate, GanOnlyUpdateEqualsThePureGanOracle) {
    for (Norm norm : {Norm::Batch, Norm::None}) {
        auto specs = testkit::tiny_specs(norm);
        auto cfg = testkit::tiny_config(8, 3);
        cfg.loss_weights.lambda_z = 0.0;
        cfg.loss_weights.lambda_y = 0.0;
        auto set = testkit::random_observations(8, specs, cfg.measurement, 4);
        auto batch = first_batch(set, 8);

        auto a = make_train_state(specs, cfg);
        auto b = clone_state(a, cfg);
        train_update(a, std::span(&batch, 1), cfg);
        testkit::pure_gan_update(b, batch, draw_step_randomness(cfg, specs, 0, 8), cfg);

        // The oracle runs G twice in training mode, so G's running statistics
        // advance twice; every parameter and D's buffers must match exactly.
        EXPECT_TRUE(testkit::parameters_equal(*a.discriminator, *b.discriminator, true));
        EXPECT_TRUE(testkit::parameters_equal(*a.generator, *b.generator, norm == Norm::None));
        EXPECT_TRUE(testkit::parameters_equal(*a.encoder, *b.encoder, true));
        EXPECT_GT(testkit::parameter_change(*b.discriminator, *make_train_state(specs, cfg).discriminator), 0.0);
    }
}

TEST(TrainUpdate, AccumulationMatchesOneLargeBatch) {
    auto specs = testkit::tiny_specs(Norm::None);
    for (double lambda : {0.0, 1.0}) {
        auto small = testkit::tiny_config(32, 11);
        small.accumulation_steps = 4;
        small.loss_weights.lambda_z = lambda;
        small.loss_weights.lambda_y = lambda;
        auto large = small;
        large.batch_size = 128;
        large.accumulation_steps = 1;
        ASSERT_EQ(small.effective_batch(), large.effective_batch());

        auto set = testkit::random_observations(128, specs, small.measurement, 12, torch::kFloat64);
        auto a = make_train_state(specs, small);
        auto b = make_train_state(specs, large);
        auto before = make_train_state(specs, small);
        a.to(torch::kFloat64);
        b.to(torch::kFloat64);
        before.to(torch::kFloat64);

        std::vector<ObservationBatch> micro;
        for (int i = 0; i < 4; ++i) {
            micro.push_back(first_batch(set, 32, 32 * i));
        }
        auto full = first_batch(set, 128);
        auto ra = train_update(a, micro, small);
        auto rb = train_update(b, std::span(&full, 1), large);

        EXPECT_NEAR(ra.losses.total, rb.losses.total, 1e-9 * std::abs(rb.losses.total) + 1e-12);
        auto agree = [](const torch::nn::Module& ma, const torch::nn::Module& mb, const torch::nn::Module& m0) {
            EXPECT_LT(testkit::max_parameter_relative_diff(ma, mb), 1e-5);
            // The update itself (after - before) must agree as well.
            auto pa = ma.parameters();
            auto pb = mb.parameters();
            auto p0 = m0.parameters();
            for (std::size_t i = 0; i < pa.size(); ++i) {
                EXPECT_LT(testkit::relative_error(pa[i] - p0[i], pb[i] - p0[i]), 1e-5);
            }
        };
        agree(*a.generator, *b.generator, *before.generator);
        agree(*a.discriminator, *b.discriminator, *before.discriminator);
        agree(*a.encoder, *b.encoder, *before.encoder);
    }
}

TEST(TrainUpdate, EachNetworkMovesOnlyUnderItsOwnObjective) {
    auto specs = testkit::tiny_specs(Norm::None);
    auto cfg = testkit::tiny_config(6, 21);
    cfg.loss_weights.lambda_z = 1.0;
    cfg.loss_weights.lambda_y = 1.0;
    auto set = testkit::random_observations(6, specs, cfg.measurement, 22);
    auto batch = first_batch(set, 6);
    auto draws = draw_step_randomness(cfg, specs, 0, 6);

    auto actual = make_train_state(specs, cfg);
    auto oracle = clone_state(actual, cfg);
    train_update(actual, std::span(&batch, 1), cfg);

    // Oracle phase 1: only the discriminator objective, only opt_d.
    for (auto* m : std::initializer_list<torch::nn::Module*>{oracle.generator.get(), oracle.discriminator.get(),
                                                             oracle.encoder.get()}) {
        refresh_spectral_norms(*m, cfg.spectral_norm_iterations);
    }
    auto frozen_g = clone_state(oracle, cfg);
    oracle.zero_grad();
    {
        torch::Tensor y_tilde, y_hat;
        {
            torch::NoGradGuard ng;
            auto p = forward_pass(oracle, batch, draws, cfg, false, true);
            y_tilde = p.y_tilde;
            y_hat = p.y_hat;
        }
        auto real = oracle.discriminator->forward(batch.y);
        auto loss = d_adv_loss(real, oracle.discriminator->forward(y_tilde), AdvForm::Hinge) +
                    d_adv_loss(real, oracle.discriminator->forward(y_hat), AdvForm::Hinge);
        loss.backward();
        for (auto& p : oracle.generator->parameters()) {
            EXPECT_FALSE(p.grad().defined() && p.grad().abs().max().item<double>() > 0.0);
        }
        oracle.opt_d->step();
    }
    EXPECT_LT(testkit::max_parameter_relative_diff(*actual.discriminator, *oracle.discriminator), 1e-6);
    // D's objective left G and E untouched.
    EXPECT_TRUE(testkit::parameters_equal(*oracle.generator, *frozen_g.generator));
    EXPECT_TRUE(testkit::parameters_equal(*oracle.encoder, *frozen_g.encoder));

    // Oracle phase 2: the G/E objective against the updated D, only opt_g/opt_e.
    oracle.zero_grad();
    auto d_before = clone_state(oracle, cfg);
    {
        auto p = forward_pass(oracle, batch, draws, cfg, true, true);
        auto loss = g_adv_loss(oracle.discriminator->forward(p.y_tilde), AdvForm::Hinge) +
                    encoding_z_loss(draws.z, p.z_hat) +
                    (image_squared_error(batch.y, p.y_hat, MseReduction::SumPerImage) +
                     g_adv_loss(oracle.discriminator->forward(p.y_hat), AdvForm::Hinge));
        loss.backward();
        oracle.opt_g->step();
        oracle.opt_e->step();
    }
    EXPECT_TRUE(testkit::parameters_equal(*oracle.discriminator, *d_before.discriminator));
    EXPECT_LT(testkit::max_parameter_relative_diff(*actual.generator, *oracle.generator), 1e-6);
    EXPECT_LT(testkit::max_parameter_relative_diff(*actual.encoder, *oracle.encoder), 1e-6);
    EXPECT_GT(testkit::parameter_change(*frozen_g.generator, *actual.generator), 0.0);
    EXPECT_GT(testkit::parameter_change(*frozen_g.encoder, *actual.encoder), 0.0);
}

TEST(TrainUpdate, ObservedPixelsArePreservedAtEveryStep) {
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(4, 5);
    cfg.total_steps = 6;
    auto set = testkit::random_observations(16, specs, cfg.measurement, 6);
    int updates = 0;
    FitOptions opts;
    opts.on_update = [&](const TrainState&, const UpdateReport& r) {
        ++updates;
        EXPECT_EQ(r.observed_max_abs_diff, 0.0) << "step " << r.step;
    };
    fit(cfg, specs, set, opts);
    EXPECT_EQ(updates, 6);

    // The literal fresh-mask composition does not preserve the observation.
    cfg.algorithm1_mask_reading = true;
    double worst = 0.0;
    opts.on_update = [&](const TrainState&, const UpdateReport& r) {
        worst = std::max(worst, r.observed_max_abs_diff);
    };
    fit(cfg, specs, set, opts);
    EXPECT_GT(worst, 0.0);
}

TEST(TrainUpdate, FreshMasksAreIndependentOfStoredMasks) {
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(32, 7);
    auto set = testkit::random_observations(32, specs, cfg.measurement, 7);
    auto draws = draw_step_randomness(cfg, specs, 0, 32);
    int identical = 0;
    for (std::int64_t i = 0; i < 32; ++i) {
        identical += torch::equal(draws.fresh_mask[i], set.mask[i]) ? 1 : 0;
    }
    EXPECT_EQ(identical, 0);
    // Same measurement process: same exact number of observed pixels.
    EXPECT_TRUE(torch::equal(draws.fresh_mask.sum({1, 2, 3}), set.mask.sum({1, 2, 3})));
}

TEST(TrainUpdate, DrawsDependOnlyOnSamplePosition) {
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(8, 9);
    auto whole = draw_step_randomness(cfg, specs, 0, 8);
    auto tail = draw_step_randomness(cfg, specs, 5, 3);
    EXPECT_TRUE(torch::equal(whole.fresh_mask.slice(0, 5), tail.fresh_mask));
    EXPECT_TRUE(torch::equal(whole.z.slice(0, 5), tail.z));
    EXPECT_TRUE(torch::equal(whole.eps.slice(0, 5), tail.eps));
}

TEST(TrainMicroStep, UpdatesOnlyWhenAccumulationIsComplete) {
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(2, 1);
    cfg.accumulation_steps = 3;
    auto set = testkit::random_observations(6, specs, cfg.measurement, 1);
    auto state = make_train_state(specs, cfg);
    EXPECT_FALSE(train_micro_step(state, first_batch(set, 2, 0), cfg));
    EXPECT_FALSE(train_micro_step(state, first_batch(set, 2, 2), cfg));
    EXPECT_EQ(state.step, 0);
    EXPECT_EQ(state.micro_step, 2);
    auto r = train_micro_step(state, first_batch(set, 2, 4), cfg);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->step, 1);
    EXPECT_EQ(r->effective_batch, 6);
    EXPECT_EQ(state.step, 1);
    EXPECT_EQ(state.micro_step, 3);
    EXPECT_TRUE(state.pending.empty());
    EXPECT_GE(state.step * cfg.accumulation_steps, state.micro_step);
    auto j = r->to_json();
    for (const char* key : {"d_loss", "g_adv", "z_rec", "y_rec_mse", "y_rec_adv", "total", "effective_batch"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_THROW(train_micro_step(state, first_batch(set, 3), cfg), ContractViolation);
}

TEST(Fit, ZeroStepsReturnsTheInitialState) {
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(4, 13);
    cfg.total_steps = 0;
    auto set = testkit::random_observations(8, specs, cfg.measurement, 13);
    auto trained = fit(cfg, specs, set);
    auto fresh = make_train_state(specs, cfg);
    EXPECT_EQ(trained.step, 0);
    EXPECT_TRUE(serialized(trained, cfg) == serialized(fresh, cfg));
}

TEST(Fit, SameSeedGivesIdenticalCheckpoints) {
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(4, 14);
    cfg.total_steps = 5;
    auto set = testkit::random_observations(10, specs, cfg.measurement, 14);
    EXPECT_TRUE(serialized(fit(cfg, specs, set), cfg) == serialized(fit(cfg, specs, set), cfg));
    auto other = cfg;
    other.seed = 15;
    EXPECT_TRUE(serialized(fit(other, specs, set), cfg) != serialized(fit(cfg, specs, set), cfg));
}

TEST(Fit, WritesOneLogRecordPerUpdate) {
    testkit::TempDir dir;
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(4, 16);
    cfg.total_steps = 4;
    cfg.checkpoint_every = 2;
    auto set = testkit::random_observations(8, specs, cfg.measurement, 16);
    FitOptions opts{.log_path = dir / "train.jsonl", .checkpoint_dir = dir / "ckpt"};
    fit(cfg, specs, set, opts);
    std::ifstream log(dir / "train.jsonl");
    std::string line;
    std::int64_t n = 0;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("step").get<std::int64_t>(), ++n);
    }
    EXPECT_EQ(n, 4);
    EXPECT_TRUE(std::filesystem::exists(dir / "ckpt" / "step_2.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir / "ckpt" / "step_4.ckpt"));
}

TEST(Fit, RejectsMismatchedData) {
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(4, 1);
    cfg.total_steps = 1;
    auto other = specs;
    other.generator.resolution = other.discriminator.resolution = other.encoder.resolution = 16;
    EXPECT_THROW(fit(cfg, specs, testkit::random_observations(4, other, cfg.measurement, 1)), DataError);
    EXPECT_THROW(fit(cfg, specs, ObservationSet{}), DataError);
}

TEST(Fit, NonFiniteLossAbortsWithDiagnostics) {
    auto specs = testkit::tiny_specs();
    auto cfg = testkit::tiny_config(4, 17);
    auto set = testkit::random_observations(4, specs, cfg.measurement, 17);
    auto state = make_train_state(specs, cfg);
    {
        torch::NoGradGuard g;
        state.discriminator->parameters()[0].fill_(std::numeric_limits<float>::quiet_NaN());
    }
    auto batch = first_batch(set, 4);
    try {
        train_update(state, std::span(&batch, 1), cfg);
        FAIL() << "expected NonFiniteLossError";
    } catch (const NonFiniteLossError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("d_loss"), std::string::npos) << msg;
        EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
        EXPECT_NE(msg.find("0 1 2 3"), std::string::npos) << msg;
    }
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
    auto cfg = testkit::tiny_config(16, 3);
    cfg.loss_weights.lambda_y = 2.5;
    cfg.encoder_z_input = EncoderZInput::Full;
    nlohmann::json j = cfg;
    auto back = j.get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
    auto bad = cfg;
    bad.accumulation_steps = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = cfg;
    bad.lr_d = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
    TrainConfig defaults;
    EXPECT_EQ(defaults.batch_size, 128);
    EXPECT_EQ(defaults.accumulation_steps, 4);
    EXPECT_EQ(defaults.effective_batch(), 512);
    EXPECT_EQ(defaults.adam_beta1, 0.0);
    EXPECT_EQ(defaults.adam_beta2, 0.99);
    EXPECT_EQ(defaults.loss_weights.adv_form, AdvForm::Hinge);
}
