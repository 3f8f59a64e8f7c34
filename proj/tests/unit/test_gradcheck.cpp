#include <gtest/gtest.h>

#include <ATen/CPUGeneratorImpl.h>

#include "testkit.hpp"
#include "uninpaint/layers.hpp"
#include "uninpaint/losses.hpp"
#include "uninpaint/nets.hpp"
#include "uninpaint/training.hpp"

using namespace uninpaint;

namespace {

constexpr double kNetworkTolerance = 1e-3;

// Parameters of `m` plus the input, all double precision.
std::vector<torch::Tensor> with_input(torch::nn::Module& m, const torch::Tensor& x) {
    std::vector<torch::Tensor> out{x};
    for (auto& p : m.parameters()) {
        out.push_back(p);
    }
    return out;
}

// Random linear read-out so every output entry contributes to the gradient.
torch::Tensor readout(const torch::Tensor& y, std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto w = torch::randn(y.sizes(), gen, torch::kFloat64);
    return (y * w).sum();
}

template <typename ModuleHolder>
double block_error(ModuleHolder& block, const torch::Tensor& x) {
    block->to(torch::kFloat64);
    auto input = x.to(torch::kFloat64).requires_grad_(true);
    return testkit::gradient_error([&] { return readout(block->forward(input), 3); }, with_input(*block, input));
}

} // namespace

TEST(BlockGradients, Conv2dSN) {
    torch::manual_seed(0);
    Conv2dSN conv(2, 3, 3);
    EXPECT_LT(block_error(conv, torch::randn({2, 2, 4, 4})), kNetworkTolerance);
}

TEST(BlockGradients, LinearSN) {
    torch::manual_seed(1);
    LinearSN linear(5, 3);
    EXPECT_LT(block_error(linear, torch::randn({4, 5})), kNetworkTolerance);
}

TEST(BlockGradients, BatchNorm) {
    torch::manual_seed(2);
    Norm2d norm(3, Norm::Batch);
    EXPECT_LT(block_error(norm, torch::randn({3, 3, 2, 2})), kNetworkTolerance);
}

TEST(BlockGradients, SelfAttentionWithNonZeroGate) {
    torch::manual_seed(3);
    SelfAttention attn(4);
    {
        torch::NoGradGuard g;
        attn->gamma.fill_(0.5);
    }
    EXPECT_LT(block_error(attn, torch::randn({2, 4, 3, 3})), kNetworkTolerance);
}

TEST(BlockGradients, ResBlocks) {
    torch::manual_seed(4);
    ResBlock same(2, 2, Resample::None, Norm::Batch);
    ResBlock wider(2, 3, Resample::None, Norm::None);
    ResBlock down(2, 4, Resample::Down, Norm::Batch);
    ResBlock up(4, 2, Resample::Up, Norm::Batch);
    EXPECT_LT(block_error(same, torch::randn({2, 2, 4, 4})), kNetworkTolerance);
    EXPECT_LT(block_error(wider, torch::randn({2, 2, 4, 4})), kNetworkTolerance);
    EXPECT_LT(block_error(down, torch::randn({2, 2, 4, 4})), kNetworkTolerance);
    EXPECT_LT(block_error(up, torch::randn({2, 4, 2, 2})), kNetworkTolerance);
}

// Full-model gradients of every training objective on tiny double networks.
class ModelGradients : public ::testing::Test {
protected:
    void SetUp() override {
        cfg_ = testkit::tiny_config(3, 5);
        cfg_.loss_weights.lambda_z = 1.0;
        cfg_.loss_weights.lambda_y = 1.0;
        specs_ = testkit::tiny_specs();
        state_ = make_train_state(specs_, cfg_);
        state_.to(torch::kFloat64);
        auto set = testkit::random_observations(3, specs_, cfg_.measurement, 9, torch::kFloat64);
        std::vector<std::int64_t> idx{0, 1, 2};
        batch_ = set.batch(idx);
        draws_ = draw_step_randomness(cfg_, specs_, 0, 3);
        for (auto* m : std::initializer_list<torch::nn::Module*>{state_.generator.get(),
                                                                 state_.discriminator.get(), state_.encoder.get()}) {
            m->train();
            refresh_spectral_norms(*m, 1);
        }
        // Attention gates start at zero; open them so their parameters matter.
        torch::NoGradGuard g;
        for (auto& p : state_.generator->named_parameters()) {
            if (p.key().find("gamma") != std::string::npos) {
                p.value().fill_(0.3);
            }
        }
        for (auto& p : state_.discriminator->named_parameters()) {
            if (p.key().find("gamma") != std::string::npos) {
                p.value().fill_(0.3);
            }
        }
    }

    ForwardPass pass() { return forward_pass(state_, batch_, draws_, cfg_, true, true); }

    TrainConfig cfg_;
    ModelSpecs specs_;
    TrainState state_;
    ObservationBatch batch_;
    StepDraws draws_;
};

TEST_F(ModelGradients, ParameterBudget) {
    EXPECT_LE(parameter_count(*state_.generator), 2000);
    EXPECT_LE(parameter_count(*state_.discriminator), 2000);
    EXPECT_LE(parameter_count(*state_.encoder), 2000);
}

TEST_F(ModelGradients, DiscriminatorLoss) {
    auto fakes = pass();
    auto y_tilde = fakes.y_tilde.detach();
    auto y_hat = fakes.y_hat.detach();
    for (AdvForm form : {AdvForm::Hinge, AdvForm::Logistic}) {
        auto f = [&] {
            auto real = state_.discriminator->forward(batch_.y);
            return d_adv_loss(real, state_.discriminator->forward(y_tilde), form) +
                   d_adv_loss(real, state_.discriminator->forward(y_hat), form);
        };
        EXPECT_LT(testkit::gradient_error(f, state_.discriminator->parameters()), kNetworkTolerance);
    }
}

TEST_F(ModelGradients, GeneratorAdversarialLoss) {
    auto f = [&] { return g_adv_loss(state_.discriminator->forward(pass().y_tilde), AdvForm::Hinge); };
    EXPECT_LT(testkit::gradient_error(f, state_.generator->parameters()), kNetworkTolerance);
}

TEST_F(ModelGradients, EncodingZLoss) {
    auto f = [&] { return encoding_z_loss(draws_.z.to(torch::kFloat64), pass().z_hat); };
    auto params = state_.generator->parameters();
    for (auto& p : state_.encoder->parameters()) {
        params.push_back(p);
    }
    EXPECT_LT(testkit::gradient_error(f, params), kNetworkTolerance);
}

TEST_F(ModelGradients, EncodingYTerms) {
    auto params = state_.generator->parameters();
    for (auto& p : state_.encoder->parameters()) {
        params.push_back(p);
    }
    auto mse = [&] { return encoding_y_terms(batch_.y, pass().y_hat, torch::zeros({3}, torch::kFloat64),
                                             AdvForm::Hinge).mse; };
    auto adv = [&] {
        auto p = pass();
        return encoding_y_terms(batch_.y, p.y_hat, state_.discriminator->forward(p.y_hat), AdvForm::Hinge).adv;
    };
    EXPECT_LT(testkit::gradient_error(mse, params), kNetworkTolerance);
    EXPECT_LT(testkit::gradient_error(adv, params), kNetworkTolerance);
}
