#include <gtest/gtest.h>

#include "testkit.hpp"
#include "uninpaint/corruption.hpp"
#include "uninpaint/errors.hpp"
#include "uninpaint/nets.hpp"
#include "uninpaint/rng.hpp"

using namespace uninpaint;

namespace {

struct Inputs {
    torch::Tensor y, m, z;
};

Inputs observed_inputs(std::int64_t b, const GeneratorSpec& spec, std::uint64_t seed) {
    torch::manual_seed(seed);
    auto x = torch::rand({b, spec.image_channels, spec.resolution, spec.resolution});
    auto m = (torch::rand({b, 1, spec.resolution, spec.resolution}) > 0.5).to(torch::kFloat32);
    return {apply_measurement(x, m, 0.0), m, torch::randn({b, spec.z_dim})};
}

} // namespace

TEST(Generator, DeterministicInInferenceMode) {
    torch::manual_seed(0);
    Generator g(testkit::tiny_specs().generator);
    g->eval();
    auto in = observed_inputs(3, g->spec(), 1);
    EXPECT_TRUE(torch::equal(g->forward(in.y, in.m, in.z), g->forward(in.y, in.m, in.z)));
}

TEST(Generator, OutputDependsOnEveryLatentCoordinate) {
    torch::manual_seed(1);
    Generator g(testkit::tiny_specs().generator);
    g->eval();
    auto in = observed_inputs(2, g->spec(), 2);
    auto base = g->forward(in.y, in.m, in.z);
    for (std::int64_t k = 0; k < g->spec().z_dim; ++k) {
        auto z2 = in.z.clone();
        z2.select(1, k).add_(1.0);
        EXPECT_FALSE(torch::equal(g->forward(in.y, in.m, z2), base)) << "coordinate " << k;
    }
}

TEST(Generator, DeskShapeAndRange) {
    torch::manual_seed(2);
    auto spec = desk_specs(64).generator;
    ASSERT_EQ(spec.z_dim, 128);
    Generator g(spec);
    auto in = observed_inputs(2, spec, 3);
    auto out = g->forward(in.y, in.m, in.z);
    EXPECT_EQ(out.sizes(), (std::vector<std::int64_t>{2, 3, 64, 64}));
    EXPECT_GE(out.min().item<float>(), 0.0f);
    EXPECT_LE(out.max().item<float>(), 1.0f);
}

TEST(Generator, RejectsObservationsWithContentInTheMaskedRegion) {
    torch::manual_seed(3);
    Generator g(testkit::tiny_specs().generator);
    auto in = observed_inputs(2, g->spec(), 4);
    auto bad = in.y + (1.0 - in.m) * 0.5;
    EXPECT_THROW(g->forward(bad, in.m, in.z), ContractViolation);
    EXPECT_THROW(g->forward(in.y, in.m, torch::randn({2, g->spec().z_dim + 1})), ContractViolation);
    EXPECT_THROW(g->forward(in.y.slice(1, 0, 2), in.m, in.z), ContractViolation);
}

TEST(Discriminator, OneScorePerImage) {
    torch::manual_seed(4);
    Discriminator d(testkit::tiny_specs().discriminator);
    for (std::int64_t b : {1, 5}) {
        EXPECT_EQ(d->forward(torch::rand({b, 3, 8, 8})).sizes(), (std::vector<std::int64_t>{b}));
    }
    EXPECT_THROW(d->forward(torch::rand({2, 3, 16, 16})), ContractViolation);
}

TEST(Discriminator, ZeroImageGivesAFiniteScore) {
    torch::manual_seed(5);
    Discriminator d(desk_specs(64).discriminator);
    auto s = d->forward(torch::zeros({2, 3, 64, 64}));
    EXPECT_TRUE(torch::isfinite(s).all().item<bool>());
}

TEST(Discriminator, InputGradientMatchesFiniteDifferences) {
    torch::manual_seed(6);
    Discriminator d(testkit::tiny_specs().discriminator);
    d->to(torch::kFloat64);
    ASSERT_LE(parameter_count(*d), 2000);
    auto x = torch::rand({2, 3, 8, 8}, torch::kFloat64).requires_grad_(true);
    auto f = [&] { return d->forward(x).sum(); };
    EXPECT_LT(testkit::gradient_error(f, {x}), 1e-4);
}

TEST(Encoder, MeanIsReproducibleAndZeroNoiseGivesTheMean) {
    torch::manual_seed(7);
    Encoder e(testkit::tiny_specs().encoder);
    e->eval();
    auto y = torch::rand({3, 3, 8, 8});
    auto a = e->forward(y);
    auto b = e->forward(y);
    EXPECT_TRUE(torch::equal(a.mean, b.mean));
    EXPECT_TRUE(torch::equal(a.logvar, b.logvar));
    EXPECT_TRUE(torch::equal(reparameterize(a.mean, a.logvar, torch::zeros_like(a.mean)), a.mean));
    EXPECT_THROW(reparameterize(a.mean, a.logvar, torch::zeros({3, 1})), ContractViolation);
}

TEST(Encoder, SampleVarianceMatchesExpLogvar) {
    torch::manual_seed(8);
    Encoder e(testkit::tiny_specs().encoder);
    e->eval();
    auto out = e->forward(torch::rand({1, 3, 8, 8}));
    const std::int64_t n = 10000;
    auto eps = normal_rows(11, Stream::EncoderNoise, 0, n, out.mean.size(1));
    auto samples = reparameterize(out.mean.expand({n, -1}), out.logvar.expand({n, -1}), eps).to(torch::kFloat64);
    auto var = samples.var(0, /*unbiased=*/true);
    auto expected = out.logvar.squeeze(0).to(torch::kFloat64).exp();
    EXPECT_LT(((var - expected).abs() / expected).max().item<double>(), 0.05);
}

TEST(Specs, TinyNetworksStayUnderTheParameterBudget) {
    auto s = testkit::tiny_specs();
    EXPECT_LE(parameter_count(*Generator(s.generator)), 2000);
    EXPECT_LE(parameter_count(*Discriminator(s.discriminator)), 2000);
    EXPECT_LE(parameter_count(*Encoder(s.encoder)), 2000);
}

TEST(Specs, JsonRoundTripAndValidation) {
    auto s = toy_specs();
    nlohmann::json j = s;
    EXPECT_EQ(j.get<ModelSpecs>(), s);
    auto bad = s;
    bad.generator.resolution = 30;
    bad.generator.n_blocks = 2;
    EXPECT_THROW(bad.generator.validate(), ConfigError);
    bad = s;
    bad.encoder.z_dim = 0;
    EXPECT_THROW(bad.encoder.validate(), ConfigError);
}

TEST(Specs, InitialisationIsSeeded) {
    torch::manual_seed(42);
    Generator a(testkit::tiny_specs().generator);
    torch::manual_seed(42);
    Generator b(testkit::tiny_specs().generator);
    EXPECT_TRUE(testkit::parameters_equal(*a, *b, true));
}
