#include <gtest/gtest.h>

#include <cmath>

#include "testkit.hpp"
#include "uninpaint/errors.hpp"
#include "uninpaint/losses.hpp"

using namespace uninpaint;

namespace {

torch::Tensor t(std::initializer_list<double> v) {
    return torch::tensor(std::vector<double>(v), torch::kFloat64);
}

double scalar(const torch::Tensor& x) {
    return x.item<double>();
}

} // namespace

TEST(DAdvLoss, Examples) {
    EXPECT_DOUBLE_EQ(scalar(d_adv_loss(t({1}), t({-1}), AdvForm::Hinge)), 0.0);
    EXPECT_DOUBLE_EQ(scalar(d_adv_loss(t({0}), t({0}), AdvForm::Hinge)), 2.0);
    EXPECT_NEAR(scalar(d_adv_loss(t({0}), t({0}), AdvForm::Logistic)), 2.0 * std::log(2.0), 1e-12);
    EXPECT_DOUBLE_EQ(scalar(d_adv_loss(t({1}), t({0}), AdvForm::LeastSquares)), 0.0);
}

TEST(DAdvLoss, MatchesPerElementOracle) {
    auto real = t({2.0, -0.5, 0.3});
    auto fake = t({-3.0, 0.2});
    double hinge = 0.0, logistic = 0.0;
    for (double s : {2.0, -0.5, 0.3}) {
        hinge += std::max(0.0, 1.0 - s) / 3.0;
        logistic += std::log1p(std::exp(-s)) / 3.0;
    }
    for (double s : {-3.0, 0.2}) {
        hinge += std::max(0.0, 1.0 + s) / 2.0;
        logistic += std::log1p(std::exp(s)) / 2.0;
    }
    EXPECT_NEAR(scalar(d_adv_loss(real, fake, AdvForm::Hinge)), hinge, 1e-12);
    EXPECT_NEAR(scalar(d_adv_loss(real, fake, AdvForm::Logistic)), logistic, 1e-12);
    EXPECT_THROW(d_adv_loss(t({}), fake, AdvForm::Hinge), ContractViolation);
}

TEST(GAdvLoss, Examples) {
    EXPECT_DOUBLE_EQ(scalar(g_adv_loss(t({0}), AdvForm::Hinge)), 0.0);
    EXPECT_DOUBLE_EQ(scalar(g_adv_loss(t({3, -1}), AdvForm::Hinge)), -1.0);
    EXPECT_NEAR(scalar(g_adv_loss(t({0}), AdvForm::Logistic)), std::log(2.0), 1e-12);
    EXPECT_DOUBLE_EQ(scalar(g_adv_loss(t({1}), AdvForm::LeastSquares)), 0.0);
}

TEST(EncodingZLoss, Examples) {
    auto z = torch::randn({4, 3}, torch::kFloat64);
    EXPECT_DOUBLE_EQ(scalar(encoding_z_loss(z, z)), 0.0);
    EXPECT_DOUBLE_EQ(scalar(encoding_z_loss(t({1, 0}).reshape({1, 2}), t({0, 0}).reshape({1, 2}))), 1.0);
    auto a = torch::zeros({2, 3}, torch::kFloat64);
    auto b = torch::tensor({1.0, 0.0, 0.0, 1.0, 1.0, 1.0}, torch::kFloat64).reshape({2, 3});
    EXPECT_DOUBLE_EQ(scalar(encoding_z_loss(a, b)), 2.0);
    EXPECT_THROW(encoding_z_loss(a, torch::zeros({2, 4}, torch::kFloat64)), ContractViolation);
}

TEST(EncodingYTerms, Examples) {
    auto y = torch::rand({2, 3, 4, 5}, torch::kFloat64);
    auto same = encoding_y_terms(y, y, t({0.0, 0.0}), AdvForm::Hinge);
    EXPECT_DOUBLE_EQ(scalar(same.mse), 0.0);
    EXPECT_DOUBLE_EQ(scalar(same.adv), 0.0);
    const double n = 3 * 4 * 5;
    auto shifted = encoding_y_terms(y, y + 0.1, t({0.0, 0.0}), AdvForm::Hinge);
    EXPECT_NEAR(scalar(shifted.mse), 0.01 * n, 1e-12);
    auto per_pixel = encoding_y_terms(y, y + 0.1, t({0.0, 0.0}), AdvForm::Hinge, MseReduction::MeanPerPixel);
    EXPECT_NEAR(scalar(per_pixel.mse), 0.01, 1e-14);
    EXPECT_THROW(encoding_y_terms(y, y.slice(3, 0, 4), t({0.0, 0.0}), AdvForm::Hinge), ContractViolation);
}

TEST(TotalObjective, Examples) {
    LossWeights none{.lambda_z = 0.0, .lambda_y = 0.0};
    LossReport parts{.g_adv = 0.7, .z_rec = 5.0, .y_rec_mse = 3.0, .y_rec_adv = 2.0};
    EXPECT_DOUBLE_EQ(total_objective(parts, none), 0.7);

    LossWeights z_only{.lambda_z = 1.0, .lambda_y = 0.0};
    EXPECT_DOUBLE_EQ(total_objective(LossReport{.z_rec = 2.0}, z_only), 2.0);

    LossWeights both{.lambda_z = 1.0, .lambda_y = 1.0};
    LossReport ones{.g_adv = 1.0, .z_rec = 1.0, .y_rec_mse = 1.0, .y_rec_adv = 1.0};
    // Oracle: adversarial term, then each auxiliary term weighted separately.
    const double oracle = ones.g_adv + both.lambda_z * ones.z_rec + both.lambda_y * ones.y_rec_mse +
                          both.lambda_y * ones.y_rec_adv;
    EXPECT_DOUBLE_EQ(total_objective(ones, both), oracle);
    EXPECT_DOUBLE_EQ(total_objective(ones, both), 4.0);
}

TEST(LossWeights, ValidationAndJson) {
    LossWeights w{.lambda_z = 2.0, .lambda_y = 0.5, .adv_form = AdvForm::Logistic};
    nlohmann::json j = w;
    EXPECT_EQ(j.get<LossWeights>(), w);
    EXPECT_THROW((LossWeights{.lambda_z = -1.0}).validate(), ConfigError);
    EXPECT_THROW(adv_form_from_string("wasserstein"), ConfigError);
}

// Analytic gradients of the pure formulas against central differences, away
// from the hinge kinks.
TEST(LossGradients, PureFormulas) {
    torch::manual_seed(0);
    auto real = t({0.3, -1.7, 2.4, 0.55}).requires_grad_(true);
    auto fake = t({-0.2, 1.6, -1.4}).requires_grad_(true);
    for (AdvForm form : {AdvForm::Hinge, AdvForm::Logistic, AdvForm::LeastSquares}) {
        EXPECT_LT(testkit::gradient_error([&] { return d_adv_loss(real, fake, form); }, {real, fake}), 1e-6);
        EXPECT_LT(testkit::gradient_error([&] { return g_adv_loss(fake, form); }, {fake}), 1e-6);
    }
    auto z = torch::randn({3, 4}, torch::kFloat64).requires_grad_(true);
    auto z_hat = torch::randn({3, 4}, torch::kFloat64).requires_grad_(true);
    EXPECT_LT(testkit::gradient_error([&] { return encoding_z_loss(z, z_hat); }, {z, z_hat}), 1e-6);
    auto y = torch::rand({2, 3, 3, 3}, torch::kFloat64).requires_grad_(true);
    auto y_hat = torch::rand({2, 3, 3, 3}, torch::kFloat64).requires_grad_(true);
    auto scores = t({0.4, -0.8}).requires_grad_(true);
    for (MseReduction r : {MseReduction::SumPerImage, MseReduction::MeanPerPixel}) {
        EXPECT_LT(testkit::gradient_error(
                      [&] { return encoding_y_terms(y, y_hat, scores, AdvForm::Hinge, r).mse; }, {y, y_hat}),
                  1e-6);
    }
    EXPECT_LT(testkit::gradient_error([&] { return encoding_y_terms(y, y_hat, scores, AdvForm::Logistic).adv; },
                                      {scores}),
              1e-6);
}
