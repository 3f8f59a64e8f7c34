#pragma once

#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace uninpaint {

enum class AdvForm { Hinge, Logistic, LeastSquares };

std::string to_string(AdvForm form);
AdvForm adv_form_from_string(const std::string& name);

// How the squared error of the encoding-y term is reduced.
//   SumPerImage: sum over pixels of each image, then mean over the batch.
//   MeanPerPixel: mean over every entry.
enum class MseReduction { SumPerImage, MeanPerPixel };

std::string to_string(MseReduction r);
MseReduction mse_reduction_from_string(const std::string& name);

struct LossWeights {
    double lambda_z = 1.0;
    double lambda_y = 10.0;
    AdvForm adv_form = AdvForm::Hinge;
    MseReduction mse_reduction = MseReduction::SumPerImage;

    void validate() const;
    bool operator==(const LossWeights&) const = default;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// Per-update loss values. g_adv is the generator-side adversarial loss on the
// simulated measurements; y_rec_* are the two parts of the encoding-y term.
struct LossReport {
    double d_loss = 0.0;
    double g_adv = 0.0;
    double z_rec = 0.0;
    double y_rec_mse = 0.0;
    double y_rec_adv = 0.0;
    double total = 0.0;
};

void to_json(nlohmann::json& j, const LossReport& r);
void from_json(const nlohmann::json& j, LossReport& r);

// Discriminator loss (minimised by D).
//   hinge:         mean(relu(1 - s_real)) + mean(relu(1 + s_fake))
//   logistic:      -mean(log sigmoid(s_real)) - mean(log(1 - sigmoid(s_fake)))
//   least squares: 0.5 mean((s_real - 1)^2) + 0.5 mean(s_fake^2)
torch::Tensor d_adv_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores, AdvForm form);

// Generator loss on fake scores.
//   hinge: -mean(s); logistic (non-saturating): -mean(log sigmoid(s));
//   least squares: 0.5 mean((s - 1)^2)
torch::Tensor g_adv_loss(const torch::Tensor& fake_scores, AdvForm form);

// Batch mean of ||z - z_hat||^2.
torch::Tensor encoding_z_loss(const torch::Tensor& z, const torch::Tensor& z_hat);

// Squared error between two image batches under the chosen reduction.
torch::Tensor image_squared_error(const torch::Tensor& a, const torch::Tensor& b, MseReduction reduction);

struct EncodingYTerms {
    torch::Tensor mse;
    torch::Tensor adv;
};

// Encoding-y loss parts: squared error between y and its re-measured
// reconstruction y_hat, plus the generator-side adversarial term on D(y_hat).
EncodingYTerms encoding_y_terms(const torch::Tensor& y, const torch::Tensor& y_hat,
                                const torch::Tensor& d_scores_y_hat, AdvForm form,
                                MseReduction reduction = MseReduction::SumPerImage);

// L = g_adv + lambda_z * z_rec + lambda_y * (y_rec_adv + y_rec_mse)
double total_objective(const LossReport& parts, const LossWeights& w);

} // namespace uninpaint
