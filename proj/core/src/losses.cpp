#include "uninpaint/losses.hpp"

#include <cmath>
#include <sstream>

#include "uninpaint/errors.hpp"

namespace uninpaint {

std::string to_string(AdvForm form) {
    switch (form) {
    case AdvForm::Hinge:
        return "hinge";
    case AdvForm::Logistic:
        return "logistic";
    case AdvForm::LeastSquares:
        return "least_squares";
    }
    return "hinge";
}

AdvForm adv_form_from_string(const std::string& name) {
    if (name == "hinge") {
        return AdvForm::Hinge;
    }
    if (name == "logistic") {
        return AdvForm::Logistic;
    }
    if (name == "least_squares") {
        return AdvForm::LeastSquares;
    }
    throw ConfigError("unknown adversarial form '" + name + "'");
}

std::string to_string(MseReduction r) {
    return r == MseReduction::SumPerImage ? "sum_per_image" : "mean_per_pixel";
}

MseReduction mse_reduction_from_string(const std::string& name) {
    if (name == "sum_per_image") {
        return MseReduction::SumPerImage;
    }
    if (name == "mean_per_pixel") {
        return MseReduction::MeanPerPixel;
    }
    throw ConfigError("unknown mse reduction '" + name + "'");
}

void LossWeights::validate() const {
    if (!std::isfinite(lambda_z) || !std::isfinite(lambda_y) || lambda_z < 0.0 || lambda_y < 0.0) {
        throw ConfigError("loss weights must be finite and non-negative");
    }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"lambda_z", w.lambda_z},
         {"lambda_y", w.lambda_y},
         {"adv_form", to_string(w.adv_form)},
         {"mse_reduction", to_string(w.mse_reduction)}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
    LossWeights o;
    o.lambda_z = j.value("lambda_z", o.lambda_z);
    o.lambda_y = j.value("lambda_y", o.lambda_y);
    o.adv_form = adv_form_from_string(j.value("adv_form", to_string(o.adv_form)));
    o.mse_reduction = mse_reduction_from_string(j.value("mse_reduction", to_string(o.mse_reduction)));
    o.validate();
    w = o;
}

void to_json(nlohmann::json& j, const LossReport& r) {
    j = {{"d_loss", r.d_loss},       {"g_adv", r.g_adv},         {"z_rec", r.z_rec},
         {"y_rec_mse", r.y_rec_mse}, {"y_rec_adv", r.y_rec_adv}, {"total", r.total}};
}

void from_json(const nlohmann::json& j, LossReport& r) {
    r.d_loss = j.at("d_loss").get<double>();
    r.g_adv = j.at("g_adv").get<double>();
    r.z_rec = j.at("z_rec").get<double>();
    r.y_rec_mse = j.at("y_rec_mse").get<double>();
    r.y_rec_adv = j.at("y_rec_adv").get<double>();
    r.total = j.at("total").get<double>();
}

namespace {

void require_scores(const torch::Tensor& s, const char* what) {
    if (s.numel() == 0) {
        throw ContractViolation(std::string(what) + " must be non-empty");
    }
}

} // namespace

torch::Tensor d_adv_loss(const torch::Tensor& real_scores, const torch::Tensor& fake_scores, AdvForm form) {
    require_scores(real_scores, "real scores");
    require_scores(fake_scores, "fake scores");
    switch (form) {
    case AdvForm::Hinge:
        return torch::relu(1.0 - real_scores).mean() + torch::relu(1.0 + fake_scores).mean();
    case AdvForm::Logistic:
        // -log sigmoid(s) = softplus(-s), -log(1 - sigmoid(s)) = softplus(s)
        return torch::softplus(-real_scores).mean() + torch::softplus(fake_scores).mean();
    case AdvForm::LeastSquares:
        return 0.5 * (real_scores - 1.0).square().mean() + 0.5 * fake_scores.square().mean();
    }
    throw ContractViolation("unhandled adversarial form");
}

torch::Tensor g_adv_loss(const torch::Tensor& fake_scores, AdvForm form) {
    require_scores(fake_scores, "fake scores");
    switch (form) {
    case AdvForm::Hinge:
        return -fake_scores.mean();
    case AdvForm::Logistic:
        return torch::softplus(-fake_scores).mean();
    case AdvForm::LeastSquares:
        return 0.5 * (fake_scores - 1.0).square().mean();
    }
    throw ContractViolation("unhandled adversarial form");
}

torch::Tensor encoding_z_loss(const torch::Tensor& z, const torch::Tensor& z_hat) {
    if (z.sizes() != z_hat.sizes() || z.dim() != 2) {
        std::ostringstream msg;
        msg << "encoding_z_loss: shapes " << z.sizes() << " and " << z_hat.sizes() << " differ";
        throw ContractViolation(msg.str());
    }
    return (z - z_hat).square().sum(1).mean();
}

torch::Tensor image_squared_error(const torch::Tensor& a, const torch::Tensor& b, MseReduction reduction) {
    if (a.sizes() != b.sizes() || a.dim() != 4) {
        std::ostringstream msg;
        msg << "image batches " << a.sizes() << " and " << b.sizes() << " are not comparable";
        throw ContractViolation(msg.str());
    }
    auto sq = (a - b).square();
    if (reduction == MseReduction::MeanPerPixel) {
        return sq.mean();
    }
    return sq.sum({1, 2, 3}).mean();
}

EncodingYTerms encoding_y_terms(const torch::Tensor& y, const torch::Tensor& y_hat, const torch::Tensor& d_scores_y_hat,
                                AdvForm form, MseReduction reduction) {
    return {image_squared_error(y, y_hat, reduction), g_adv_loss(d_scores_y_hat, form)};
}

double total_objective(const LossReport& parts, const LossWeights& w) {
    return parts.g_adv + w.lambda_z * parts.z_rec + w.lambda_y * (parts.y_rec_adv + parts.y_rec_mse);
}

} // namespace uninpaint
