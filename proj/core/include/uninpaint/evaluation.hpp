#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "uninpaint/data.hpp"
#include "uninpaint/nets.hpp"

namespace uninpaint {

// Mean over batch and pixels of the squared error. Requires clean images, so
// it is an evaluation-only quantity.
double mse_metric(const torch::Tensor& x_rec, const torch::Tensor& x_true);

struct EmbeddingStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov; // unbiased
    std::int64_t n = 0;

    void validate() const;
};

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the trace of the
// square root computed from the symmetric form S_a^(1/2) S_b S_a^(1/2).
// Eigenvalues slightly below zero are clamped; clearly indefinite input throws.
double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b);

class Embedder {
public:
    virtual ~Embedder() = default;
    // [N, C, H, W] -> [N, dim] (float64)
    virtual torch::Tensor embed(const torch::Tensor& images) = 0;
    virtual std::int64_t dim() const = 0;
    virtual std::string name() const = 0;
};

class IdentityEmbedder : public Embedder {
public:
    explicit IdentityEmbedder(std::int64_t dim) : dim_(dim) {}
    torch::Tensor embed(const torch::Tensor& images) override;
    std::int64_t dim() const override { return dim_; }
    std::string name() const override { return "identity"; }

private:
    std::int64_t dim_;
};

inline constexpr std::uint64_t kDefaultEmbedderSeed = 20190813;

// Fixed, randomly initialised convolutional feature extractor. Weights depend
// only on `seed`, so FID values are comparable between runs that share it
// (and only then).
class RandomConvEmbedder : public Embedder {
public:
    explicit RandomConvEmbedder(std::int64_t channels = 3, std::uint64_t seed = kDefaultEmbedderSeed);
    torch::Tensor embed(const torch::Tensor& images) override;
    std::int64_t dim() const override;
    std::string name() const override;

private:
    std::uint64_t seed_;
    std::vector<torch::Tensor> weights_;
};

// Empirical mean and unbiased covariance of the embeddings (pairwise
// summation, so the result does not depend on image order beyond rounding).
EmbeddingStats embed_and_stats(const torch::Tensor& images, Embedder& embedder, std::int64_t batch_size = 256);
EmbeddingStats stats_from_embeddings(const torch::Tensor& embeddings);

// Per-pixel population standard deviation across n_z reconstructions,
// averaged over channels and masked pixels. samples: [n_z, C, H, W],
// mask: [1, H, W]. Returns nullopt when no pixel is masked.
std::optional<double> diversity_from_samples(const torch::Tensor& samples, const torch::Tensor& mask);

struct DiversityResult {
    double value = 0.0;
    std::int64_t used = 0;
    std::int64_t skipped = 0; // observations without masked pixels
};

// Diversity over at most `max_images` observations with n_z latents each.
DiversityResult diversity_std(Generator& generator, const ObservationSet& observations, std::int64_t n_z,
                              std::uint64_t seed, std::int64_t max_images = 1000, std::int64_t batch_size = 64);

// Composed reconstruction in evaluation mode (running batch-norm statistics).
torch::Tensor reconstruct(Generator& generator, const torch::Tensor& y, const torch::Tensor& mask,
                          const torch::Tensor& z);

// Latents used by evaluation: row i of sample k is keyed on (seed, i, k).
torch::Tensor eval_latents(std::uint64_t seed, std::int64_t first_index, std::int64_t count, std::int64_t z_dim,
                           std::int64_t sample = 0);
// Same, keyed on a hash of each image's source id, so metrics do not depend
// on the order of the evaluated set.
torch::Tensor eval_latents(std::uint64_t seed, std::span<const std::string> source_ids, std::int64_t z_dim,
                           std::int64_t sample = 0);

struct EvalOptions {
    std::int64_t n_z = 10;
    std::int64_t max_images = 1000;
    std::uint64_t seed = 0;
    std::int64_t batch_size = 64;
    bool compute_fid = true;
    bool compute_std = true;
};

struct Metrics {
    double fid = std::numeric_limits<double>::quiet_NaN();
    double mse = std::numeric_limits<double>::quiet_NaN();
    double std_dev = std::numeric_limits<double>::quiet_NaN();
    std::int64_t images = 0;
    std::int64_t std_skipped = 0;
};

// FID (clean vs reconstructions), MSE (reconstructions vs clean) and
// diversity std on a set that carries clean images.
Metrics evaluate_generator(Generator& generator, const ObservationSet& set, Embedder* embedder, const EvalOptions& opt);

// Held-out MSE only, one latent per image.
double reconstruction_mse(Generator& generator, const ObservationSet& set, std::uint64_t seed,
                          std::int64_t batch_size = 128);

struct ReportRow {
    std::string variant;
    std::string corruption;
    double fid = std::numeric_limits<double>::quiet_NaN();
    double mse = std::numeric_limits<double>::quiet_NaN();
    double std_dev = std::numeric_limits<double>::quiet_NaN();

    bool operator==(const ReportRow&) const = default;
};

// CSV with header `variant,corruption,fid,mse,std`; missing values are empty.
void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);
std::string render_report_csv(const std::vector<ReportRow>& rows);
// Aligned text grid: one row per variant, FID/MSE/std triplets per corruption.
std::string render_report_table(const std::vector<ReportRow>& rows);

} // namespace uninpaint
