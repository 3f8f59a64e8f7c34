#include "uninpaint/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "uninpaint/corruption.hpp"
#include "uninpaint/errors.hpp"
#include "uninpaint/rng.hpp"

namespace uninpaint {

namespace {

class EvalModeGuard {
public:
    explicit EvalModeGuard(torch::nn::Module& m) : module_(m), was_training_(m.is_training()) { module_.eval(); }
    ~EvalModeGuard() { module_.train(was_training_); }
    EvalModeGuard(const EvalModeGuard&) = delete;
    EvalModeGuard& operator=(const EvalModeGuard&) = delete;

private:
    torch::nn::Module& module_;
    bool was_training_;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr Eigen::Index kPairwiseBlock = 8;

Eigen::VectorXd pairwise_row_sum(const Eigen::Ref<const RowMatrix>& x, Eigen::Index begin, Eigen::Index end) {
    if (end - begin <= kPairwiseBlock) {
        Eigen::VectorXd s = Eigen::VectorXd::Zero(x.cols());
        for (auto r = begin; r < end; ++r) {
            s += x.row(r).transpose();
        }
        return s;
    }
    const auto mid = begin + (end - begin) / 2;
    return pairwise_row_sum(x, begin, mid) + pairwise_row_sum(x, mid, end);
}

Eigen::MatrixXd pairwise_scatter(const Eigen::Ref<const RowMatrix>& centered, Eigen::Index begin, Eigen::Index end) {
    if (end - begin <= kPairwiseBlock) {
        Eigen::MatrixXd s = Eigen::MatrixXd::Zero(centered.cols(), centered.cols());
        for (auto r = begin; r < end; ++r) {
            s += centered.row(r).transpose() * centered.row(r);
        }
        return s;
    }
    const auto mid = begin + (end - begin) / 2;
    return pairwise_scatter(centered, begin, mid) + pairwise_scatter(centered, mid, end);
}

double pairwise_mean(const std::vector<double>& values, std::size_t begin, std::size_t end) {
    if (end - begin <= 8) {
        double s = 0.0;
        for (auto i = begin; i < end; ++i) {
            s += values[i];
        }
        return s;
    }
    const auto mid = begin + (end - begin) / 2;
    return pairwise_mean(values, begin, mid) + pairwise_mean(values, mid, end);
}

// Symmetric PSD square root; rejects eigenvalues below -tolerance.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(0.5 * (m + m.transpose()));
    auto values = solver.eigenvalues();
    const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
    if (values.minCoeff() < -1e-6 * scale) {
        throw ContractViolation(std::string(what) + " is not positive semi-definite");
    }
    Eigen::VectorXd roots = values.cwiseMax(0.0).cwiseSqrt();
    return solver.eigenvectors() * roots.asDiagonal() * solver.eigenvectors().transpose();
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Source ids of images [first, first + count); positions stand in for missing ids.
std::vector<std::string> ids_of(const ObservationSet& set, std::int64_t first, std::int64_t count) {
    std::vector<std::string> ids;
    for (std::int64_t i = first; i < first + count; ++i) {
        ids.push_back(set.source_ids.empty() ? std::to_string(i) : set.source_ids[static_cast<std::size_t>(i)]);
    }
    return ids;
}

std::string format_value(double v) {
    if (std::isnan(v)) {
        return "";
    }
    std::ostringstream s;
    s << std::setprecision(6) << v;
    return s.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
        out.push_back(field);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

} // namespace

double mse_metric(const torch::Tensor& x_rec, const torch::Tensor& x_true) {
    if (x_rec.sizes() != x_true.sizes()) {
        std::ostringstream msg;
        msg << "mse_metric: shapes " << x_rec.sizes() << " and " << x_true.sizes() << " differ";
        throw ContractViolation(msg.str());
    }
    return (x_rec.to(torch::kFloat64) - x_true.to(torch::kFloat64)).square().mean().item<double>();
}

void EmbeddingStats::validate() const {
    if (n < 2) {
        throw ContractViolation("embedding statistics need at least two samples");
    }
    if (cov.rows() != mean.size() || cov.cols() != mean.size()) {
        throw ContractViolation("embedding covariance does not match the mean dimension");
    }
    const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) {
        throw ContractViolation("embedding covariance is not symmetric");
    }
}

double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b) {
    if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
        throw ContractViolation("frechet_distance: statistics have different dimensions");
    }
    if (a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size()) {
        throw ContractViolation("frechet_distance: covariance does not match mean dimension");
    }
    const auto sqrt_a = psd_sqrt(a.cov, "first covariance");
    psd_sqrt(b.cov, "second covariance");
    Eigen::MatrixXd inner = sqrt_a * b.cov * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double trace_sqrt = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
    return std::max(0.0, d);
}

torch::Tensor IdentityEmbedder::embed(const torch::Tensor& images) {
    auto flat = images.reshape({images.size(0), -1}).to(torch::kFloat64);
    if (flat.size(1) != dim_) {
        throw ContractViolation("identity embedder dimension mismatch");
    }
    return flat;
}

RandomConvEmbedder::RandomConvEmbedder(std::int64_t channels, std::uint64_t seed) : seed_(seed) {
    const std::vector<std::pair<std::int64_t, std::int64_t>> layers{{channels, 16}, {16, 32}, {32, 32}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto [in, out] = layers[l];
        auto engine = stream_engine(seed, Stream::Init, 1000 + l);
        auto values = normal_vector(engine, out * in * 9);
        auto w = torch::tensor(values, torch::kFloat32).reshape({out, in, 3, 3});
        weights_.push_back(w * std::sqrt(2.0 / static_cast<double>(in * 9)));
    }
}

std::int64_t RandomConvEmbedder::dim() const {
    return 2 * weights_.back().size(0);
}

std::string RandomConvEmbedder::name() const {
    return "random_conv(seed=" + std::to_string(seed_) + ")";
}

torch::Tensor RandomConvEmbedder::embed(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    namespace F = torch::nn::functional;
    auto h = images.to(torch::kFloat32) * 2.0 - 1.0;
    for (const auto& w : weights_) {
        h = torch::relu(F::conv2d(h, w, F::Conv2dFuncOptions().stride(2).padding(1)));
    }
    auto flat = h.flatten(2);
    return torch::cat({flat.mean(2), flat.std(2, /*unbiased=*/false)}, 1).to(torch::kFloat64);
}

EmbeddingStats stats_from_embeddings(const torch::Tensor& embeddings) {
    if (embeddings.dim() != 2 || embeddings.size(0) < 2) {
        throw ContractViolation("embedding statistics need at least two embedded images");
    }
    auto e = embeddings.to(torch::kFloat64).contiguous();
    Eigen::Map<const RowMatrix> x(e.data_ptr<double>(), e.size(0), e.size(1));
    EmbeddingStats stats;
    stats.n = e.size(0);
    stats.mean = pairwise_row_sum(x, 0, x.rows()) / static_cast<double>(stats.n);
    RowMatrix centered = x.rowwise() - stats.mean.transpose();
    stats.cov = pairwise_scatter(centered, 0, centered.rows()) / static_cast<double>(stats.n - 1);
    stats.cov = 0.5 * (stats.cov + stats.cov.transpose());
    return stats;
}

EmbeddingStats embed_and_stats(const torch::Tensor& images, Embedder& embedder, std::int64_t batch_size) {
    if (images.dim() != 4 || images.size(0) < 2) {
        throw ContractViolation("embed_and_stats needs at least two [C, H, W] images");
    }
    std::vector<torch::Tensor> parts;
    for (std::int64_t i = 0; i < images.size(0); i += batch_size) {
        parts.push_back(embedder.embed(images.slice(0, i, std::min(images.size(0), i + batch_size))));
    }
    return stats_from_embeddings(torch::cat(parts, 0));
}

std::optional<double> diversity_from_samples(const torch::Tensor& samples, const torch::Tensor& mask) {
    if (samples.dim() != 4 || mask.dim() != 3 || mask.size(0) != 1 || mask.size(1) != samples.size(2) ||
        mask.size(2) != samples.size(3)) {
        throw ContractViolation("diversity_from_samples expects [n_z, C, H, W] samples and a [1, H, W] mask");
    }
    auto s = samples.to(torch::kFloat64);
    auto holes = 1.0 - mask.to(torch::kFloat64);
    const double count = holes.sum().item<double>();
    if (count == 0.0) {
        return std::nullopt;
    }
    auto per_pixel = s.std(0, /*unbiased=*/false); // population std, [C, H, W]
    return (per_pixel * holes).sum().item<double>() / (count * static_cast<double>(s.size(1)));
}

torch::Tensor eval_latents(std::uint64_t seed, std::int64_t first_index, std::int64_t count, std::int64_t z_dim,
                           std::int64_t sample) {
    return normal_rows(seed, Stream::EvalLatent, first_index, count, z_dim, static_cast<std::uint64_t>(sample));
}

torch::Tensor eval_latents(std::uint64_t seed, std::span<const std::string> source_ids, std::int64_t z_dim,
                           std::int64_t sample) {
    auto out = torch::empty({static_cast<std::int64_t>(source_ids.size()), z_dim});
    for (std::size_t i = 0; i < source_ids.size(); ++i) {
        auto engine = stream_engine(seed, Stream::EvalLatent, fnv1a64(source_ids[i]), static_cast<std::uint64_t>(sample));
        out[static_cast<std::int64_t>(i)].copy_(torch::tensor(normal_vector(engine, z_dim)));
    }
    return out;
}

torch::Tensor reconstruct(Generator& generator, const torch::Tensor& y, const torch::Tensor& mask,
                          const torch::Tensor& z) {
    EvalModeGuard eval(*generator);
    torch::NoGradGuard no_grad;
    return compose_reconstruction(generator->forward(y, mask, z), y, mask);
}

DiversityResult diversity_std(Generator& generator, const ObservationSet& observations, std::int64_t n_z,
                              std::uint64_t seed, std::int64_t max_images, std::int64_t batch_size) {
    if (n_z < 2) {
        throw ContractViolation("diversity_std needs n_z >= 2");
    }
    const auto n = std::min(observations.size(), max_images);
    const auto z_dim = generator->spec().z_dim;
    DiversityResult result;
    std::vector<double> values;
    for (std::int64_t first = 0; first < n; first += batch_size) {
        const auto b = std::min(batch_size, n - first);
        auto y = observations.y.slice(0, first, first + b);
        auto m = observations.mask.slice(0, first, first + b);
        const auto ids = ids_of(observations, first, b);
        std::vector<torch::Tensor> zs;
        for (std::int64_t k = 0; k < n_z; ++k) {
            zs.push_back(eval_latents(seed, ids, z_dim, k));
        }
        auto recon = reconstruct(generator, y.repeat({n_z, 1, 1, 1}), m.repeat({n_z, 1, 1, 1}), torch::cat(zs, 0));
        recon = recon.reshape({n_z, b, y.size(1), y.size(2), y.size(3)});
        for (std::int64_t i = 0; i < b; ++i) {
            auto v = diversity_from_samples(recon.select(1, i), m[i]);
            if (v) {
                values.push_back(*v);
                ++result.used;
            } else {
                ++result.skipped;
            }
        }
    }
    result.value = values.empty() ? 0.0 : pairwise_mean(values, 0, values.size()) / static_cast<double>(values.size());
    return result;
}

double reconstruction_mse(Generator& generator, const ObservationSet& set, std::uint64_t seed,
                          std::int64_t batch_size) {
    if (!set.has_clean()) {
        throw ContractViolation("reconstruction_mse needs clean images");
    }
    double sum = 0.0;
    for (std::int64_t first = 0; first < set.size(); first += batch_size) {
        const auto b = std::min(batch_size, set.size() - first);
        auto z = eval_latents(seed, ids_of(set, first, b), generator->spec().z_dim);
        auto recon = reconstruct(generator, set.y.slice(0, first, first + b), set.mask.slice(0, first, first + b), z);
        sum += (recon.to(torch::kFloat64) - set.clean.slice(0, first, first + b).to(torch::kFloat64))
                   .square()
                   .sum()
                   .item<double>();
    }
    return sum / static_cast<double>(set.clean.numel());
}

Metrics evaluate_generator(Generator& generator, const ObservationSet& set, Embedder* embedder, const EvalOptions& opt) {
    if (!set.has_clean()) {
        throw ContractViolation("evaluation needs clean images");
    }
    const auto n = std::min(set.size(), opt.max_images);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    auto subset = set.subset(idx);

    std::vector<torch::Tensor> recon;
    for (std::int64_t first = 0; first < n; first += opt.batch_size) {
        const auto b = std::min(opt.batch_size, n - first);
        auto z = eval_latents(opt.seed, ids_of(subset, first, b), generator->spec().z_dim);
        recon.push_back(
            reconstruct(generator, subset.y.slice(0, first, first + b), subset.mask.slice(0, first, first + b), z));
    }
    auto reconstructions = torch::cat(recon, 0);

    Metrics m;
    m.images = n;
    m.mse = mse_metric(reconstructions, subset.clean);
    if (opt.compute_fid && embedder != nullptr && n >= 2) {
        m.fid = frechet_distance(embed_and_stats(subset.clean, *embedder), embed_and_stats(reconstructions, *embedder));
    }
    if (opt.compute_std) {
        auto d = diversity_std(generator, subset, opt.n_z, opt.seed, opt.max_images, opt.batch_size);
        m.std_dev = d.value;
        m.std_skipped = d.skipped;
    }
    return m;
}

std::string render_report_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream out;
    out << "variant,corruption,fid,mse,std\n";
    for (const auto& r : rows) {
        out << r.variant << ',' << r.corruption << ',' << format_value(r.fid) << ',' << format_value(r.mse) << ','
            << format_value(r.std_dev) << '\n';
    }
    return out.str();
}

void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write report '" + path.string() + "'");
    }
    out << render_report_csv(rows);
    if (!out) {
        throw IoError("failed writing report '" + path.string() + "'");
    }
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open report '" + path.string() + "'");
    }
    std::string line;
    if (!std::getline(in, line) || line != "variant,corruption,fid,mse,std") {
        throw DataError("'" + path.string() + "' is not a report CSV");
    }
    auto parse = [&](const std::string& s) {
        if (s.empty()) {
            return std::numeric_limits<double>::quiet_NaN();
        }
        try {
            return std::stod(s);
        } catch (const std::exception&) {
            throw DataError("bad number '" + s + "' in '" + path.string() + "'");
        }
    };
    std::vector<ReportRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        auto f = split_csv_line(line);
        if (f.size() != 5) {
            throw DataError("malformed report line '" + line + "'");
        }
        rows.push_back({f[0], f[1], parse(f[2]), parse(f[3]), parse(f[4])});
    }
    return rows;
}

std::string render_report_table(const std::vector<ReportRow>& rows) {
    std::vector<std::string> variants;
    std::vector<std::string> corruptions;
    for (const auto& r : rows) {
        if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) {
            variants.push_back(r.variant);
        }
        if (std::find(corruptions.begin(), corruptions.end(), r.corruption) == corruptions.end()) {
            corruptions.push_back(r.corruption);
        }
    }
    auto cell = [](double v, int precision) {
        if (std::isnan(v)) {
            return std::string("-");
        }
        std::ostringstream s;
        s << std::fixed << std::setprecision(precision) << v;
        return s.str();
    };
    constexpr int kVariantWidth = 12;
    constexpr int kCellWidth = 9;
    std::ostringstream out;
    out << "# std: population standard deviation over masked pixels, averaged over channels and images\n";
    out << std::left << std::setw(kVariantWidth) << "";
    for (const auto& c : corruptions) {
        out << "| " << std::setw(3 * kCellWidth) << c;
    }
    out << '\n' << std::setw(kVariantWidth) << "variant";
    for (std::size_t i = 0; i < corruptions.size(); ++i) {
        out << "| " << std::setw(kCellWidth) << "FID" << std::setw(kCellWidth) << "MSE" << std::setw(kCellWidth)
            << "std";
    }
    out << '\n';
    for (const auto& v : variants) {
        out << std::setw(kVariantWidth) << v;
        for (const auto& c : corruptions) {
            auto it = std::find_if(rows.begin(), rows.end(),
                                   [&](const ReportRow& r) { return r.variant == v && r.corruption == c; });
            ReportRow row = it != rows.end() ? *it : ReportRow{v, c};
            out << "| " << std::setw(kCellWidth) << cell(row.fid, 2) << std::setw(kCellWidth) << cell(row.mse, 3)
                << std::setw(kCellWidth) << cell(row.std_dev, 4);
        }
        out << '\n';
    }
    return out.str();
}

} // namespace uninpaint
