#include "uninpaint/rng.hpp"

#include <numeric>

namespace uninpaint {

std::mt19937_64 stream_engine(std::uint64_t seed, Stream stream, std::uint64_t a, std::uint64_t b) {
    auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
    auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
    std::seed_seq seq{lo(seed), hi(seed), lo(static_cast<std::uint64_t>(stream)),
                      lo(a),    hi(a),    lo(b),
                      hi(b)};
    return std::mt19937_64(seq);
}

std::vector<float> normal_vector(std::mt19937_64& engine, std::int64_t n) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> out(static_cast<std::size_t>(n));
    for (auto& v : out) {
        v = static_cast<float>(normal(engine));
    }
    return out;
}

torch::Tensor normal_rows(std::uint64_t seed, Stream stream, std::int64_t first_index,
                          std::int64_t count, std::int64_t dim, std::uint64_t b) {
    auto out = torch::empty({count, dim}, torch::kFloat32);
    auto acc = out.accessor<float, 2>();
    for (std::int64_t r = 0; r < count; ++r) {
        auto engine = stream_engine(seed, stream, static_cast<std::uint64_t>(first_index + r), b);
        auto row = normal_vector(engine, dim);
        for (std::int64_t c = 0; c < dim; ++c) {
            acc[r][c] = row[static_cast<std::size_t>(c)];
        }
    }
    return out;
}

std::vector<std::int64_t> permutation(std::int64_t n, std::mt19937_64& engine) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    // Fisher-Yates with an explicit uniform draw so the result does not depend
    // on the standard library's std::shuffle implementation.
    for (std::int64_t i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<std::int64_t> pick(0, i);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(engine))]);
    }
    return idx;
}

} // namespace uninpaint
