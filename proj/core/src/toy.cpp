#include "uninpaint/toy.hpp"

#include <array>
#include <cmath>
#include <random>

#include "uninpaint/rng.hpp"

namespace uninpaint {

namespace {

using Color = std::array<float, 3>;

Color random_color(std::mt19937_64& rng, float lo, float hi) {
    std::uniform_real_distribution<float> u(lo, hi);
    return {u(rng), u(rng), u(rng)};
}

// Sign of the edge function; used for triangle rasterisation.
float edge(float ax, float ay, float bx, float by, float px, float py) {
    return (px - ax) * (by - ay) - (py - ay) * (bx - ax);
}

} // namespace

torch::Tensor make_toy_images(std::int64_t n, std::int64_t size, std::uint64_t seed) {
    auto out = torch::empty({n, 3, size, size});
    auto acc = out.accessor<float, 4>();
    const auto s = static_cast<float>(size);
    for (std::int64_t i = 0; i < n; ++i) {
        auto rng = stream_engine(seed, Stream::Toy, static_cast<std::uint64_t>(i));
        const auto top = random_color(rng, 0.15f, 0.55f);
        const auto bottom = random_color(rng, 0.15f, 0.55f);
        for (std::int64_t r = 0; r < size; ++r) {
            const float t = static_cast<float>(r) / (s - 1.0f);
            for (std::int64_t c = 0; c < size; ++c) {
                for (int ch = 0; ch < 3; ++ch) {
                    acc[i][ch][r][c] = (1.0f - t) * top[static_cast<std::size_t>(ch)] + t * bottom[static_cast<std::size_t>(ch)];
                }
            }
        }
        std::uniform_int_distribution<int> shape_count(1, 3);
        std::uniform_int_distribution<int> shape_kind(0, 2);
        std::uniform_real_distribution<float> pos(0.15f * s, 0.85f * s);
        std::uniform_real_distribution<float> extent(0.12f * s, 0.3f * s);
        const int shapes = shape_count(rng);
        for (int k = 0; k < shapes; ++k) {
            const auto color = random_color(rng, 0.05f, 1.0f);
            const int kind = shape_kind(rng);
            const float cx = pos(rng);
            const float cy = pos(rng);
            const float half = extent(rng);
            const float angle = std::uniform_real_distribution<float>(0.0f, 6.2831853f)(rng);
            std::array<float, 6> tri{};
            for (int v = 0; v < 3; ++v) {
                const float a = angle + 2.0943951f * static_cast<float>(v);
                tri[static_cast<std::size_t>(2 * v)] = cx + half * std::cos(a);
                tri[static_cast<std::size_t>(2 * v + 1)] = cy + half * std::sin(a);
            }
            for (std::int64_t r = 0; r < size; ++r) {
                for (std::int64_t c = 0; c < size; ++c) {
                    const float px = static_cast<float>(c) + 0.5f;
                    const float py = static_cast<float>(r) + 0.5f;
                    bool inside = false;
                    if (kind == 0) {
                        inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= half * half;
                    } else if (kind == 1) {
                        inside = std::abs(px - cx) <= half * 0.8f && std::abs(py - cy) <= half * 0.8f;
                    } else {
                        const float e0 = edge(tri[0], tri[1], tri[2], tri[3], px, py);
                        const float e1 = edge(tri[2], tri[3], tri[4], tri[5], px, py);
                        const float e2 = edge(tri[4], tri[5], tri[0], tri[1], px, py);
                        inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
                    }
                    if (inside) {
                        for (int ch = 0; ch < 3; ++ch) {
                            acc[i][ch][r][c] = color[static_cast<std::size_t>(ch)];
                        }
                    }
                }
            }
        }
    }
    return out;
}

} // namespace uninpaint
