#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace uninpaint {

// Procedural dataset of colored shapes (discs, boxes, triangles) on a smooth
// two-tone background. Returns [n, 3, size, size] in [0, 1]. Image i depends
// only on (seed, i).
torch::Tensor make_toy_images(std::int64_t n, std::int64_t size, std::uint64_t seed);

} // namespace uninpaint
