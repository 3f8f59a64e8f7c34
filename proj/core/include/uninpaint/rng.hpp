#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace uninpaint {

// Independent random streams. Every draw in the pipeline comes from an engine
// keyed on (seed, stream, a, b), so results never depend on call order,
// worker count or how a batch is split into micro-batches.
enum class Stream : std::uint64_t {
    CorruptOnce = 1, // mask of dataset item i
    Split = 2,       // holdout assignment
    DataOrder = 3,   // per-epoch permutation
    FreshMask = 4,   // the m~ resampled inside a training step
    Latent = 5,      // z ~ p_z during training
    EncoderNoise = 6,
    EvalLatent = 7,
    Toy = 8,
    Init = 9,
    Baseline = 10,
};

std::mt19937_64 stream_engine(std::uint64_t seed, Stream stream, std::uint64_t a = 0,
                              std::uint64_t b = 0);

// Standard normal vector of length n drawn from the given engine.
std::vector<float> normal_vector(std::mt19937_64& engine, std::int64_t n);

// [count, dim] standard normal tensor where row r is drawn from
// stream_engine(seed, stream, first_index + r, b).
torch::Tensor normal_rows(std::uint64_t seed, Stream stream, std::int64_t first_index,
                          std::int64_t count, std::int64_t dim, std::uint64_t b = 0);

// Deterministic permutation of [0, n).
std::vector<std::int64_t> permutation(std::int64_t n, std::mt19937_64& engine);

} // namespace uninpaint
