#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "uninpaint/rng.hpp"

using namespace uninpaint;

TEST(Rng, StreamsAreDeterministicAndDistinct) {
    auto a = stream_engine(5, Stream::Latent, 3, 1);
    auto b = stream_engine(5, Stream::Latent, 3, 1);
    EXPECT_EQ(a(), b());
    EXPECT_NE(stream_engine(5, Stream::Latent, 3, 1)(), stream_engine(5, Stream::FreshMask, 3, 1)());
    EXPECT_NE(stream_engine(5, Stream::Latent, 3, 1)(), stream_engine(6, Stream::Latent, 3, 1)());
    EXPECT_NE(stream_engine(5, Stream::Latent, 3, 1)(), stream_engine(5, Stream::Latent, 4, 1)());
    EXPECT_NE(stream_engine(5, Stream::Latent, 3, 1)(), stream_engine(5, Stream::Latent, 3, 2)());
}

TEST(Rng, NormalRowsDependOnlyOnTheRowIndex) {
    auto all = normal_rows(1, Stream::Latent, 0, 10, 4);
    auto tail = normal_rows(1, Stream::Latent, 6, 4, 4);
    EXPECT_TRUE(torch::equal(all.slice(0, 6, 10), tail));
    EXPECT_EQ(all.sizes(), (std::vector<std::int64_t>{10, 4}));
}

TEST(Rng, NormalRowsHaveUnitMoments) {
    auto x = normal_rows(2, Stream::Latent, 0, 5000, 8).to(torch::kFloat64);
    EXPECT_NEAR(x.mean().item<double>(), 0.0, 0.02);
    EXPECT_NEAR(x.var().item<double>(), 1.0, 0.03);
}

TEST(Rng, PermutationIsAPermutation) {
    auto e = stream_engine(3, Stream::DataOrder, 0);
    auto p = permutation(1000, e);
    auto sorted = p;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::int64_t> iota(1000);
    std::iota(iota.begin(), iota.end(), 0);
    EXPECT_EQ(sorted, iota);
    EXPECT_NE(p, iota);
}
