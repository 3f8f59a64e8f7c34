#include <gtest/gtest.h>

#include <fstream>

#include "testkit.hpp"
#include "uninpaint/errors.hpp"
#include "uninpaint/image_io.hpp"

using namespace uninpaint;

TEST(ImageIo, PngRoundTripIsExactOnQuantisedValues) {
    testkit::TempDir dir;
    torch::manual_seed(0);
    auto img = torch::randint(0, 256, {3, 7, 5}).to(torch::kFloat32) / 255.0f;
    write_png(img, dir / "c.png");
    EXPECT_TRUE(torch::equal(read_image(dir / "c.png"), img));

    auto gray = torch::randint(0, 256, {1, 4, 9}).to(torch::kFloat32) / 255.0f;
    write_png(gray, dir / "g.png");
    auto back = read_image(dir / "g.png");
    EXPECT_EQ(back.size(0), 1);
    EXPECT_TRUE(torch::equal(back, gray));
}

TEST(ImageIo, ValuesAreClampedAndRounded) {
    testkit::TempDir dir;
    auto img = torch::tensor({-0.5f, 0.3f, 1.7f}).reshape({1, 1, 3});
    write_png(img, dir / "x.png");
    auto back = read_image(dir / "x.png");
    EXPECT_FLOAT_EQ(back[0][0][0].item<float>(), 0.0f);
    EXPECT_FLOAT_EQ(back[0][0][1].item<float>(), std::round(0.3f * 255.0f) / 255.0f);
    EXPECT_FLOAT_EQ(back[0][0][2].item<float>(), 1.0f);
}

TEST(ImageIo, MaskRoundTrip) {
    testkit::TempDir dir;
    torch::manual_seed(1);
    Mask m((torch::rand({9, 13}) > 0.4).to(torch::kFloat32));
    write_mask_png(m, dir / "m.png");
    EXPECT_EQ(read_mask_png(dir / "m.png"), m);
}

TEST(ImageIo, UnreadableFilesRaise) {
    testkit::TempDir dir;
    std::ofstream(dir / "bad.png") << "garbage";
    EXPECT_THROW(read_image(dir / "bad.png"), Error);
    EXPECT_THROW(read_image(dir / "missing.png"), Error);
    EXPECT_THROW(write_png(torch::rand({2, 3, 3}), dir / "two.png"), ContractViolation);
}
