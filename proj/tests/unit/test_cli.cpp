#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "testkit.hpp"
#include "uninpaint/cli.hpp"
#include "uninpaint/config.hpp"
#include "uninpaint/image_io.hpp"

using namespace uninpaint;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    args.insert(args.begin(), "uninpaint");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string field_after(const std::string& text, const std::string& key) {
    std::smatch m;
    std::regex re(key + " ([^ \\n]+)");
    return std::regex_search(text, m, re) ? m[1].str() : std::string();
}

// One tiny dataset shared by every test: 40 synthetic 8x8 images.
class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new testkit::TempDir("uninpaint-cli");
        auto j = default_config_json();
        j["models"] = testkit::tiny_specs();
        j["data"]["resolution"] = 8;
        j["data"]["synthetic_count"] = 40;
        j["train"]["batch_size"] = 4;
        j["train"]["total_steps"] = 2;
        j["train"]["measurement"] = MeasurementConfig::drop_pixel(0.5);
        j["eval"]["n_z"] = 3;
        j["eval"]["batch_size"] = 8;
        std::ofstream(*dir_ / "config.json") << j.dump(2);
        config_ = (*dir_ / "config.json").string();
        auto r = run({"ingest", "synthetic", "--config", config_, "--out-dir", store()});
        ASSERT_EQ(r.code, 0) << r.err;
        r = run({"corrupt", store(), "--config", config_, "--out-dir", dataset()});
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }

    static std::string path(const std::string& name) { return (*dir_ / name).string(); }
    static std::string store() { return path("store"); }
    static std::string dataset() { return path("dataset"); }

    static testkit::TempDir* dir_;
    static std::string config_;
};

testkit::TempDir* CliTest::dir_ = nullptr;
std::string CliTest::config_;

} // namespace

TEST_F(CliTest, CorruptIsReproducibleForAFixedSeed) {
    auto a = run({"corrupt", store(), "--config", config_, "--out-dir", path("c1")});
    auto b = run({"corrupt", store(), "--config", config_, "--out-dir", path("c2")});
    auto c = run({"corrupt", store(), "--config", config_, "--seed", "7", "--out-dir", path("c3")});
    ASSERT_EQ(a.code, 0) << a.err;
    ASSERT_EQ(b.code, 0) << b.err;
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_FALSE(field_after(a.out, "hash").empty());
    EXPECT_EQ(field_after(a.out, "hash"), field_after(b.out, "hash"));
    EXPECT_NE(field_after(a.out, "hash"), field_after(c.out, "hash"));
}

TEST_F(CliTest, TrainEvalReconstructAndReport) {
    auto t = run({"train", dataset(), "--config", config_, "--variant", "zy", "--out-dir", path("run")});
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_TRUE(fs::exists(path("run/final.ckpt")));
    std::ifstream log(path("run/train.jsonl"));
    int lines = 0;
    for (std::string line; std::getline(log, line);) {
        ++lines;
    }
    EXPECT_EQ(lines, 2);

    auto e = run({"eval", dataset(), "--config", config_, "--checkpoint", path("run/final.ckpt"), "--out-dir",
                  path("eval")});
    ASSERT_EQ(e.code, 0) << e.err;
    EXPECT_NE(e.out.find("zy"), std::string::npos);
    EXPECT_TRUE(fs::exists(path("eval/metrics.csv")));

    auto g = run({"reconstruct", dataset(), "--config", config_, "--checkpoint", path("run/final.ckpt"), "--n-z",
                  "4", "--out-dir", path("grid")});
    ASSERT_EQ(g.code, 0) << g.err;
    EXPECT_EQ(field_after(g.out, "rows"), "5");
    auto grid = read_image(path("grid/grid.png"));
    EXPECT_EQ(grid.size(1), 5 * (8 + 2) + 2);

    auto b = run({"train", dataset(), "--config", config_, "--variant", "misgan", "--out-dir", path("misgan")});
    ASSERT_EQ(b.code, 0) << b.err;
    auto be = run({"eval", dataset(), "--config", config_, "--checkpoint", path("misgan/final.ckpt"), "--out-dir",
                   path("eval_misgan")});
    ASSERT_EQ(be.code, 0) << be.err;

    auto r = run({"report", path("eval/metrics.csv"), path("eval_misgan/metrics.csv"), "--out-dir", path("report")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("misgan"), std::string::npos);
    EXPECT_TRUE(fs::exists(path("report/report.csv")));

    auto dup = run({"report", path("eval/metrics.csv"), path("eval/metrics.csv"), "--out-dir", path("dup")});
    EXPECT_EQ(dup.code, 1);
    EXPECT_FALSE(fs::exists(path("dup")));
}

TEST_F(CliTest, UsageErrorsExitWithTwo) {
    EXPECT_EQ(run({}).code, 2);
    EXPECT_EQ(run({"fly"}).code, 2);
    auto r = run({"train", dataset(), "--variant", "gan", "--out-dir", path("x")});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.err.rfind("error: kind=usage msg=\"", 0), 0u) << r.err;
}

TEST_F(CliTest, FailuresReportKindAndLeaveNoOutputs) {
    auto r = run({"train", path("nowhere"), "--config", config_, "--out-dir", path("failed")});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error: kind=data msg=\"", 0), 0u) << r.err;
    EXPECT_FALSE(fs::exists(path("failed")));

    r = run({"train", dataset(), "--config", config_, "train.bogus=1", "--out-dir", path("failed")});
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(r.err.rfind("error: kind=config", 0), 0u) << r.err;

    r = run({"eval", dataset(), "--config", config_, "--checkpoint", path("missing.ckpt"), "--out-dir",
             path("failed")});
    EXPECT_EQ(r.code, 1);
    EXPECT_FALSE(fs::exists(path("failed")));
}

TEST_F(CliTest, OverridesChangeTheRun) {
    auto t = run({"train", dataset(), "--config", config_, "--variant", "base", "train.total_steps=1", "--out-dir",
                  path("short")});
    ASSERT_EQ(t.code, 0) << t.err;
    EXPECT_NE(t.out.find("for 1 updates"), std::string::npos) << t.out;
}

TEST_F(CliTest, RepeatedCommandsWriteIdenticalBytes) {
    auto bytes = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    for (const char* out : {"again1", "again2"}) {
        auto t = run({"train", dataset(), "--config", config_, "--variant", "y", "--out-dir", path(out)});
        ASSERT_EQ(t.code, 0) << t.err;
        auto e = run({"eval", dataset(), "--config", config_, "--checkpoint", path(std::string(out) + "/final.ckpt"),
                      "--out-dir", path(std::string(out) + "/eval")});
        ASSERT_EQ(e.code, 0) << e.err;
    }
    for (const char* f : {"final.ckpt", "train.jsonl", "config.json", "eval/metrics.csv"}) {
        const auto a = bytes(path(std::string("again1/") + f));
        EXPECT_FALSE(a.empty()) << f;
        EXPECT_TRUE(a == bytes(path(std::string("again2/") + f))) << f;
    }
}
