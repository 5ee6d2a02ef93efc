#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>

#include "pvp/pipeline.hpp"
#include "test_support.hpp"

// End-to-end checks of the command-line driver on a small, fast config.

namespace {

struct Result {
    int status = -1;
    std::string output;  // stdout and stderr
};

Result run_pvp(const std::string& args) {
    const std::string cmd = std::string(PVP_BIN) + " " + args + " 2>&1";
    Result r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) {
        return r;
    }
    std::array<char, 4096> buf{};
    while (const std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) {
        r.output.append(buf.data(), n);
    }
    const int raw = ::pclose(pipe);
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return r;
}

class Cli : public ::testing::Test {
protected:
    pvp_test::TempDir dir{"cli"};

    void SetUp() override {
        const pvp::json cfg{{"schema_version", 1},
                            {"model", {{"n_layers", 2}, {"d_model", 16}, {"n_heads", 2}, {"mlp_hidden", 32}}},
                            {"train", {{"epochs", 1}}}};
        pvp::write_file_atomic(config(), cfg.dump());
    }

    [[nodiscard]] std::filesystem::path config() const { return dir.path() / "config.json"; }
    [[nodiscard]] std::filesystem::path root() const { return dir.path() / "out"; }

    Result pvp(const std::string& args) const {
        return run_pvp("--config " + config().string() + " --out " + root().string() + " " + args);
    }
};

}  // namespace

TEST_F(Cli, GenTwiceIsUpToDate) {
    const auto first = pvp("gen");
    ASSERT_EQ(first.status, 0) << first.output;
    const auto before = pvp::dir_digest(root() / "dataset");
    const auto second = pvp("gen");
    EXPECT_EQ(second.status, 0);
    EXPECT_NE(second.output.find("up to date"), std::string::npos) << second.output;
    EXPECT_EQ(pvp::dir_digest(root() / "dataset"), before);
    EXPECT_TRUE(std::filesystem::exists(root() / "run.json"));
    EXPECT_FALSE(std::filesystem::exists(root() / ".lock"));
}

TEST_F(Cli, SteerEvalBeforeFitIsAMissingArtifact) {
    ASSERT_EQ(pvp("gen").status, 0);
    ASSERT_EQ(pvp("train").status, 0);
    const auto r = pvp("steer eval");
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.output.find("missing artifact"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("pvp steer fit"), std::string::npos) << r.output;
}

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run_pvp("").status, 2);
    EXPECT_EQ(run_pvp("frobnicate").status, 2);
    EXPECT_EQ(run_pvp("steer").status, 2);
    EXPECT_EQ(pvp("gen --seed-override data").status, 2);
    EXPECT_EQ(pvp("gen --seed-override color=3").status, 2);
    EXPECT_EQ(run_pvp("--help").status, 0);
}

TEST_F(Cli, StaleUpstreamIsRefused) {
    ASSERT_EQ(pvp("gen").status, 0);
    ASSERT_EQ(pvp("train").status, 0);
    const auto r = pvp("--seed-override data=99 eval");
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.output.find("stale"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("pvp gen"), std::string::npos) << r.output;
    // Tampering with an artifact is caught too.
    pvp::write_file_atomic(root() / "model" / "extra.txt", "x");
    const auto t = pvp("eval");
    EXPECT_EQ(t.status, 1);
    EXPECT_NE(t.output.find("modified"), std::string::npos) << t.output;
}

TEST_F(Cli, LockedRootIsRejected) {
    std::filesystem::create_directories(root());
    pvp::write_file_atomic(root() / ".lock", "");
    const auto r = pvp("gen");
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.output.find("locked"), std::string::npos) << r.output;
}

TEST_F(Cli, ConfigErrorsAndEcho) {
    pvp::write_file_atomic(config(), R"({"schema_version": 1, "model": {"d_model": 65}})");
    const auto bad = pvp("gen");
    EXPECT_EQ(bad.status, 1);
    EXPECT_NE(bad.output.find("d_model"), std::string::npos) << bad.output;
    const auto echo = run_pvp("config");
    ASSERT_EQ(echo.status, 0);
    EXPECT_EQ(pvp::parse_config(pvp::json::parse(echo.output)), pvp::default_config());
}

TEST_F(Cli, FullPipelineEmitsEveryArtifact) {
    const auto r = pvp("--quiet all");
    // The tiny model is not expected to meet the acceptance thresholds; the run must still complete.
    EXPECT_TRUE(r.status == 0 || r.status == 1) << r.output;
    EXPECT_NE(r.output.find("verify:"), std::string::npos) << r.output;
    for (const char* f : {"table1_accuracy.csv", "table2_flips.csv", "table3_steering.csv", "table5_attention.csv",
                          "fig3_traces.jsonl", "fig4_curves.csv", "fig5_pca.csv", "summary.json"}) {
        EXPECT_TRUE(std::filesystem::exists(root() / "report" / f)) << f;
    }
    // The searched windows feed the attention and PCA stages.
    EXPECT_TRUE(std::filesystem::exists(root() / "attn" / "attention_color.json"));
    EXPECT_TRUE(std::filesystem::exists(root() / "pca" / "pca_color.json"));
    const auto summary = pvp::json::parse(pvp::read_file(root() / "report" / "summary.json"));
    EXPECT_TRUE(summary.contains("5.image_mass_margin")) << summary.dump();
    EXPECT_TRUE(summary.contains("8.pca_distance_margin")) << summary.dump();
    const auto run = pvp::json::parse(pvp::read_file(root() / "run.json"));
    EXPECT_TRUE(run.contains("config"));
    // A second run is a no-op for every stage.
    const auto again = pvp("report");
    EXPECT_EQ(again.status, 0);
    EXPECT_NE(again.output.find("up to date"), std::string::npos) << again.output;
}
