#include <filesystem>
#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "cdiff/cli.hpp"
#include "cdiff/dataset.hpp"
#include "cdiff/evaluate.hpp"
#include "cdiff/image_io.hpp"
#include "test_util.hpp"

using namespace cdiff;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cdiff");
    return cli::run(args);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// One tiny pipeline shared by every test: dataset, pretrain, adapters.
struct Pipeline {
    fs::path root = test::scratch("cli");
    fs::path data = root / "data";
    fs::path adapters = root / "adapters" / "adapters.pt";
    int synth_rc = -1, pre_rc = -1, adapt_rc = -1;

    Pipeline() {
        std::ofstream(root / "tiny.cfg") << "# tiny run\n"
                                            "batch_size = 2\n"
                                            "lr = 0.001\n"
                                            "model.base_width = 16\n"
                                            "model.control_width = 8\n"
                                            "model.time_dim = 32\n"
                                            "model.prompt_dim = 16\n"
                                            "model.groups = 4\n"
                                            "model.heads = 2\n"
                                            "lora.rank = 2\n"
                                            "log_every = 1\n";
        synth_rc = run_cli({"synth-data", "--out", data.string(), "--n", "10", "--size", "32", "32", "--seed", "3"});
        pre_rc = run_cli({"pretrain", "--config", (root / "tiny.cfg").string(), "--dataset", data.string(), "--out",
                      (root / "pre").string(), "--set", "total_steps=2"});
        adapt_rc = run_cli({"train-adapters", "--config", (root / "tiny.cfg").string(), "--dataset", data.string(),
                        "--base", (root / "pre" / "pretrain.pt").string(), "--out", (root / "adapters").string(),
                        "--set", "total_steps=2", "--set", "alternation_period=1"});
    }
};

Pipeline& pipeline() {
    static Pipeline p;
    return p;
}

} // namespace

TEST(Cli, HelpOnEverySubcommand) {
    testing::internal::CaptureStdout();
    EXPECT_EQ(run_cli({"--help"}), 0);
    for (const auto* sub : {"synth-data", "pretrain", "train-adapters", "resume", "sample", "inpaint", "evaluate"})
        EXPECT_EQ(run_cli({sub, "--help"}), 0) << sub;
    const auto out = testing::internal::GetCapturedStdout();
    EXPECT_NE(out.find("--layout"), std::string::npos);
}

TEST(Cli, UsageErrors) {
    testing::internal::CaptureStderr();
    EXPECT_EQ(run_cli({}), cli::kUsage);
    EXPECT_EQ(run_cli({"sample"}), cli::kUsage);
    EXPECT_EQ(run_cli({"no-such-command"}), cli::kUsage);
    testing::internal::GetCapturedStderr();
}

TEST(Cli, PipelineRuns) {
    auto& p = pipeline();
    EXPECT_EQ(p.synth_rc, 0);
    EXPECT_EQ(p.pre_rc, 0);
    EXPECT_EQ(p.adapt_rc, 0);
    EXPECT_TRUE(fs::exists(p.data / "manifest.json"));
    EXPECT_TRUE(fs::exists(p.root / "pre" / "run_manifest.json"));
    EXPECT_TRUE(fs::exists(p.root / "pre" / "config.txt"));
    EXPECT_TRUE(fs::exists(p.adapters));

    const auto layout = p.root / "layout.json";
    save_layout_file(layout, read_dataset(p.data).records[0].layout);
    EXPECT_EQ(run_cli({"sample", "--ckpt", p.adapters.string(), "--layout", layout.string(), "--steps", "3", "--out",
                   (p.root / "s").string()}),
              0);
    EXPECT_EQ(run_cli({"inpaint", "--ckpt", p.adapters.string(), "--image", (p.data / "images" / "0001.png").string(),
                   "--mask", (p.data / "masks" / "0001.png").string(), "--layout", layout.string(), "--steps", "3",
                   "--sampler", "ancestral", "--out", (p.root / "i").string()}),
              0);
    EXPECT_EQ(run_cli({"evaluate", "--ckpt", p.adapters.string(), "--data", p.data.string(), "--protocol", "synthesis",
                   "--test-records", "4", "--steps", "2", "--out", (p.root / "e").string()}),
              0);
    EXPECT_EQ(run_cli({"evaluate", "--ckpt", p.adapters.string(), "--data", p.data.string(), "--protocol", "completion",
                   "--test-records", "4", "--steps", "2", "--out", (p.root / "e2").string()}),
              0);
    const auto report = load_report(p.root / "e" / "report.json");
    EXPECT_TRUE(report.metrics.contains("centroid_f1"));
    EXPECT_TRUE(load_report(p.root / "e2" / "report.json").metrics.contains("l1_mask"));
    EXPECT_EQ(run_cli({"resume", "--ckpt", p.adapters.string(), "--steps", "3", "--out", (p.root / "r").string()}), 0);
    EXPECT_TRUE(fs::exists(p.root / "r" / "adapters.pt"));
}

TEST(Cli, ClassCountMismatchNamesBoth) {
    auto& p = pipeline();
    CentroidSet layout;
    layout.size = {32, 32};
    layout.num_classes = 5;
    layout.entries = {{4, 4, 4}};
    save_layout_file(p.root / "k5.json", layout);
    testing::internal::CaptureStderr();
    const int rc = run_cli({"sample", "--ckpt", p.adapters.string(), "--layout", (p.root / "k5.json").string(), "--out",
                        (p.root / "k5").string()});
    const auto err = testing::internal::GetCapturedStderr();
    EXPECT_NE(rc, 0);
    EXPECT_NE(err.find("K = 5"), std::string::npos) << err;
    EXPECT_NE(err.find("K = 3"), std::string::npos) << err;
}

TEST(Cli, EmptyMaskWithCompositeReturnsInput) {
    auto& p = pipeline();
    const auto image = p.data / "images" / "0002.png";
    write_png_gray(p.root / "zeros.png", torch::zeros({32, 32}));
    ASSERT_EQ(run_cli({"inpaint", "--ckpt", p.adapters.string(), "--image", image.string(), "--mask",
                   (p.root / "zeros.png").string(), "--composite", "--steps", "2", "--out", (p.root / "z").string()}),
              0);
    EXPECT_TRUE(torch::equal(read_png_rgb(p.root / "z" / "inpaint.png"), read_png_rgb(image)));
}

TEST(Cli, SeededSamplingIsReproducible) {
    auto& p = pipeline();
    const auto layout = p.root / "layout7.json";
    save_layout_file(layout, read_dataset(p.data).records[1].layout);
    for (const auto* dir : {"a7", "b7"})
        ASSERT_EQ(run_cli({"sample", "--ckpt", p.adapters.string(), "--layout", layout.string(), "--seed", "7", "--steps",
                       "3", "--out", (p.root / dir).string()}),
                  0);
    EXPECT_EQ(slurp(p.root / "a7" / "sample.png"), slurp(p.root / "b7" / "sample.png"));
    EXPECT_FALSE(slurp(p.root / "a7" / "sample.png").empty());
}

TEST(Cli, GridDimensions) {
    auto& p = pipeline();
    const auto layout = p.root / "layoutg.json";
    save_layout_file(layout, read_dataset(p.data).records[2].layout);
    ASSERT_EQ(run_cli({"sample", "--ckpt", p.adapters.string(), "--layout", layout.string(), "--steps", "2", "--out",
                   (p.root / "g").string()}),
              0);
    const auto grid = read_png_rgb(p.root / "g" / "grid.png");
    EXPECT_EQ(grid.size(1), 32);
    EXPECT_EQ(grid.size(2), 3 * 32 + 2 * 4);
}

TEST(Cli, BadConfigKeyIsValidationExit) {
    auto& p = pipeline();
    testing::internal::CaptureStderr();
    const int rc = run_cli({"pretrain", "--config", (p.root / "tiny.cfg").string(), "--dataset", p.data.string(), "--out",
                        (p.root / "bad").string(), "--set", "no.such.key=1"});
    const auto err = testing::internal::GetCapturedStderr();
    EXPECT_EQ(rc, cli::kValidation);
    EXPECT_NE(err.find("no.such.key"), std::string::npos) << err;
}
