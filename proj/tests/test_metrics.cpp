#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "cdiff/classifier.hpp"
#include "cdiff/errors.hpp"
#include "cdiff/evaluate.hpp"
#include "cdiff/metrics.hpp"
#include "cdiff/trainer.hpp"
#include "test_util.hpp"

using namespace cdiff;
namespace fs = std::filesystem;

namespace {

torch::Tensor covariance(const torch::Tensor& x) {
    const auto c = x - x.mean(0, true);
    return torch::matmul(c.t(), c) / static_cast<double>(x.size(0) - 1);
}

// Trace of (Sa Sb)^(1/2) from the general (non-symmetric) eigenvalues of Sa Sb.
double frechet_oracle(const torch::Tensor& a, const torch::Tensor& b) {
    const auto sa = covariance(a), sb = covariance(b);
    const auto ev = torch::linalg_eigvals(torch::matmul(sa, sb));
    const double tr_sqrt = torch::sqrt(torch::real(ev).clamp_min(0.0)).sum().item<double>();
    const double mean_term = (a.mean(0) - b.mean(0)).pow(2).sum().item<double>();
    return mean_term + (sa.trace() + sb.trace()).item<double>() - 2.0 * tr_sqrt;
}

// Denman-Beavers square root, a second independent route for symmetric inputs.
torch::Tensor sqrtm_db(const torch::Tensor& m) {
    auto y = m.clone(), z = torch::eye(m.size(0), m.options());
    for (int i = 0; i < 60; ++i) {
        const auto yn = 0.5 * (y + torch::linalg_inv(z));
        const auto zn = 0.5 * (z + torch::linalg_inv(y));
        y = yn;
        z = zn;
    }
    return y;
}

} // namespace

TEST(Frechet, IdenticalSetsAreZero) {
    torch::manual_seed(0);
    const auto a = torch::randn({50, 4}, torch::kFloat64);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
}

TEST(Frechet, OneDimensionalClosedForm) {
    const double s = 1.0 / std::sqrt(2.0);
    const auto a = torch::tensor({-s, s}, torch::kFloat64).view({2, 1});
    const auto b = a + 1.0;
    EXPECT_NEAR(frechet_distance(a, b), 1.0, 1e-12);
}

TEST(Frechet, MatchesEigenOracle) {
    torch::manual_seed(1);
    for (int i = 0; i < 10; ++i) {
        const auto a = torch::randn({40, 3}, torch::kFloat64);
        const auto mix = torch::randn({3, 3}, torch::kFloat64);
        const auto b = torch::matmul(torch::randn({60, 3}, torch::kFloat64), mix) + 0.5;
        EXPECT_NEAR(frechet_distance(a, b), frechet_oracle(a, b), 1e-5);

        const auto sa = covariance(a), sb = covariance(b);
        const auto ra = sqrtm_db(sa);
        const double db = (a.mean(0) - b.mean(0)).pow(2).sum().item<double>() +
                          (sa + sb - 2.0 * sqrtm_db(torch::matmul(torch::matmul(ra, sb), ra))).trace().item<double>();
        EXPECT_NEAR(frechet_distance(a, b), db, 1e-5);
    }
}

TEST(Frechet, SmallSetsStayFinite) {
    const auto a = torch::randn({3, 8}, torch::kFloat64), b = torch::randn({3, 8}, torch::kFloat64);
    const double d = frechet_distance(a, b);
    EXPECT_TRUE(std::isfinite(d));
    EXPECT_GE(d, 0.0);
    EXPECT_THROW(frechet_distance(torch::zeros({0, 3}), a), ValidationError);
}

TEST(MaskedFidelity, IdenticalImages) {
    const auto x = torch::rand({3, 16, 16});
    auto m = BinaryMask::zeros({16, 16});
    m.data.slice(0, 2, 12).slice(1, 3, 13).fill_(1);
    const auto f = masked_fidelity(x, x, m);
    EXPECT_EQ(f.l1, 0.0);
    EXPECT_EQ(f.psnr, kPsnrCap);
    ASSERT_TRUE(f.ssim.has_value());
    EXPECT_NEAR(*f.ssim, 1.0, 1e-9);
    EXPECT_EQ(f.box.top, 2);
    EXPECT_EQ(f.box.width, 10);
}

TEST(MaskedFidelity, UniformOffset) {
    const auto x = torch::rand({3, 16, 16}, torch::kFloat64) * 0.8;
    auto m = BinaryMask::zeros({16, 16});
    m.data.slice(0, 4, 12).slice(1, 4, 12).fill_(1);
    const auto y = x + 0.1 * m.data.to(torch::kFloat64).unsqueeze(0);
    const auto f = masked_fidelity(x, y, m);
    EXPECT_NEAR(f.l1, 0.1, 1e-7);
    EXPECT_NEAR(f.psnr, 20.0, 1e-5);
}

TEST(MaskedFidelity, OnePixelMaskHasNoSsim) {
    const auto x = torch::rand({3, 16, 16});
    auto m = BinaryMask::zeros({16, 16});
    m.data[5][5] = 1;
    const auto f = masked_fidelity(x, torch::zeros_like(x), m);
    EXPECT_FALSE(f.ssim.has_value());
    EXPECT_GT(f.l1, 0.0);
    EXPECT_THROW(masked_fidelity(x, x, BinaryMask::zeros({16, 16})), ValidationError);
}

TEST(CentroidRecovery, GroundTruthRenderIsPerfect) {
    const auto data = test::corpus(6, 3, 3, {64, 64});
    for (const auto& r : data.records) {
        const auto style = default_style(r.style, 3);
        const auto s = centroid_recovery(r.image, r.layout, style, style.max_radius());
        EXPECT_EQ(s.f1, 1.0) << "P " << s.precision << " R " << s.recall;
    }
}

TEST(CentroidRecovery, BlankImage) {
    CentroidSet empty;
    empty.size = {64, 64};
    const auto style = default_style(0, 3);
    const auto gt = sample_layout(2, 3, {64, 64}, 3.0, 8.0);
    const auto s = centroid_recovery(render_image(empty, style), gt, style, style.max_radius());
    EXPECT_EQ(s.detections, 0);
    EXPECT_EQ(s.recall, 0.0);
    EXPECT_EQ(s.precision, 1.0);
    EXPECT_EQ(s.f1, 0.0);
}

TEST(CentroidRecovery, OneCorrectOneSpurious) {
    const auto style = default_style(0, 3);
    CentroidSet drawn;
    drawn.size = {64, 64};
    drawn.entries = {{12, 12, 0}, {50, 50, 1}};
    CentroidSet gt = drawn;
    gt.entries = {{12, 12, 0}, {12, 40, 2}, {40, 12, 1}};
    const auto s = centroid_recovery(render_image(drawn, style), gt, style, style.max_radius());
    EXPECT_EQ(s.detections, 2);
    EXPECT_DOUBLE_EQ(s.precision, 0.5);
    EXPECT_DOUBLE_EQ(s.recall, 1.0 / 3.0);
}

TEST(MatchDetections, GreedySameClass) {
    CentroidSet gt;
    gt.size = {32, 32};
    gt.entries = {{10, 10, 0}, {20, 20, 1}};
    const auto s = match_detections({{11, 10, 0}, {20, 21, 0}, {10, 11, 0}}, gt, 3.0);
    EXPECT_EQ(s.matched, 1);
    EXPECT_EQ(s.detections, 3);
    EXPECT_EQ(s.ground_truth, 2);
    const auto pooled = pool_scores({s, match_detections({}, gt, 3.0)});
    EXPECT_EQ(pooled.matched, 1);
    EXPECT_EQ(pooled.ground_truth, 4);
}

TEST(Classification, PerfectPredictions) {
    const std::vector<int> y{0, 1, 1, 0, 1};
    const auto m = classification_metrics(y, y, 2);
    EXPECT_EQ(m.accuracy, 1.0);
    EXPECT_EQ(m.balanced_accuracy, 1.0);
    EXPECT_EQ(m.weighted_f1, 1.0);
    EXPECT_EQ(m.kappa, 1.0);
}

TEST(Classification, ShuffledLabelsNearChance) {
    std::mt19937 rng(4);
    std::vector<int> truth(500), pred(500);
    for (auto& v : truth) v = static_cast<int>(rng() % 2);
    for (auto& v : pred) v = static_cast<int>(rng() % 2);
    EXPECT_LE(std::abs(classification_metrics(truth, pred, 2).kappa), 0.1);
}

TEST(Classification, HandCounts) {
    // Confusion [[2, 1], [0, 1]].
    const auto m = classification_metrics({0, 0, 0, 1}, {0, 0, 1, 1}, 2);
    EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
    EXPECT_DOUBLE_EQ(m.balanced_accuracy, 0.5 * (2.0 / 3.0 + 1.0));
    EXPECT_NEAR(m.kappa, (0.75 - (0.75 * 0.5 + 0.25 * 0.5)) / (1 - 0.5), 1e-12);
}

TEST(StyleClassifier, RealHeldOutCeiling) {
    const auto data = test::corpus(300, 7, 3, {64, 64});
    std::vector<torch::Tensor> tr, te;
    std::vector<int> ytr, yte;
    for (size_t i = 0; i < data.records.size(); ++i) {
        (i < 200 ? tr : te).push_back(data.records[i].image);
        (i < 200 ? ytr : yte).push_back(data.records[i].style);
    }
    ClassifierOptions opts;
    const auto m = downstream_classification(torch::stack(tr), ytr, torch::stack(te), yte, 2, opts);
    EXPECT_GE(m.accuracy, 0.95);
    EXPECT_THROW(downstream_classification(torch::stack(tr), std::vector<int>(200, 0), torch::stack(te), yte, 2, opts),
                 ValidationError);
}

TEST(Evaluate, SelfComparison) {
    const auto data = test::corpus(24, 9, 3, {64, 64});
    EvalOptions opts;
    opts.test_records = 8;
    const auto r = evaluate_with(identity_producer(), data, Protocol::synthesis, opts);
    EXPECT_NEAR(r.metrics.at("frechet"), 0.0, 1e-6);
    EXPECT_EQ(r.metrics.at("centroid_f1"), 1.0);
    EXPECT_EQ(r.metrics.at("perceptual"), 0.0);
    EXPECT_TRUE(r.metadata.contains("feature_extractor"));
    const auto c = evaluate_with(identity_producer(), data, Protocol::completion, opts);
    EXPECT_EQ(c.metrics.at("l1_mask"), 0.0);
    EXPECT_EQ(c.metrics.at("psnr_mask"), kPsnrCap);
}

TEST(Evaluate, ReportRoundTrip) {
    MetricReport r;
    r.metrics = {{"frechet", 1.25}, {"centroid_f1", 0.5}};
    r.metadata = {{"protocol", "synthesis"}, {"seed", 3}};
    const auto path = fs::temp_directory_path() / "cdiff_test_report.json";
    save_report(r, path);
    EXPECT_EQ(load_report(path), r);
    fs::remove(path);
}

TEST(Evaluate, RejectsMismatchedClassCount) {
    const auto data3 = test::corpus(6, 1, 3);
    const auto data5 = test::corpus(6, 1, 5);
    auto cfg = test::tiny_config(Phase::pretrain, 0);
    const auto base = pretrain(cfg, data3);
    auto acfg = test::tiny_config(Phase::adapters, 0);
    const auto ck = train_adapters(acfg, base, data3);
    try {
        evaluate_run(ck, data5, Protocol::synthesis, EvalOptions{});
        FAIL();
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("K = 3"), std::string::npos) << msg;
        EXPECT_NE(msg.find("K = 5"), std::string::npos) << msg;
    }
    EXPECT_THROW(evaluate_run(base, data3, Protocol::synthesis, EvalOptions{}), ValidationError);
}
