#include <gtest/gtest.h>

#include "cdiff/errors.hpp"
#include "cdiff/losses.hpp"

using namespace cdiff;

namespace {

const auto f64 = torch::kFloat64;

// Computed once with the seed-0 metric on golden_pair().
constexpr double kPerceptualGolden = 0.76432323455810547;

double mse_oracle(const torch::Tensor& a, const torch::Tensor& b) {
    auto x = a.contiguous().view({-1}), y = b.contiguous().view({-1});
    double s = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double d = x[i].item<double>() - y[i].item<double>();
        s += d * d;
    }
    return s / static_cast<double>(x.numel());
}

// Two image fixtures for the perceptual golden value.
std::pair<torch::Tensor, torch::Tensor> golden_pair() {
    auto ramp = torch::linspace(0.0, 1.0, 16, torch::kFloat32);
    auto a = torch::stack({ramp.view({1, 16}).expand({16, 16}), ramp.view({16, 1}).expand({16, 16}),
                           torch::full({16, 16}, 0.5f)});
    auto b = a.flip({2}).clone();
    b[2].fill_(0.25f);
    return {a.contiguous(), b};
}

} // namespace

TEST(LossEps, ZeroWhenExact) {
    const auto e = torch::randn({2, 3, 4, 4});
    EXPECT_EQ(loss_eps_inpaint(e, e, torch::ones({2, 4, 4}), torch::ones({2})).item<float>(), 0.0f);
    EXPECT_EQ(loss_eps_gen(e, e, torch::ones({2, 4, 4}), torch::ones({2})).item<float>(), 0.0f);
}

TEST(LossEps, TwoElementHandCase) {
    const auto eps = torch::tensor({1.0, -1.0}, f64).view({1, 1, 1, 2});
    const auto hat = torch::zeros({1, 1, 1, 2}, f64);
    const auto w = torch::tensor({1.0, 3.0}, f64).view({1, 1, 2});
    EXPECT_DOUBLE_EQ(loss_eps_inpaint(eps, hat, w, torch::ones({1}, f64)).item<double>(), 5.0);
}

TEST(LossEps, UnitWeightsAreMse) {
    torch::manual_seed(0);
    const auto a = torch::randn({2, 3, 5, 5}, f64), b = torch::randn({2, 3, 5, 5}, f64);
    EXPECT_NEAR(loss_eps_inpaint(a, b, torch::ones({2, 5, 5}, f64), torch::ones({2}, f64)).item<double>(),
                mse_oracle(a, b), 1e-7);
    EXPECT_NEAR(loss_eps_gen(a, b, torch::ones({2, 5, 5}, f64), torch::ones({2}, f64)).item<double>(),
                mse_oracle(a, b), 1e-7);
}

TEST(LossEps, DoublingWeightsQuadruples) {
    torch::manual_seed(1);
    const auto a = torch::randn({2, 3, 5, 5}, f64), b = torch::randn({2, 3, 5, 5}, f64);
    const auto w = 1.0 + torch::rand({2, 5, 5}, f64);
    const auto s = torch::rand({2}, f64);
    const double l1 = loss_eps_gen(a, b, w, s).item<double>();
    const double l2 = loss_eps_gen(a, b, 2.0 * w, s).item<double>();
    EXPECT_NEAR(l2 / l1, 4.0, 1e-6);
}

TEST(LossEps, ShapeMismatchThrows) {
    EXPECT_THROW(loss_eps_inpaint(torch::zeros({1, 3, 4, 4}), torch::zeros({1, 3, 4, 5}), torch::ones({1, 4, 4}),
                                  torch::ones({1})),
                 ValidationError);
}

TEST(LossImg, ZeroWhenExact) {
    RandomConvPerceptual p(0);
    HyperParams hp;
    const auto x = torch::rand({1, 3, 16, 16});
    for (int64_t step : {0, 100})
        EXPECT_EQ(loss_img(x, x, torch::rand({1, 16, 16}), p, hp, step).item<float>(), 0.0f);
}

TEST(LossImg, ZeroWeightsGiveZero) {
    RandomConvPerceptual p(0);
    HyperParams hp;
    hp.lambda_l1 = 0.0;
    hp.lambda_lpips = 0.0;
    EXPECT_EQ(loss_img(torch::rand({1, 3, 16, 16}), torch::rand({1, 3, 16, 16}), torch::ones({1, 16, 16}), p, hp, 5)
                  .item<float>(),
              0.0f);
}

TEST(LossImg, WarmupDropsPerceptualTerm) {
    RandomConvPerceptual p(0);
    HyperParams hp;
    hp.lambda_l1 = 1.5;
    hp.lambda_lpips = 0.7;
    hp.warmup_steps = 10;
    torch::manual_seed(2);
    const auto x0 = torch::rand({2, 3, 16, 16}, f64), x = torch::rand({2, 3, 16, 16}, f64);
    const auto m = torch::rand({2, 16, 16}, f64);
    double l1 = 0.0;
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t i = 0; i < 16; ++i)
                for (int64_t j = 0; j < 16; ++j)
                    l1 += std::abs(x0[b][c][i][j].item<double>() - x[b][c][i][j].item<double>()) *
                          m[b][i][j].item<double>();
    l1 /= 2.0 * 3 * 16 * 16;
    const double perc = p.distance(x0, x).item<double>();
    ASSERT_GT(perc, 0.0);
    EXPECT_NEAR(loss_img(x0, x, m, p, hp, 9).item<double>(), 1.5 * l1, 1e-9);
    EXPECT_NEAR(loss_img(x0, x, m, p, hp, 10).item<double>(), 1.5 * l1 + 0.7 * perc, 1e-9);
}

TEST(LossInter, Fixtures) {
    auto disjoint = torch::zeros({2, 3, 4, 4}, f64);
    disjoint[0][0][0][0] = 1;
    disjoint[0][1][3][3] = 1;
    disjoint[1][2][2] = 0.4;
    EXPECT_EQ(loss_inter(disjoint).item<double>(), 0.0);
    EXPECT_EQ(loss_inter(torch::ones({4, 6, 6}, f64)).item<double>(), 1.0);
    const auto k2 = torch::tensor({1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0}, f64).view({2, 2, 2});
    EXPECT_EQ(loss_inter(k2).item<double>(), 0.25);
    EXPECT_EQ(loss_inter(torch::ones({1, 4, 4})).item<float>(), 0.0f);
}

TEST(LossInter, BatchAverages) {
    const auto a = torch::rand({3, 4, 4}, f64), b = torch::rand({3, 4, 4}, f64);
    EXPECT_NEAR(loss_inter(torch::stack({a, b})).item<double>(),
                0.5 * (loss_inter(a).item<double>() + loss_inter(b).item<double>()), 1e-12);
}

namespace {

struct TotalsFixture : ::testing::Test {
    RandomConvPerceptual p{0};
    HyperParams hp;
    void SetUp() override {
        torch::manual_seed(3);
        hp.warmup_steps = 0;
    }
    GenLossInputs gen_inputs() const {
        GenLossInputs g;
        g.eps = torch::randn({2, 3, 8, 8}, f64);
        g.eps_hat = torch::randn({2, 3, 8, 8}, f64);
        g.w_cent = 1.0 + torch::rand({2, 8, 8}, f64);
        g.w_snr = torch::rand({2}, f64);
        g.x0_hat = torch::rand({2, 3, 8, 8}, f64);
        g.x = torch::rand({2, 3, 8, 8}, f64);
        g.c_hat = torch::rand({2, 3, 4, 4}, f64) * 0.8 + 0.1;
        g.layout_target = torch::rand({2, 3, 4, 4}, f64);
        return g;
    }
    InpaintLossInputs inpaint_inputs() const {
        InpaintLossInputs in;
        in.eps = torch::randn({2, 3, 8, 8}, f64);
        in.eps_hat = torch::randn({2, 3, 8, 8}, f64);
        in.w_mask = 1.0 + 2.0 * torch::rand({2, 8, 8}, f64);
        in.w_snr = torch::rand({2}, f64);
        in.x0_hat = torch::rand({2, 3, 8, 8}, f64);
        in.x = torch::rand({2, 3, 8, 8}, f64);
        in.m_soft = torch::rand({2, 8, 8}, f64);
        return in;
    }
};

} // namespace

TEST_F(TotalsFixture, SumOfComponents) {
    const auto in = inpaint_inputs();
    const auto li = total_inpaint_loss(in, p, hp, 1);
    const double eps = loss_eps_inpaint(in.eps, in.eps_hat, in.w_mask, in.w_snr).item<double>();
    const double l1 = ((in.x0_hat - in.x).abs() * in.m_soft.unsqueeze(1)).mean().item<double>();
    const double perc = p.distance(in.x0_hat, in.x).item<double>();
    EXPECT_NEAR(li.total.item<double>(), eps + hp.lambda_l1 * l1 + hp.lambda_lpips * perc, 1e-7);

    const auto g = gen_inputs();
    const auto lg = total_gen_loss(g, p, hp, 1);
    const double geps = loss_eps_gen(g.eps, g.eps_hat, g.w_cent, g.w_snr).item<double>();
    const double inter = loss_inter(g.c_hat).item<double>();
    const double gperc = p.distance(g.x0_hat, g.x).item<double>();
    const double fit = layout_fit_loss(g.c_hat, g.layout_target).item<double>();
    EXPECT_NEAR(lg.total.item<double>(),
                geps + hp.w_inter * inter + hp.lambda_lpips_gen * gperc + hp.layout_fit_weight * fit, 1e-7);
}

TEST_F(TotalsFixture, ZeroComponentsGiveZero) {
    auto in = inpaint_inputs();
    in.eps_hat = in.eps;
    in.x0_hat = in.x;
    EXPECT_EQ(total_inpaint_loss(in, p, hp, 1).total.item<double>(), 0.0);
    auto g = gen_inputs();
    g.eps_hat = g.eps;
    g.x0_hat = g.x;
    g.c_hat = torch::zeros_like(g.c_hat);
    hp.layout_fit = false;
    EXPECT_EQ(total_gen_loss(g, p, hp, 1).total.item<double>(), 0.0);
}

TEST_F(TotalsFixture, InterWeightZeroIgnoresLayout) {
    hp.w_inter = 0.0;
    hp.layout_fit = false;
    auto g = gen_inputs();
    const double a = total_gen_loss(g, p, hp, 1).total.item<double>();
    g.c_hat = torch::rand_like(g.c_hat);
    EXPECT_EQ(total_gen_loss(g, p, hp, 1).total.item<double>(), a);
}

TEST(Perceptual, ZeroOnIdenticalAndSymmetric) {
    RandomConvPerceptual p(0);
    torch::manual_seed(4);
    for (int i = 0; i < 5; ++i) {
        const auto a = torch::rand({2, 3, 16, 16}, f64), b = torch::rand({2, 3, 16, 16}, f64);
        EXPECT_EQ(p.distance(a, a).item<double>(), 0.0);
        EXPECT_NEAR(p.distance(a, b).item<double>(), p.distance(b, a).item<double>(), 1e-7);
        EXPECT_GT(p.distance(a, b).item<double>(), 0.0);
    }
}

TEST(Perceptual, GoldenFixture) {
    RandomConvPerceptual p(0);
    const auto [a, b] = golden_pair();
    EXPECT_NEAR(p.distance(a, b).item<double>(), kPerceptualGolden, 1e-5);
}

TEST(Perceptual, SeedChangesWeights) {
    const auto [a, b] = golden_pair();
    EXPECT_NE(RandomConvPerceptual(0).distance(a, b).item<double>(),
              RandomConvPerceptual(1).distance(a, b).item<double>());
}

TEST(HyperParams, JsonRoundTripAndValidation) {
    HyperParams hp;
    hp.lambda_mask = 4.0;
    hp.masked_perceptual = true;
    EXPECT_EQ(hyperparams_from_json(to_json(hp)), hp);
    hp.gamma_snr = 0.0;
    EXPECT_THROW(hp.validate(), ValidationError);
}
