#include <filesystem>

#include <gtest/gtest.h>

#include "cdiff/errors.hpp"
#include "cdiff/lora.hpp"

using namespace cdiff;
namespace fs = std::filesystem;

TEST(InitAdapter, FreshDeltaIsZero) {
    const auto a = init_adapter(8, 12, 4, 3);
    EXPECT_EQ(a.A.sizes(), (std::vector<int64_t>{4, 12}));
    EXPECT_EQ(a.B.sizes(), (std::vector<int64_t>{8, 4}));
    EXPECT_EQ(adapter_delta(torch::randn({5, 12}), a).abs().max().item<float>(), 0.0f);
}

TEST(InitAdapter, SeedDeterminesA) {
    EXPECT_TRUE(torch::equal(init_adapter(8, 12, 4, 3).A, init_adapter(8, 12, 4, 3).A));
    EXPECT_FALSE(torch::equal(init_adapter(8, 12, 4, 3).A, init_adapter(8, 12, 4, 4).A));
}

TEST(InitAdapter, RankBounds) {
    EXPECT_NO_THROW(init_adapter(6, 9, 6, 0));
    EXPECT_THROW(init_adapter(6, 9, 7, 0), ValidationError);
    EXPECT_THROW(init_adapter(6, 9, 0, 0), ValidationError);
}

TEST(InitAdapter, AlphaSetsScale) {
    EXPECT_DOUBLE_EQ(init_adapter(8, 8, 4, 0).scale, 1.0);
    EXPECT_DOUBLE_EQ(init_adapter(8, 8, 4, 0, "x", 8.0).scale, 2.0);
}

TEST(EffectiveWeight, ZeroBIsExact) {
    const auto w = torch::randn({4, 6});
    EXPECT_TRUE(torch::equal(effective_weight(w, init_adapter(4, 6, 2, 1)), w));
}

TEST(EffectiveWeight, OneByOneHandCase) {
    LoraAdapter a;
    a.A = torch::full({1, 1}, 4.0f);
    a.B = torch::full({1, 1}, 3.0f);
    a.rank = 1;
    a.scale = 1.0;
    EXPECT_EQ(effective_weight(torch::full({1, 1}, 2.0f), a).item<float>(), 14.0f);
}

TEST(EffectiveWeight, MatchesDenseOracle) {
    torch::manual_seed(0);
    auto a = init_adapter(4, 6, 2, 7);
    a.B = torch::randn({4, 2});
    a.scale = 0.5;
    const auto w = torch::randn({4, 6});
    const auto got = effective_weight(w, a);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j) {
            double s = w[i][j].item<double>();
            for (int r = 0; r < 2; ++r) s += 0.5 * a.B[i][r].item<double>() * a.A[r][j].item<double>();
            EXPECT_NEAR(got[i][j].item<double>(), s, 1e-6);
        }
}

TEST(AdapterForward, FreshEqualsBase) {
    const auto w = torch::randn({5, 7});
    const auto x = torch::randn({3, 7});
    EXPECT_TRUE(torch::equal(adapter_forward(x, w, init_adapter(5, 7, 3, 2)), torch::matmul(x, w.t())));
}

TEST(AdapterForward, MergedVsFactored) {
    torch::manual_seed(1);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        auto a = init_adapter(10, 14, 3, i);
        a.B = torch::randn({10, 3});
        const auto w = torch::randn({10, 14});
        const auto x = torch::randn({2, 4, 14});
        const auto merged = torch::matmul(x, effective_weight(w, a).t());
        worst = std::max(worst, ((adapter_forward(x, w, a) - merged).norm() / merged.norm()).item<double>());
    }
    EXPECT_LE(worst, 1e-5);
}

TEST(AdapterForward, ZeroScaleIsBase) {
    auto a = init_adapter(5, 7, 3, 2);
    a.B = torch::randn({5, 3});
    a.scale = 0.0;
    const auto w = torch::randn({5, 7});
    const auto x = torch::randn({3, 7});
    EXPECT_TRUE(torch::allclose(adapter_forward(x, w, a), torch::matmul(x, w.t()), 0.0, 0.0));
}

TEST(AdapterForward, ShapeMismatchThrows) {
    EXPECT_THROW(adapter_forward(torch::randn({2, 7}), torch::randn({5, 6}), init_adapter(5, 7, 3, 2)),
                 ValidationError);
}

namespace {

std::vector<LayerShape> layers() { return {{"a", 8, 6}, {"b", 4, 8}, {"c", 6, 6}}; }

} // namespace

TEST(AdapterBank, RoutingFreezesOppositeMode) {
    auto bank = AdapterBank::create(layers(), 2, 5);
    bank.set_active(TaskMode::inpaint);
    for (const auto& p : bank.parameters(TaskMode::inpaint)) EXPECT_TRUE(p.requires_grad());
    for (const auto& p : bank.parameters(TaskMode::gen)) EXPECT_FALSE(p.requires_grad());

    // One optimizer step through the active adapters leaves the others intact.
    const auto gen_before = bank.parameters(TaskMode::gen);
    std::vector<torch::Tensor> snapshot;
    for (const auto& p : gen_before) snapshot.push_back(p.detach().clone());
    torch::optim::SGD opt(bank.all_parameters(), 0.1);
    const auto x = torch::randn({3, 6});
    auto loss = adapter_forward(x, torch::randn({8, 6}), *bank.active_adapter("a")).pow(2).sum() +
                adapter_forward(torch::randn({3, 8}), torch::randn({4, 8}), *bank.active_adapter("b")).sum();
    loss.backward();
    opt.step();
    for (size_t i = 0; i < snapshot.size(); ++i) EXPECT_TRUE(torch::equal(snapshot[i], gen_before[i]));

    bank.set_active(TaskMode::gen);
    for (const auto& p : bank.parameters(TaskMode::gen)) EXPECT_TRUE(p.requires_grad());
    for (const auto& p : bank.parameters(TaskMode::inpaint)) EXPECT_FALSE(p.requires_grad());
}

TEST(AdapterBank, SetActiveIsIdempotent) {
    auto bank = AdapterBank::create(layers(), 2, 5);
    bank.set_active(TaskMode::gen);
    const auto before = bank.clone();
    bank.set_active(TaskMode::gen);
    EXPECT_EQ(bank.active_mode(), TaskMode::gen);
    for (const auto& id : bank.layer_ids())
        for (auto m : {TaskMode::inpaint, TaskMode::gen}) {
            EXPECT_TRUE(torch::equal(bank.adapter(m, id).A, before.adapter(m, id).A));
            EXPECT_EQ(bank.adapter(m, id).A.requires_grad(), m == TaskMode::gen);
        }
}

TEST(AdapterBank, ModesAreIndependentUnlessShared) {
    const auto bank = AdapterBank::create(layers(), 2, 5);
    EXPECT_FALSE(torch::equal(bank.adapter(TaskMode::inpaint, "a").A, bank.adapter(TaskMode::gen, "a").A));
    auto shared = AdapterBank::create(layers(), 2, 5, true);
    EXPECT_TRUE(shared.adapter(TaskMode::inpaint, "a").A.is_same(shared.adapter(TaskMode::gen, "a").A));
    EXPECT_EQ(shared.all_parameters().size(), 6u);
    EXPECT_EQ(bank.all_parameters().size(), 12u);
}

TEST(AdapterBank, SaveLoadRoundTrip) {
    auto bank = AdapterBank::create(layers(), 3, 11, false, 6.0);
    {
        torch::NoGradGuard ng;
        for (auto& p : bank.all_parameters()) p.normal_();
    }
    const auto path = fs::temp_directory_path() / "cdiff_test_bank.pt";
    save_bank(bank, path);
    const auto back = load_bank(path);
    EXPECT_EQ(back.layer_shapes(), bank.layer_shapes());
    EXPECT_EQ(back.rank(), 3);
    EXPECT_DOUBLE_EQ(back.scale(), 2.0);
    for (const auto& id : bank.layer_ids())
        for (auto m : {TaskMode::inpaint, TaskMode::gen}) {
            EXPECT_TRUE(torch::equal(back.adapter(m, id).A, bank.adapter(m, id).A));
            EXPECT_TRUE(torch::equal(back.adapter(m, id).B, bank.adapter(m, id).B));
        }
    fs::remove(path);
}

TEST(AdapterBank, MissingLayerIsNamed) {
    const auto bank = AdapterBank::create(layers(), 2, 5);
    try {
        bank.check_against({{"a", 8, 6}, {"c", 6, 6}});
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos) << e.what();
    }
}

TEST(AdapterBank, EmptyBankRoundTrip) {
    const auto path = fs::temp_directory_path() / "cdiff_test_empty_bank.pt";
    save_bank(AdapterBank{}, path);
    EXPECT_TRUE(load_bank(path).empty());
    fs::remove(path);
}

TEST(AdapterBank, HighRankShapes) {
    // Shape-only check at the rank the original method used.
    const auto bank = AdapterBank::create({{"wide", 512, 256}}, 256, 1);
    EXPECT_EQ(bank.adapter(TaskMode::gen, "wide").A.sizes(), (std::vector<int64_t>{256, 256}));
    EXPECT_EQ(bank.adapter(TaskMode::gen, "wide").B.sizes(), (std::vector<int64_t>{512, 256}));
}
