#include <gtest/gtest.h>

#include "cdiff/backbone.hpp"
#include "cdiff/errors.hpp"
#include "test_util.hpp"

using namespace cdiff;

namespace {

ConditionTensor random_condition(int64_t b, int64_t k, int64_t size, TaskMode mode) {
    auto data = torch::zeros({b, 4 + k, size, size});
    if (mode == TaskMode::inpaint) data.slice(1, 0, 4).copy_(torch::rand({b, 4, size, size}).round());
    data.slice(1, 4).copy_((torch::rand({b, k, size, size}) > 0.9).to(torch::kFloat32));
    return {data, mode};
}

} // namespace

TEST(DiffusionModel, ZeroProjectionIdentity) {
    DiffusionModel model(test::tiny_spec(), 1);
    model->install_bank(AdapterBank::create(model->adapter_registry(), 4, 2));
    model->eval();
    torch::NoGradGuard ng;
    const auto z = torch::randn({2, 3, 32, 32});
    const auto t = torch::tensor({3, 900}, torch::kLong);
    for (auto mode : {TaskMode::inpaint, TaskMode::gen}) {
        model->bank().set_active(mode);
        const auto prompts = model->prompt_batch({0, 1}, mode);
        EXPECT_TRUE(torch::equal(model->denoise(z, t, random_condition(2, 3, 32, mode), prompts),
                                 model->base_denoise(z, t, prompts)));
    }
}

TEST(DiffusionModel, EvalForwardIsDeterministic) {
    DiffusionModel model(test::tiny_spec(), 1);
    model->eval();
    torch::NoGradGuard ng;
    {
        // Open the zero projections so the control branch contributes.
        for (auto& p : model->control->zero_projection_parameters()) p.normal_(0.0, 0.1);
    }
    const auto z = torch::randn({2, 3, 32, 32});
    const auto t = torch::tensor({3, 900}, torch::kLong);
    const auto c = random_condition(2, 3, 32, TaskMode::inpaint);
    const auto p = model->prompt_batch({0, 1}, TaskMode::inpaint);
    EXPECT_TRUE(torch::equal(model->denoise(z, t, c, p), model->denoise(z, t, c, p)));
    EXPECT_FALSE(torch::equal(model->denoise(z, t, c, p), model->base_denoise(z, t, p)));
}

TEST(DiffusionModel, OutputShapeSweep) {
    DiffusionModel model(test::tiny_spec(), 3);
    model->eval();
    torch::NoGradGuard ng;
    for (int64_t size : {32, 64})
        for (int64_t b : {1, 4}) {
            const auto z = torch::randn({b, 3, size, size});
            const auto t = torch::randint(0, 1000, {b}, torch::kLong);
            std::vector<int> labels(b, 1);
            const auto out = model->denoise(z, t, random_condition(b, 3, size, TaskMode::inpaint),
                                            model->prompt_batch(labels, TaskMode::inpaint));
            EXPECT_EQ(out.sizes(), z.sizes());
        }
}

TEST(DiffusionModel, RejectsModeMismatchAndBadShapes) {
    DiffusionModel model(test::tiny_spec(), 3);
    model->install_bank(AdapterBank::create(model->adapter_registry(), 2, 2));
    model->bank().set_active(TaskMode::inpaint);
    torch::NoGradGuard ng;
    const auto z = torch::randn({1, 3, 32, 32});
    const auto t = torch::tensor({5}, torch::kLong);
    const auto p = model->prompt_batch({0}, TaskMode::gen);
    EXPECT_THROW(model->denoise(z, t, random_condition(1, 3, 32, TaskMode::gen), p), ValidationError);
    EXPECT_THROW(model->denoise(z, t, random_condition(1, 5, 32, TaskMode::inpaint), p), ValidationError);
    EXPECT_THROW(model->denoise(torch::randn({1, 3, 30, 30}), t, random_condition(1, 3, 30, TaskMode::inpaint), p),
                 ValidationError);
}

TEST(PromptEmbedding, StableAndDistinct) {
    DiffusionModel model(test::tiny_spec(), 4);
    const auto a = model->embed_prompt(0, TaskMode::gen);
    const auto b = model->embed_prompt(0, TaskMode::gen);
    const auto c = model->embed_prompt(1, TaskMode::gen);
    EXPECT_TRUE(torch::equal(a.vector, b.vector));
    EXPECT_EQ(a.vector.size(0), test::tiny_spec().prompt_dim);
    EXPECT_FALSE(torch::equal(a.vector, c.vector));
    EXPECT_FALSE(torch::equal(a.vector, model->embed_prompt(0, TaskMode::inpaint).vector));
    EXPECT_THROW(model->embed_prompt(2, TaskMode::gen), ValidationError);
}

TEST(LayoutHead, SigmoidRangeAndZeroInput) {
    for (int64_t k : {3, 5}) {
        auto spec = test::tiny_spec();
        spec.num_classes = k;
        DiffusionModel model(spec, 5);
        torch::NoGradGuard ng;
        ControlFeatures zero;
        zero.levels = {torch::zeros({2, spec.control_width, 16, 16})};
        const auto pred = model->predict_layout(zero);
        EXPECT_EQ(pred.maps.size(1), k);
        EXPECT_EQ(pred.upsample_factor, 2);
        EXPECT_TRUE((pred.maps == 0.5).all().item<bool>());

        ControlFeatures rnd;
        rnd.levels = {torch::randn({2, spec.control_width, 16, 16}) * 10};
        const auto p2 = model->predict_layout(rnd).maps;
        EXPECT_GE(p2.min().item<float>(), 0.0f);
        EXPECT_LE(p2.max().item<float>(), 1.0f);
    }
}

TEST(DiffusionModel, RegistryCoversControlLinears) {
    DiffusionModel model(test::tiny_spec(), 6);
    const auto reg = model->adapter_registry();
    ASSERT_FALSE(reg.empty());
    bool has_mix = false, has_attn = false;
    for (const auto& l : reg) {
        has_mix = has_mix || l.id.find("mix") != std::string::npos;
        has_attn = has_attn || l.id.find("qkv") != std::string::npos;
    }
    EXPECT_TRUE(has_mix);
    EXPECT_TRUE(has_attn);
    auto wrong = AdapterBank::create({{"nope", 4, 4}}, 2, 1);
    EXPECT_THROW(model->install_bank(wrong), ConfigError);
}

TEST(ParameterHash, OrderAndValueSensitive) {
    auto a = torch::ones({3}), b = torch::zeros({2});
    EXPECT_EQ(parameter_hash({a, b}), parameter_hash({a.clone(), b.clone()}));
    EXPECT_NE(parameter_hash({a, b}), parameter_hash({b, a}));
    auto c = a.clone();
    c[1] = std::nextafter(1.0f, 2.0f);
    EXPECT_NE(parameter_hash({a}), parameter_hash({c}));
    EXPECT_EQ(parameter_count({a, b}), 5);
}
