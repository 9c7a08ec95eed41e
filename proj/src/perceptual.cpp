#include <cmath>

#include "cdiff/errors.hpp"
#include "cdiff/losses.hpp"
#include "cdiff/random.hpp"

namespace cdiff {
namespace F = torch::nn::functional;

namespace {
constexpr int64_t kStageWidths[] = {3, 8, 16, 32};
}

RandomConvPerceptual::RandomConvPerceptual(uint64_t seed) : seed_(seed) {
    auto gen = make_generator(seed);
    for (size_t i = 0; i + 1 < std::size(kStageWidths); ++i) {
        const int64_t in = kStageWidths[i], out = kStageWidths[i + 1];
        weights_.push_back(torch::randn({out, in, 3, 3}, gen, torch::kFloat32) *
                           std::sqrt(2.0 / static_cast<double>(in * 9)));
        biases_.push_back(torch::randn({out}, gen, torch::kFloat32) * 0.1);
    }
}

torch::Tensor RandomConvPerceptual::distance(const torch::Tensor& a, const torch::Tensor& b) const {
    if (!a.sizes().equals(b.sizes())) throw ValidationError("perceptual distance: shapes disagree");
    auto xa = a.dim() == 3 ? a.unsqueeze(0) : a;
    auto xb = b.dim() == 3 ? b.unsqueeze(0) : b;
    if (xa.dim() != 4 || xa.size(1) != 3) throw ValidationError("perceptual distance: expects RGB images");
    // Stage 0 compares pixels directly, so the distance vanishes only on
    // identical inputs.
    auto total = (xa - xb).pow(2).mean();
    auto fa = xa * 2.0 - 1.0, fb = xb * 2.0 - 1.0;
    auto unit = [](const torch::Tensor& f) { return f / torch::sqrt(f.pow(2).sum(1, true) + 1e-10); };
    for (size_t i = 0; i < weights_.size(); ++i) {
        if (i > 0 && fa.size(2) >= 2 && fa.size(3) >= 2) {
            fa = F::avg_pool2d(fa, F::AvgPool2dFuncOptions(2));
            fb = F::avg_pool2d(fb, F::AvgPool2dFuncOptions(2));
        }
        const auto w = weights_[i].to(fa.dtype()), bias = biases_[i].to(fa.dtype());
        fa = torch::relu(F::conv2d(fa, w, F::Conv2dFuncOptions().bias(bias).padding(1)));
        fb = torch::relu(F::conv2d(fb, w, F::Conv2dFuncOptions().bias(bias).padding(1)));
        total = total + (unit(fa) - unit(fb)).pow(2).sum(1).mean();
    }
    return total / static_cast<double>(weights_.size() + 1);
}

} // namespace cdiff
