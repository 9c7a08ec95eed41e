#include "cdiff/conditioning.hpp"

#include <cmath>
#include <sstream>

#include "cdiff/errors.hpp"

namespace cdiff {
namespace F = torch::nn::functional;

namespace {

torch::Tensor channel_slice(const torch::Tensor& data, int64_t begin, int64_t end) {
    return data.dim() == 4 ? data.slice(1, begin, end) : data.slice(0, begin, end);
}

// Separable blur of a [1, 1, H, W] tensor with the given 1-D taps.
torch::Tensor separable_blur(const torch::Tensor& x, const torch::Tensor& taps, bool replicate) {
    const int64_t r = (taps.size(0) - 1) / 2;
    auto kx = taps.view({1, 1, 1, -1}).to(x.dtype());
    auto ky = taps.view({1, 1, -1, 1}).to(x.dtype());
    auto mode = replicate ? F::PadFuncOptions::mode_t(torch::kReplicate)
                          : F::PadFuncOptions::mode_t(torch::kConstant);
    auto h = F::pad(x, F::PadFuncOptions({r, r, 0, 0}).mode(mode));
    h = F::conv2d(h, kx);
    h = F::pad(h, F::PadFuncOptions({0, 0, r, r}).mode(mode));
    return F::conv2d(h, ky);
}

void require_same_size(ImageSize a, ImageSize b, const char* what) {
    if (a != b) {
        std::ostringstream os;
        os << "build_condition: " << what << " is " << a.height << "x" << a.width
           << " but the centroid maps are " << b.height << "x" << b.width;
        throw ValidationError(os.str());
    }
}

} // namespace

torch::Tensor ConditionTensor::hint() const { return channel_slice(data, 0, 3); }
torch::Tensor ConditionTensor::mask() const { return channel_slice(data, 3, 4); }
torch::Tensor ConditionTensor::centroids() const {
    return channel_slice(data, kConditionPrefixChannels, data.size(batched() ? 1 : 0));
}

ConditionTensor stack_conditions(const std::vector<ConditionTensor>& items) {
    if (items.empty()) throw ValidationError("stack_conditions: empty batch");
    std::vector<torch::Tensor> parts;
    for (const auto& c : items) {
        if (c.mode != items.front().mode)
            throw ValidationError("stack_conditions: a batch must share one task mode");
        parts.push_back(c.batched() ? c.data : c.data.unsqueeze(0));
    }
    return {torch::cat(parts, 0), items.front().mode};
}

torch::Tensor gaussian_kernel_1d(double sigma, int64_t radius, bool normalize_sum) {
    auto d = torch::arange(-radius, radius + 1, torch::kFloat64);
    auto k = torch::exp(-(d * d) / (2.0 * sigma * sigma));
    return normalize_sum ? k / k.sum() : k;
}

CentroidMaps rasterize_centroids(const CentroidSet& layout, double radius, double smooth_sigma) {
    layout.validate();
    if (radius < 0.0) throw ValidationError("rasterize_centroids: radius must be >= 0");
    const int64_t h = layout.size.height, w = layout.size.width;
    auto maps = torch::zeros({layout.num_classes, h, w}, torch::kFloat32);
    auto acc = maps.accessor<float, 3>();
    const int reach = static_cast<int>(std::floor(radius));
    const double r2 = radius * radius;
    for (const auto& c : layout.entries) {
        for (int dy = -reach; dy <= reach; ++dy) {
            for (int dx = -reach; dx <= reach; ++dx) {
                const int x = c.x + dx, y = c.y + dy;
                if (x < 0 || y < 0 || x >= w || y >= h) continue;
                if (dx * dx + dy * dy <= r2) acc[c.class_id][y][x] = 1.0f;
            }
        }
    }
    if (smooth_sigma > 0.0) {
        auto taps = gaussian_kernel_1d(smooth_sigma, static_cast<int64_t>(std::ceil(3 * smooth_sigma)), false);
        auto blurred = separable_blur(maps.unsqueeze(1), taps, false).squeeze(1);
        maps = blurred.clamp(0.0, 1.0).to(torch::kFloat32);
    }
    return {maps};
}

ConditionTensor build_condition(const std::optional<Image>& image,
                                const std::optional<BinaryMask>& mask, const CentroidMaps& maps,
                                TaskMode mode) {
    if (!maps.data.defined() || maps.data.dim() != 3)
        throw ValidationError("build_condition: centroid maps must be [K, H, W]");
    const ImageSize size = maps.size();
    const auto opts = maps.data.options();
    if (mode == TaskMode::gen) {
        if (image || mask)
            throw ValidationError("build_condition: gen mode takes no image or mask");
        auto prefix = torch::zeros({kConditionPrefixChannels, size.height, size.width}, opts);
        return {torch::cat({prefix, maps.data}, 0), mode};
    }
    if (!image || !mask)
        throw ValidationError("build_condition: inpaint mode requires both an image and a mask");
    if (image->dim() != 3 || image->size(0) != 3)
        throw ValidationError("build_condition: image must be [3, H, W]");
    require_same_size({image->size(1), image->size(2)}, size, "image");
    require_same_size(mask->size(), size, "mask");
    const auto m = mask->data.to(opts.dtype());
    auto hint = image->to(opts.dtype()) * (1.0 - m);
    return {torch::cat({hint, m.unsqueeze(0), maps.data}, 0), mode};
}

SoftMask soften_mask(const BinaryMask& mask, double blur_sigma) {
    if (blur_sigma < 0.0) throw ValidationError("soften_mask: blur_sigma must be >= 0");
    const auto& m = mask.data;
    // Zero width, and constant masks (blur-invariant), pass through unchanged.
    if (blur_sigma == 0.0 || (m == m.flatten()[0]).all().item<bool>()) return {m.clone()};
    const auto r = static_cast<int64_t>(std::ceil(3.0 * blur_sigma));
    auto taps = gaussian_kernel_1d(blur_sigma, r, true);
    auto blurred = separable_blur(m.to(torch::kFloat64).view({1, 1, m.size(0), m.size(1)}), taps, true)
                       .view({m.size(0), m.size(1)});
    const double peak = blurred.max().item<double>();
    if (peak > 0.0) blurred = blurred / peak;
    return {blurred.clamp(0.0, 1.0).to(m.dtype())};
}

WeightMap mask_weight_map(const BinaryMask& mask, double lambda_mask) {
    if (lambda_mask < 1.0) throw ValidationError("mask_weight_map: lambda_mask must be >= 1");
    return {1.0 + (lambda_mask - 1.0) * mask.data, WeightKind::mask};
}

WeightMap centroid_weight_map(const CentroidMaps& maps, double beta, double sigma) {
    if (beta < 0.0) throw ValidationError("centroid_weight_map: beta must be >= 0");
    if (sigma <= 0.0) throw ValidationError("centroid_weight_map: sigma must be > 0");
    const ImageSize size = maps.size();
    auto total = maps.data.to(torch::kFloat64).sum(0).view({1, 1, size.height, size.width});
    auto taps = gaussian_kernel_1d(sigma, static_cast<int64_t>(std::ceil(4.0 * sigma)), false);
    auto splat = separable_blur(total, taps, false).view({size.height, size.width});
    auto w = 1.0 + beta * splat.clamp(0.0, 1.0);
    return {w.to(maps.data.dtype()), WeightKind::centroid};
}

} // namespace cdiff
