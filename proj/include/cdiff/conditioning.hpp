#pragma once

#include <optional>

#include <torch/torch.h>

#include "cdiff/types.hpp"

namespace cdiff {

// K-channel raster of a CentroidSet: float32 [K, H, W] in [0, 1].
struct CentroidMaps {
    torch::Tensor data;

    int num_classes() const { return static_cast<int>(data.size(0)); }
    ImageSize size() const { return {data.size(1), data.size(2)}; }
};

// Number of channels ahead of the centroid block: hint (3) + mask (1).
inline constexpr int64_t kConditionPrefixChannels = 4;

// Unified control input [hint(3), mask(1), C(K)]. data is [4+K, H, W] or,
// when batched, [B, 4+K, H, W]; a batch always shares one mode.
struct ConditionTensor {
    torch::Tensor data;
    TaskMode mode = TaskMode::gen;

    bool batched() const { return data.dim() == 4; }
    int64_t num_classes() const { return data.size(batched() ? 1 : 0) - kConditionPrefixChannels; }
    torch::Tensor hint() const;
    torch::Tensor mask() const;
    torch::Tensor centroids() const;
};

// Stacks per-sample conditions of one mode into a batch.
ConditionTensor stack_conditions(const std::vector<ConditionTensor>& items);

enum class WeightKind { mask, centroid };

// float32 [H, W], every value >= 1.
struct WeightMap {
    torch::Tensor data;
    WeightKind kind = WeightKind::mask;
};

// float32 [H, W] in [0, 1].
struct SoftMask {
    torch::Tensor data;
};

// Filled disks of value 1 per centroid in its class channel. smooth_sigma > 0
// additionally blurs each channel with a peak-normalized Gaussian and clamps
// to [0, 1]; the default keeps binary disks.
CentroidMaps rasterize_centroids(const CentroidSet& layout, double radius,
                                 double smooth_sigma = 0.0);

// inpaint -> [x * (1 - m), m, C]; gen -> [0, 0, C]. Throws ValidationError on
// missing inputs for inpaint or any size disagreement.
ConditionTensor build_condition(const std::optional<Image>& image,
                                const std::optional<BinaryMask>& mask,
                                const CentroidMaps& maps, TaskMode mode);

SoftMask soften_mask(const BinaryMask& mask, double blur_sigma);

// w = 1 + (lambda_mask - 1) * m.
WeightMap mask_weight_map(const BinaryMask& mask, double lambda_mask);

// w = 1 + beta * clamp(sum_k G_sigma * C_k, 0, 1), G_sigma peak-normalized.
WeightMap centroid_weight_map(const CentroidMaps& maps, double beta, double sigma);

// Discrete Gaussian taps exp(-d^2 / 2 sigma^2) for d in [-radius, radius].
// normalize_sum selects sum-to-one; otherwise the center tap is 1.
torch::Tensor gaussian_kernel_1d(double sigma, int64_t radius, bool normalize_sum);

} // namespace cdiff
