#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "cdiff/synthdata.hpp"
#include "cdiff/types.hpp"

namespace cdiff {

// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) between Gaussian
// fits of two feature sets [N, D]. Sets with N <= D get a diagonal
// shrinkage so the covariance stays full rank. Throws on empty sets.
double frechet_distance(const torch::Tensor& feats_a, const torch::Tensor& feats_b);

struct BoundingBox {
    int64_t top = 0, left = 0, height = 0, width = 0;
};

inline constexpr double kPsnrCap = 99.0;
inline constexpr int64_t kSsimWindow = 7;

struct MaskedFidelity {
    double l1 = 0.0;
    double psnr = kPsnrCap;
    std::optional<double> ssim; // empty when the box is smaller than the window
    BoundingBox box;
};

// L1 and PSNR over mask = 1 pixels (all channels, peak 1). SSIM uses a 7x7
// uniform window over the mask's bounding box. Throws on an empty mask.
MaskedFidelity masked_fidelity(const Image& x, const Image& y, const BinaryMask& mask);

// Mean windowed SSIM of two [3, H, W] images (valid windows only).
double ssim(const Image& x, const Image& y, int64_t window = kSsimWindow);

struct RecoveryScore {
    double precision = 1.0;
    double recall = 0.0;
    double f1 = 0.0;
    int64_t matched = 0;
    int64_t detections = 0;
    int64_t ground_truth = 0;
};

inline constexpr double kDetectionColorTolerance = 0.15;

// Per-class color matching: pixels within L-inf 0.15 of a class color form
// connected blobs whose weighted centers are the detections; detections of
// one class closer than half its radius are merged.
std::vector<Centroid> detect_cells(const Image& image, const StyleSpec& style);

// Greedy one-to-one matching of same-class pairs, nearest first, within
// radius.
RecoveryScore match_detections(const std::vector<Centroid>& detections,
                               const CentroidSet& layout, double radius);
RecoveryScore centroid_recovery(const Image& image, const CentroidSet& layout,
                                const StyleSpec& style, double radius);
// Micro-averaged score from summed counts.
RecoveryScore pool_scores(const std::vector<RecoveryScore>& scores);

struct ClassificationMetrics {
    double accuracy = 0.0;
    double balanced_accuracy = 0.0;
    double kappa = 0.0;
    double weighted_f1 = 0.0;
};

ClassificationMetrics classification_metrics(const std::vector<int>& truth,
                                             const std::vector<int>& predicted,
                                             int num_classes);

} // namespace cdiff
