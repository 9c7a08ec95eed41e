#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cdiff/types.hpp"

namespace cdiff {

using Rgb = std::array<double, 3>;

// Appearance parameters for the procedural renderer. One StyleSpec per
// "style label" (the stand-in for a cancer type).
struct StyleSpec {
    std::vector<double> radius;   // per class, pixels
    std::vector<Rgb> color;       // per class
    Rgb background{0.92, 0.78, 0.86};
    double noise_scale = 8.0;     // pixels between value-noise lattice points
    double noise_amplitude = 0.04;
    double color_jitter = 0.04;   // per-cell uniform color offset bound
    double shape_jitter = 0.15;   // relative semi-axis perturbation bound
    double density = 4.0;         // cells per 1000 pixels
    double min_dist = 7.0;
    uint64_t seed = 0;

    int num_classes() const { return static_cast<int>(radius.size()); }
    double max_radius() const;
    void validate() const;
};

// Default palettes. Style 0 and style 1 differ in palette, background and
// density so that a classifier can separate them.
StyleSpec default_style(int style_label, int num_classes, uint64_t seed = 0);

enum class MaskKind { rectangle, irregular_blob, free_stroke };

std::string to_string(MaskKind kind);
MaskKind parse_mask_kind(const std::string& text);

struct MaskSpec {
    MaskKind kind = MaskKind::rectangle;
    double target_coverage = 0.25;
    uint64_t seed = 0;
};

// Rejection-samples a layout with pairwise distance >= min_dist. The count is
// drawn within +-10% of density * H * W / 1000. Throws InfeasibleDensity when
// the attempt budget runs out.
CentroidSet sample_layout(uint64_t seed, int num_classes, ImageSize size, double density,
                          double min_dist);

Image render_image(const CentroidSet& layout, const StyleSpec& style);

// 1 marks missing pixels. Throws CoverageUnreachable if bounded resampling
// cannot land within +-0.1 of the target coverage.
BinaryMask sample_mask(const MaskSpec& spec, ImageSize size);

// Rounds an image onto the 8-bit grid used by the dataset files.
Image quantize_8bit(const Image& image);

} // namespace cdiff
