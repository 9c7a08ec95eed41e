#include "cdiff/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <queue>
#include <random>
#include <sstream>

#include "cdiff/errors.hpp"

namespace cdiff {

void CentroidSet::validate() const {
    if (num_classes < 1) throw ValidationError("CentroidSet: num_classes must be >= 1");
    for (size_t i = 0; i < entries.size(); ++i) {
        const auto& c = entries[i];
        if (c.x < 0 || c.x >= size.width || c.y < 0 || c.y >= size.height) {
            std::ostringstream os;
            os << "centroid entry " << i << " at (" << c.x << ", " << c.y
               << ") lies outside the " << size.height << "x" << size.width << " image";
            throw ValidationError(os.str());
        }
        if (c.class_id < 0 || c.class_id >= num_classes) {
            std::ostringstream os;
            os << "centroid entry " << i << " has class_id " << c.class_id << " but K = "
               << num_classes;
            throw ValidationError(os.str());
        }
    }
}

BinaryMask BinaryMask::zeros(ImageSize size) {
    return {torch::zeros({size.height, size.width})};
}

BinaryMask BinaryMask::ones(ImageSize size) {
    return {torch::ones({size.height, size.width})};
}

double BinaryMask::coverage() const { return data.mean().item<double>(); }

void BinaryMask::validate() const {
    if (!data.defined() || data.dim() != 2) throw ValidationError("mask must be [H, W]");
    if (!torch::logical_or(data == 0, data == 1).all().item<bool>())
        throw ValidationError("mask values must be exactly 0 or 1");
}

std::string to_string(TaskMode mode) { return mode == TaskMode::inpaint ? "inpaint" : "gen"; }

TaskMode parse_task_mode(const std::string& text) {
    if (text == "inpaint") return TaskMode::inpaint;
    if (text == "gen") return TaskMode::gen;
    throw ValidationError("unknown task mode '" + text + "' (expected inpaint or gen)");
}

double StyleSpec::max_radius() const {
    return radius.empty() ? 0.0 : *std::max_element(radius.begin(), radius.end());
}

void StyleSpec::validate() const {
    if (radius.empty() || radius.size() != color.size())
        throw ValidationError("StyleSpec: radius and color lists must be non-empty and equal length");
    for (double r : radius)
        if (r < 1.0) throw ValidationError("StyleSpec: cell radius must be >= 1 pixel");
    auto in_unit = [](const Rgb& c) {
        return std::all_of(c.begin(), c.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
    };
    if (!in_unit(background)) throw ValidationError("StyleSpec: background color outside [0, 1]");
    for (size_t i = 0; i < color.size(); ++i) {
        if (!in_unit(color[i])) throw ValidationError("StyleSpec: class color outside [0, 1]");
        for (size_t j = i + 1; j < color.size(); ++j) {
            double d = 0.0;
            for (int ch = 0; ch < 3; ++ch) d = std::max(d, std::abs(color[i][ch] - color[j][ch]));
            if (d < 0.2) {
                std::ostringstream os;
                os << "StyleSpec: class colors " << i << " and " << j
                   << " are not distinguishable (max channel distance " << d << " < 0.2)";
                throw ValidationError(os.str());
            }
        }
    }
}

namespace {

// Palettes hold enough entries for K <= 6. Every color sits at least 0.2
// (L-inf) from its siblings and at least 0.3 from the style background.
const std::vector<Rgb> kPaletteA = {
    {0.30, 0.12, 0.50}, {0.85, 0.20, 0.35}, {0.10, 0.45, 0.75},
    {0.55, 0.60, 0.10}, {0.05, 0.05, 0.20}, {0.95, 0.55, 0.05}};
const std::vector<Rgb> kPaletteB = {
    {0.15, 0.35, 0.20}, {0.60, 0.10, 0.10}, {0.20, 0.20, 0.65},
    {0.55, 0.35, 0.70}, {0.05, 0.60, 0.55}, {0.95, 0.90, 0.20}};

} // namespace

StyleSpec default_style(int style_label, int num_classes, uint64_t seed) {
    if (num_classes < 1 || num_classes > static_cast<int>(kPaletteA.size()))
        throw ValidationError("default_style supports 1 <= K <= 6");
    StyleSpec s;
    s.seed = seed;
    const bool alt = (style_label % 2) == 1;
    const auto& palette = alt ? kPaletteB : kPaletteA;
    s.color.assign(palette.begin(), palette.begin() + num_classes);
    s.radius.assign(num_classes, alt ? 2.5 : 3.0);
    s.background = alt ? Rgb{0.93, 0.88, 0.62} : Rgb{0.93, 0.72, 0.85};
    s.density = alt ? 5.0 : 3.5;
    s.min_dist = 2.0 * s.max_radius() + 1.0;
    s.noise_scale = alt ? 6.0 : 10.0;
    return s;
}

std::string to_string(MaskKind kind) {
    switch (kind) {
    case MaskKind::rectangle: return "rectangle";
    case MaskKind::irregular_blob: return "irregular-blob";
    case MaskKind::free_stroke: return "free-stroke";
    }
    return "rectangle";
}

MaskKind parse_mask_kind(const std::string& text) {
    if (text == "rectangle") return MaskKind::rectangle;
    if (text == "irregular-blob") return MaskKind::irregular_blob;
    if (text == "free-stroke") return MaskKind::free_stroke;
    throw ValidationError("unknown mask kind '" + text + "'");
}

CentroidSet sample_layout(uint64_t seed, int num_classes, ImageSize size, double density,
                          double min_dist) {
    if (density <= 0.0) throw ValidationError("sample_layout: density must be > 0");
    if (min_dist < 0.0) throw ValidationError("sample_layout: min_dist must be >= 0");
    if (num_classes < 1) throw ValidationError("sample_layout: K must be >= 1");
    if (size.height < 1 || size.width < 1) throw ValidationError("sample_layout: empty image");

    std::mt19937_64 rng(seed);
    const double expected = density * static_cast<double>(size.height * size.width) / 1000.0;
    std::uniform_real_distribution<double> jitter(-0.1, 0.1);
    const auto count = static_cast<int64_t>(std::llround(expected * (1.0 + jitter(rng))));

    CentroidSet out;
    out.size = size;
    out.num_classes = num_classes;
    if (count <= 0) return out;

    std::uniform_int_distribution<int> ux(0, static_cast<int>(size.width) - 1);
    std::uniform_int_distribution<int> uy(0, static_cast<int>(size.height) - 1);
    std::uniform_int_distribution<int> uclass(0, num_classes - 1);
    const double min_d2 = min_dist * min_dist;
    const int64_t budget = 2000 * count;
    int64_t attempts = 0;
    while (static_cast<int64_t>(out.entries.size()) < count) {
        if (++attempts > budget) {
            std::ostringstream os;
            os << "infeasible density: placed " << out.entries.size() << " of " << count
               << " cells with min_dist " << min_dist << " on " << size.height << "x"
               << size.width;
            throw InfeasibleDensity(os.str());
        }
        const int x = ux(rng), y = uy(rng);
        const bool clear = std::all_of(out.entries.begin(), out.entries.end(), [&](const Centroid& c) {
            const double dx = c.x - x, dy = c.y - y;
            return dx * dx + dy * dy >= min_d2;
        });
        if (!clear) continue;
        const int idx = static_cast<int>(out.entries.size());
        out.entries.push_back({x, y, idx < num_classes ? idx : uclass(rng)});
    }
    // Class order should not correlate with placement order.
    std::vector<int> classes;
    for (const auto& c : out.entries) classes.push_back(c.class_id);
    std::shuffle(classes.begin(), classes.end(), rng);
    for (size_t i = 0; i < classes.size(); ++i) out.entries[i].class_id = classes[i];
    return out;
}

namespace {

double smoothstep(double e0, double e1, double v) {
    const double t = std::clamp((v - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

// Bilinear value noise on a lattice spaced `scale` pixels, values in [-1, 1].
std::vector<double> value_noise(std::mt19937_64& rng, int64_t h, int64_t w, double scale) {
    const int64_t gh = static_cast<int64_t>(std::ceil(h / scale)) + 2;
    const int64_t gw = static_cast<int64_t>(std::ceil(w / scale)) + 2;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> grid(gh * gw);
    for (auto& g : grid) g = u(rng);
    std::vector<double> out(h * w);
    for (int64_t y = 0; y < h; ++y) {
        const double fy = y / scale;
        const auto y0 = static_cast<int64_t>(fy);
        const double ty = smoothstep(0.0, 1.0, fy - y0);
        for (int64_t x = 0; x < w; ++x) {
            const double fx = x / scale;
            const auto x0 = static_cast<int64_t>(fx);
            const double tx = smoothstep(0.0, 1.0, fx - x0);
            const double a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
            const double c = grid[(y0 + 1) * gw + x0], d = grid[(y0 + 1) * gw + x0 + 1];
            out[y * w + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
        }
    }
    return out;
}

} // namespace

Image render_image(const CentroidSet& layout, const StyleSpec& style) {
    layout.validate();
    style.validate();
    if (style.num_classes() < layout.num_classes)
        throw ValidationError("render_image: style defines fewer classes than the layout");

    const int64_t h = layout.size.height, w = layout.size.width;
    std::mt19937_64 rng(style.seed ^ 0x9e3779b97f4a7c15ULL);
    const auto noise = value_noise(rng, h, w, style.noise_scale);
    const auto grain = value_noise(rng, h, w, std::max(1.5, style.noise_scale / 4.0));

    std::vector<double> rgb(3 * h * w);
    for (int64_t i = 0; i < h * w; ++i) {
        const double n = style.noise_amplitude * (0.7 * noise[i] + 0.3 * grain[i]);
        for (int ch = 0; ch < 3; ++ch) rgb[ch * h * w + i] = style.background[ch] + n;
    }

    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    for (const auto& cell : layout.entries) {
        const double r = style.radius[cell.class_id];
        const double ra = r * (1.0 + style.shape_jitter * u(rng));
        const double rb = r * (1.0 + style.shape_jitter * u(rng));
        const double theta = angle(rng);
        Rgb color = style.color[cell.class_id];
        for (auto& c : color) c = std::clamp(c + style.color_jitter * u(rng), 0.0, 1.0);
        const double ct = std::cos(theta), st = std::sin(theta);
        const int reach = static_cast<int>(std::ceil(std::max(ra, rb) * 1.2)) + 1;
        for (int dy = -reach; dy <= reach; ++dy) {
            const int y = cell.y + dy;
            if (y < 0 || y >= h) continue;
            for (int dx = -reach; dx <= reach; ++dx) {
                const int x = cell.x + dx;
                if (x < 0 || x >= w) continue;
                const double px = ct * dx + st * dy, py = -st * dx + ct * dy;
                const double rho = std::sqrt((px * px) / (ra * ra) + (py * py) / (rb * rb));
                // Solid core, feathered rim out to 1.15 of the semi-axes.
                const double alpha = 1.0 - smoothstep(0.55, 1.15, rho);
                if (alpha <= 0.0) continue;
                const int64_t i = static_cast<int64_t>(y) * w + x;
                for (int ch = 0; ch < 3; ++ch) {
                    auto& v = rgb[ch * h * w + i];
                    v = (1.0 - alpha) * v + alpha * color[ch];
                }
            }
        }
    }

    auto out = torch::empty({3, h, w}, torch::kFloat32);
    auto acc = out.accessor<float, 3>();
    for (int ch = 0; ch < 3; ++ch)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                acc[ch][y][x] = static_cast<float>(std::clamp(rgb[ch * h * w + y * w + x], 0.0, 1.0));
    return out;
}

namespace {

using Plane = std::vector<uint8_t>;

void stamp_disk(Plane& plane, ImageSize size, double cx, double cy, double radius) {
    const int r = static_cast<int>(std::ceil(radius));
    const int ix = static_cast<int>(std::lround(cx)), iy = static_cast<int>(std::lround(cy));
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const int x = ix + dx, y = iy + dy;
            if (x < 0 || y < 0 || x >= size.width || y >= size.height) continue;
            if (dx * dx + dy * dy <= radius * radius) plane[y * size.width + x] = 1;
        }
}

double plane_coverage(const Plane& plane) {
    return static_cast<double>(std::count(plane.begin(), plane.end(), 1)) /
           static_cast<double>(plane.size());
}

Plane rectangle_mask(std::mt19937_64& rng, ImageSize size, double target) {
    std::uniform_real_distribution<double> aspect_d(std::log(0.5), std::log(2.0));
    const double area = target * static_cast<double>(size.height * size.width);
    const double aspect = std::exp(aspect_d(rng));
    auto rw = static_cast<int64_t>(std::lround(std::sqrt(area * aspect)));
    rw = std::clamp<int64_t>(rw, 1, size.width);
    auto rh = static_cast<int64_t>(std::lround(area / static_cast<double>(rw)));
    rh = std::clamp<int64_t>(rh, 1, size.height);
    std::uniform_int_distribution<int64_t> top(0, size.height - rh), left(0, size.width - rw);
    const int64_t y0 = top(rng), x0 = left(rng);
    Plane p(size.height * size.width, 0);
    for (int64_t y = y0; y < y0 + rh; ++y)
        for (int64_t x = x0; x < x0 + rw; ++x) p[y * size.width + x] = 1;
    return p;
}

// Union of disks whose centers lie inside the current blob, so the result is
// 4-connected by construction.
Plane blob_mask(std::mt19937_64& rng, ImageSize size, double target) {
    Plane p(size.height * size.width, 0);
    const double base_r = std::sqrt(target * size.height * size.width / std::numbers::pi) / 2.5;
    std::uniform_real_distribution<double> ur(0.5 * base_r, 1.0 * base_r);
    std::uniform_real_distribution<double> cy(size.height * 0.25, size.height * 0.75);
    std::uniform_real_distribution<double> cx(size.width * 0.25, size.width * 0.75);
    stamp_disk(p, size, cx(rng), cy(rng), std::max(1.0, ur(rng)));
    std::vector<int64_t> members;
    while (plane_coverage(p) < target) {
        members.clear();
        for (int64_t i = 0; i < static_cast<int64_t>(p.size()); ++i)
            if (p[i]) members.push_back(i);
        std::uniform_int_distribution<size_t> pick(0, members.size() - 1);
        const int64_t at = members[pick(rng)];
        stamp_disk(p, size, static_cast<double>(at % size.width),
                   static_cast<double>(at / size.width), std::max(1.0, ur(rng)));
    }
    return p;
}

// Random walk with a round brush; successive stamps overlap.
Plane stroke_mask(std::mt19937_64& rng, ImageSize size, double target) {
    Plane p(size.height * size.width, 0);
    const double thickness = std::max(1.5, std::min(size.height, size.width) / 14.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> turn(0.0, 0.35);
    double x = size.width * (0.2 + 0.6 * u01(rng));
    double y = size.height * (0.2 + 0.6 * u01(rng));
    double heading = 2.0 * std::numbers::pi * u01(rng);
    stamp_disk(p, size, x, y, thickness);
    int64_t guard = 0;
    while (plane_coverage(p) < target && ++guard < 200000) {
        heading += turn(rng);
        double nx = x + std::cos(heading), ny = y + std::sin(heading);
        if (nx < 0 || nx > size.width - 1 || ny < 0 || ny > size.height - 1) {
            heading += std::numbers::pi;
            nx = std::clamp(nx, 0.0, static_cast<double>(size.width - 1));
            ny = std::clamp(ny, 0.0, static_cast<double>(size.height - 1));
        }
        x = nx;
        y = ny;
        stamp_disk(p, size, x, y, thickness);
    }
    return p;
}

} // namespace

BinaryMask sample_mask(const MaskSpec& spec, ImageSize size) {
    if (!(spec.target_coverage > 0.0 && spec.target_coverage < 1.0))
        throw ValidationError("sample_mask: target_coverage must lie in (0, 1)");
    constexpr int kAttempts = 64;
    std::mt19937_64 rng(spec.seed);
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        Plane p;
        switch (spec.kind) {
        case MaskKind::rectangle: p = rectangle_mask(rng, size, spec.target_coverage); break;
        case MaskKind::irregular_blob: p = blob_mask(rng, size, spec.target_coverage); break;
        case MaskKind::free_stroke: p = stroke_mask(rng, size, spec.target_coverage); break;
        }
        if (std::abs(plane_coverage(p) - spec.target_coverage) > 0.1) continue;
        auto t = torch::empty({size.height, size.width}, torch::kFloat32);
        auto acc = t.accessor<float, 2>();
        for (int64_t y = 0; y < size.height; ++y)
            for (int64_t x = 0; x < size.width; ++x) acc[y][x] = p[y * size.width + x];
        return {t};
    }
    std::ostringstream os;
    os << "coverage unreachable: " << to_string(spec.kind) << " mask with target "
       << spec.target_coverage << " on " << size.height << "x" << size.width;
    throw CoverageUnreachable(os.str());
}

Image quantize_8bit(const Image& image) {
    return torch::round(image.clamp(0.0, 1.0) * 255.0) / 255.0;
}

} // namespace cdiff
