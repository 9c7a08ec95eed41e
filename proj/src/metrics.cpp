#include "cdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "cdiff/errors.hpp"

namespace cdiff {
namespace F = torch::nn::functional;

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
    auto c = t.to(torch::kFloat64).contiguous();
    Eigen::MatrixXd m(c.size(0), c.size(1));
    auto acc = c.accessor<double, 2>();
    for (int64_t i = 0; i < c.size(0); ++i)
        for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = acc[i][j];
    return m;
}

// Unbiased covariance; N <= D gets a small ridge so the fit stays full rank.
Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mean) {
    const auto n = x.rows();
    const Eigen::MatrixXd centered = x.rowwise() - mean;
    Eigen::MatrixXd cov = n > 1 ? Eigen::MatrixXd(centered.transpose() * centered / static_cast<double>(n - 1))
                                : Eigen::MatrixXd::Zero(x.cols(), x.cols());
    if (n <= x.cols()) {
        const double ridge = 1e-6 * (1.0 + cov.trace() / static_cast<double>(x.cols()));
        cov.diagonal().array() += ridge;
    }
    return cov;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace

double frechet_distance(const torch::Tensor& feats_a, const torch::Tensor& feats_b) {
    if (feats_a.dim() != 2 || feats_b.dim() != 2) throw ValidationError("frechet_distance: features must be [N, D]");
    if (feats_a.size(0) == 0 || feats_b.size(0) == 0) throw ValidationError("frechet_distance: empty feature set");
    if (feats_a.size(1) != feats_b.size(1)) throw ValidationError("frechet_distance: feature dimensions differ");
    const auto a = to_eigen(feats_a), b = to_eigen(feats_b);
    const Eigen::RowVectorXd mu_a = a.colwise().mean(), mu_b = b.colwise().mean();
    const auto s_a = covariance(a, mu_a), s_b = covariance(b, mu_b);
    // tr (S_a S_b)^(1/2) = tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), the latter symmetric.
    const auto r = psd_sqrt(s_a);
    const auto inner = psd_sqrt(r * s_b * r);
    const double d = (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() - 2.0 * inner.trace();
    return std::max(d, 0.0);
}

double ssim(const Image& x, const Image& y, int64_t window) {
    if (!x.sizes().equals(y.sizes()) || x.dim() != 3) throw ValidationError("ssim: images must share a [C, H, W] shape");
    if (x.size(1) < window || x.size(2) < window) throw ValidationError("ssim: image smaller than the window");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    auto a = x.to(torch::kFloat64).unsqueeze(0), b = y.to(torch::kFloat64).unsqueeze(0);
    auto pool = [window](const torch::Tensor& t) {
        return F::avg_pool2d(t, F::AvgPool2dFuncOptions(window).stride(1));
    };
    auto mu_a = pool(a), mu_b = pool(b);
    auto var_a = pool(a * a) - mu_a * mu_a;
    auto var_b = pool(b * b) - mu_b * mu_b;
    auto cov = pool(a * b) - mu_a * mu_b;
    auto map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    return map.mean().item<double>();
}

MaskedFidelity masked_fidelity(const Image& x, const Image& y, const BinaryMask& mask) {
    if (!x.sizes().equals(y.sizes()) || x.dim() != 3) throw ValidationError("masked_fidelity: image shapes disagree");
    if (mask.size() != ImageSize{x.size(1), x.size(2)}) throw ValidationError("masked_fidelity: mask size disagrees");
    const auto m = mask.data > 0.5;
    const int64_t count = m.sum().item<int64_t>();
    if (count == 0) throw ValidationError("masked_fidelity: empty mask");
    auto diff = (x.to(torch::kFloat64) - y.to(torch::kFloat64)).masked_select(m.unsqueeze(0).expand_as(x));
    MaskedFidelity out;
    out.l1 = diff.abs().mean().item<double>();
    const double mse = (diff * diff).mean().item<double>();
    out.psnr = mse > 0.0 ? std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse)) : kPsnrCap;
    auto rows = m.any(1).nonzero().flatten(), cols = m.any(0).nonzero().flatten();
    out.box.top = rows.min().item<int64_t>();
    out.box.left = cols.min().item<int64_t>();
    out.box.height = rows.max().item<int64_t>() - out.box.top + 1;
    out.box.width = cols.max().item<int64_t>() - out.box.left + 1;
    if (out.box.height >= kSsimWindow && out.box.width >= kSsimWindow) {
        auto crop = [&](const Image& t) {
            return t.slice(1, out.box.top, out.box.top + out.box.height)
                .slice(2, out.box.left, out.box.left + out.box.width);
        };
        out.ssim = ssim(crop(x), crop(y));
    }
    return out;
}

std::vector<Centroid> detect_cells(const Image& image, const StyleSpec& style) {
    if (image.dim() != 3 || image.size(0) != 3) throw ValidationError("detect_cells: image must be [3, H, W]");
    const int64_t h = image.size(1), w = image.size(2);
    const int k = style.num_classes();
    auto img = image.to(torch::kFloat64).contiguous();
    auto acc = img.accessor<double, 3>();
    // Nearest class color per pixel (L-inf), kept only within tolerance.
    std::vector<int> label(h * w, -1);
    std::vector<double> weight(h * w, 0.0);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double best = kDetectionColorTolerance;
            for (int c = 0; c < k; ++c) {
                double d = 0.0;
                for (int ch = 0; ch < 3; ++ch) d = std::max(d, std::abs(acc[ch][y][x] - style.color[c][ch]));
                if (d <= best) {
                    best = d;
                    label[y * w + x] = c;
                }
            }
            if (label[y * w + x] >= 0) weight[y * w + x] = kDetectionColorTolerance - best + 1e-3;
        }
    }
    struct Blob {
        double cx, cy;
        int64_t area;
        int cls;
    };
    std::vector<Blob> blobs;
    std::vector<char> seen(h * w, 0);
    for (int64_t start = 0; start < h * w; ++start) {
        if (label[start] < 0 || seen[start]) continue;
        const int cls = label[start];
        double sx = 0, sy = 0, sw = 0;
        int64_t area = 0;
        std::deque<int64_t> queue{start};
        seen[start] = 1;
        while (!queue.empty()) {
            const int64_t p = queue.front();
            queue.pop_front();
            const int64_t py = p / w, px = p % w;
            sx += weight[p] * static_cast<double>(px);
            sy += weight[p] * static_cast<double>(py);
            sw += weight[p];
            ++area;
            const int64_t nbrs[4][2] = {{py - 1, px}, {py + 1, px}, {py, px - 1}, {py, px + 1}};
            for (const auto& n : nbrs) {
                if (n[0] < 0 || n[1] < 0 || n[0] >= h || n[1] >= w) continue;
                const int64_t q = n[0] * w + n[1];
                if (!seen[q] && label[q] == cls) {
                    seen[q] = 1;
                    queue.push_back(q);
                }
            }
        }
        const double r = style.radius[cls];
        const auto min_area = std::max<int64_t>(2, static_cast<int64_t>(std::lround(0.3 * M_PI * r * r)));
        if (area >= min_area) blobs.push_back({sx / sw, sy / sw, area, cls});
    }
    // Suppression: larger blobs first; drop same-class blobs within r / 2.
    std::stable_sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) { return a.area > b.area; });
    std::vector<Centroid> out;
    std::vector<Blob> kept;
    for (const auto& b : blobs) {
        const double r = style.radius[b.cls];
        const bool close = std::any_of(kept.begin(), kept.end(), [&](const Blob& o) {
            return o.cls == b.cls && std::hypot(o.cx - b.cx, o.cy - b.cy) < 0.5 * r;
        });
        if (close) continue;
        kept.push_back(b);
        out.push_back({static_cast<int>(std::lround(b.cx)), static_cast<int>(std::lround(b.cy)), b.cls});
    }
    return out;
}

namespace {

RecoveryScore finalize(RecoveryScore s) {
    s.precision = s.detections == 0 ? 1.0 : static_cast<double>(s.matched) / static_cast<double>(s.detections);
    s.recall = s.ground_truth == 0 ? (s.detections == 0 ? 1.0 : 0.0)
                                   : static_cast<double>(s.matched) / static_cast<double>(s.ground_truth);
    s.f1 = s.precision + s.recall > 0.0 && s.matched > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
                                                         : (s.ground_truth == 0 && s.detections == 0 ? 1.0 : 0.0);
    return s;
}

} // namespace

RecoveryScore match_detections(const std::vector<Centroid>& detections, const CentroidSet& layout, double radius) {
    struct Pair {
        double d;
        size_t det, gt;
    };
    std::vector<Pair> pairs;
    for (size_t i = 0; i < detections.size(); ++i) {
        for (size_t j = 0; j < layout.entries.size(); ++j) {
            const auto& a = detections[i];
            const auto& b = layout.entries[j];
            if (a.class_id != b.class_id) continue;
            const double d = std::hypot(a.x - b.x, a.y - b.y);
            if (d <= radius) pairs.push_back({d, i, j});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.d < b.d; });
    std::vector<char> used_det(detections.size(), 0), used_gt(layout.entries.size(), 0);
    RecoveryScore s;
    for (const auto& p : pairs) {
        if (used_det[p.det] || used_gt[p.gt]) continue;
        used_det[p.det] = used_gt[p.gt] = 1;
        ++s.matched;
    }
    s.detections = static_cast<int64_t>(detections.size());
    s.ground_truth = static_cast<int64_t>(layout.entries.size());
    return finalize(s);
}

RecoveryScore centroid_recovery(const Image& image, const CentroidSet& layout, const StyleSpec& style, double radius) {
    return match_detections(detect_cells(image, style), layout, radius);
}

RecoveryScore pool_scores(const std::vector<RecoveryScore>& scores) {
    RecoveryScore s;
    for (const auto& x : scores) {
        s.matched += x.matched;
        s.detections += x.detections;
        s.ground_truth += x.ground_truth;
    }
    return finalize(s);
}

ClassificationMetrics classification_metrics(const std::vector<int>& truth, const std::vector<int>& predicted,
                                             int num_classes) {
    if (truth.size() != predicted.size() || truth.empty())
        throw ValidationError("classification_metrics: label vectors must be non-empty and equally long");
    if (num_classes < 1) throw ValidationError("classification_metrics: num_classes must be >= 1");
    Eigen::MatrixXd cm = Eigen::MatrixXd::Zero(num_classes, num_classes);
    for (size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes)
            throw ValidationError("classification_metrics: label outside [0, num_classes)");
        cm(truth[i], predicted[i]) += 1.0;
    }
    const double n = static_cast<double>(truth.size());
    ClassificationMetrics out;
    out.accuracy = cm.trace() / n;
    const Eigen::VectorXd support = cm.rowwise().sum(), pred = cm.colwise().sum().transpose();
    double recall_sum = 0.0, f1_sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (support(c) == 0.0) continue;
        ++present;
        const double recall = cm(c, c) / support(c);
        const double precision = pred(c) > 0.0 ? cm(c, c) / pred(c) : 0.0;
        recall_sum += recall;
        const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        f1_sum += f1 * support(c);
    }
    out.balanced_accuracy = recall_sum / present;
    out.weighted_f1 = f1_sum / n;
    const double expected = support.dot(pred) / (n * n);
    out.kappa = expected < 1.0 ? (out.accuracy - expected) / (1.0 - expected) : 1.0;
    return out;
}

} // namespace cdiff
