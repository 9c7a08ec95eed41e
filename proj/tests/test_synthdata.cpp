#include <filesystem>
#include <queue>

#include <gtest/gtest.h>

#include "cdiff/dataset.hpp"
#include "cdiff/errors.hpp"
#include "cdiff/metrics.hpp"
#include "cdiff/synthdata.hpp"
#include "test_util.hpp"

using namespace cdiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("cdiff_test_" + name);
    fs::remove_all(p);
    return p;
}

// 4-connected components of the 1-pixels, by BFS.
int component_count(const torch::Tensor& mask) {
    const int64_t h = mask.size(0), w = mask.size(1);
    auto m = mask.contiguous();
    auto a = m.accessor<float, 2>();
    std::vector<char> seen(h * w, 0);
    int count = 0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (a[y][x] == 0.0f || seen[y * w + x]) continue;
            ++count;
            std::queue<std::pair<int64_t, int64_t>> q;
            q.push({y, x});
            seen[y * w + x] = 1;
            while (!q.empty()) {
                auto [cy, cx] = q.front();
                q.pop();
                const int64_t dy[] = {1, -1, 0, 0}, dx[] = {0, 0, 1, -1};
                for (int d = 0; d < 4; ++d) {
                    const int64_t ny = cy + dy[d], nx = cx + dx[d];
                    if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                    if (a[ny][nx] == 0.0f || seen[ny * w + nx]) continue;
                    seen[ny * w + nx] = 1;
                    q.push({ny, nx});
                }
            }
        }
    return count;
}

} // namespace

TEST(SampleLayout, TinyDensityGivesEmptyLayout) {
    // 0.01 per kilo-pixel on 64x64 expects 0.04 cells.
    const auto layout = sample_layout(1, 3, {64, 64}, 0.01, 6.0);
    EXPECT_TRUE(layout.entries.empty());
    EXPECT_EQ(layout.size, (ImageSize{64, 64}));
    EXPECT_THROW(sample_layout(1, 3, {64, 64}, 0.0, 6.0), ValidationError);
}

TEST(SampleLayout, DeterministicUnderSeed) {
    EXPECT_EQ(sample_layout(5, 3, {64, 64}, 4.0, 6.0), sample_layout(5, 3, {64, 64}, 4.0, 6.0));
    EXPECT_NE(sample_layout(5, 3, {64, 64}, 4.0, 6.0), sample_layout(6, 3, {64, 64}, 4.0, 6.0));
}

TEST(SampleLayout, PairwiseMinimumDistance) {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        const auto layout = sample_layout(seed, 3, {64, 64}, 4.0, 6.0);
        ASSERT_FALSE(layout.entries.empty());
        const double expected = 4.0 * 64 * 64 / 1000.0;
        EXPECT_GE(layout.entries.size(), std::floor(0.9 * expected));
        EXPECT_LE(layout.entries.size(), std::ceil(1.1 * expected));
        for (size_t i = 0; i < layout.entries.size(); ++i) {
            const auto& a = layout.entries[i];
            EXPECT_TRUE(a.x >= 0 && a.x < 64 && a.y >= 0 && a.y < 64);
            EXPECT_TRUE(a.class_id >= 0 && a.class_id < 3);
            for (size_t j = i + 1; j < layout.entries.size(); ++j) {
                const auto& b = layout.entries[j];
                EXPECT_GE(std::hypot(a.x - b.x, a.y - b.y), 6.0);
            }
        }
    }
}

TEST(SampleLayout, InfeasibleDensityThrows) {
    EXPECT_THROW(sample_layout(0, 3, {16, 16}, 500.0, 8.0), InfeasibleDensity);
}

TEST(RenderImage, EmptyLayoutHasNoCells) {
    CentroidSet layout;
    layout.size = {64, 64};
    const auto style = default_style(0, 3);
    const auto img = render_image(layout, style);
    EXPECT_EQ(img.sizes(), (std::vector<int64_t>{3, 64, 64}));
    EXPECT_GE(img.min().item<float>(), 0.0f);
    EXPECT_LE(img.max().item<float>(), 1.0f);
    EXPECT_TRUE(detect_cells(img, style).empty());
}

TEST(RenderImage, CenterCellTakesClassColor) {
    CentroidSet layout;
    layout.size = {64, 64};
    layout.entries = {{32, 32, 0}};
    const auto style = default_style(1, 3);
    const auto img = render_image(layout, style);
    for (int c = 0; c < 3; ++c)
        EXPECT_NEAR(img[c][32][32].item<double>(), style.color[0][c], 0.15);
}

TEST(RenderImage, RepeatRenderIsBitIdentical) {
    const auto layout = sample_layout(3, 3, {64, 64}, 4.0, 6.0);
    const auto style = default_style(0, 3, 17);
    EXPECT_TRUE(torch::equal(render_image(layout, style), render_image(layout, style)));
}

TEST(RenderImage, StylesDiffer) {
    const auto s0 = default_style(0, 3), s1 = default_style(1, 3);
    EXPECT_NE(s0.background, s1.background);
    EXPECT_NE(s0.density, s1.density);
}

TEST(SampleMask, RectangleCoverage) {
    MaskSpec spec{MaskKind::rectangle, 0.25, 4};
    const auto mask = sample_mask(spec, {64, 64});
    EXPECT_NEAR(mask.coverage(), 0.25, 0.1);
    EXPECT_EQ(component_count(mask.data), 1);
    // Axis-aligned: the mask fills its bounding box.
    const auto rows = mask.data.sum(1).nonzero(), cols = mask.data.sum(0).nonzero();
    const auto h = rows.max().item<int64_t>() - rows.min().item<int64_t>() + 1;
    const auto w = cols.max().item<int64_t>() - cols.min().item<int64_t>() + 1;
    EXPECT_EQ(mask.data.sum().item<float>(), static_cast<float>(h * w));
}

TEST(SampleMask, DeterministicUnderSeed) {
    for (auto kind : {MaskKind::rectangle, MaskKind::irregular_blob, MaskKind::free_stroke}) {
        MaskSpec spec{kind, 0.3, 9};
        EXPECT_TRUE(torch::equal(sample_mask(spec, {64, 64}).data, sample_mask(spec, {64, 64}).data));
    }
}

TEST(SampleMask, BlobIsFourConnected) {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        const auto mask = sample_mask({MaskKind::irregular_blob, 0.3, seed}, {64, 64});
        EXPECT_EQ(component_count(mask.data), 1) << "seed " << seed;
        EXPECT_NEAR(mask.coverage(), 0.3, 0.1);
    }
}

TEST(SampleMask, BinaryValues) {
    const auto mask = sample_mask({MaskKind::free_stroke, 0.2, 1}, {64, 64});
    EXPECT_TRUE(((mask.data == 0) | (mask.data == 1)).all().item<bool>());
}

TEST(Dataset, EmptyRoundTrip) {
    const auto dir = scratch("empty_ds");
    Dataset d;
    write_dataset(dir, d);
    const auto back = read_dataset(dir);
    EXPECT_TRUE(back.records.empty());
    EXPECT_TRUE(back.manifest.records.empty());
    fs::remove_all(dir);
}

TEST(Dataset, TenRecordRoundTrip) {
    CorpusOptions o;
    o.count = 10;
    o.size = {32, 32};
    o.seed = 3;
    const auto d = generate_corpus(o);
    const auto dir = scratch("ten_ds");
    write_dataset(dir, d);
    const auto back = read_dataset(dir);
    ASSERT_EQ(back.records.size(), 10u);
    for (size_t i = 0; i < 10; ++i) {
        EXPECT_TRUE(torch::equal(back.records[i].image, d.records[i].image)) << i;
        EXPECT_TRUE(torch::equal(back.records[i].mask.data, d.records[i].mask.data)) << i;
        EXPECT_EQ(back.records[i].layout, d.records[i].layout) << i;
        EXPECT_EQ(back.records[i].style, d.records[i].style);
    }
    EXPECT_EQ(back.manifest.seed, 3u);
    fs::remove_all(dir);
}

TEST(Dataset, MissingImageIsNamed) {
    CorpusOptions o;
    o.count = 2;
    o.size = {32, 32};
    const auto dir = scratch("missing_ds");
    const auto m = write_dataset(dir, generate_corpus(o));
    fs::remove(dir / m.records[1].image);
    try {
        read_dataset(dir);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find(m.records[1].image), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(Dataset, RecordsArePureFunctionsOfIndex) {
    CorpusOptions o;
    o.count = 6;
    o.size = {32, 32};
    o.seed = 8;
    const auto d = generate_corpus(o);
    const auto r4 = generate_record(o, 4);
    EXPECT_TRUE(torch::equal(r4.image, d.records[4].image));
    EXPECT_EQ(r4.style, 0);
    EXPECT_EQ(d.records[3].style, 1);
}

TEST(Dataset, LayoutFileRoundTrip) {
    CentroidSet layout;
    layout.size = {32, 48};
    layout.num_classes = 5;
    layout.entries = {{1, 2, 4}, {30, 20, 0}};
    const auto path = fs::temp_directory_path() / "cdiff_test_layout.json";
    save_layout_file(path, layout);
    EXPECT_EQ(load_layout_file(path), layout);
    fs::remove(path);
}

TEST(Dataset, DatasetCentroidFileLoadsAsLayout) {
    const auto dir = test::scratch("layout_from_dataset");
    const auto data = test::corpus(2, 5, 3);
    write_dataset(dir, data);
    EXPECT_EQ(load_layout_file(dir / "centroids" / "0001.json"), data.records[1].layout);
    fs::copy_file(dir / "centroids" / "0001.json", dir / "orphan.json");
    EXPECT_THROW(load_layout_file(dir / "orphan.json"), IoError);
}
