#include "cdiff/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cdiff/errors.hpp"
#include "cdiff/image_io.hpp"

namespace cdiff {
namespace fs = std::filesystem;

namespace {

constexpr MaskKind kMaskCycle[] = {MaskKind::rectangle, MaskKind::irregular_blob,
                                   MaskKind::free_stroke};

uint64_t mix(uint64_t seed, uint64_t index, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1) + 0xbf58476d1ce4e5b9ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::string record_name(size_t index) {
    std::ostringstream os;
    os << std::setw(4) << std::setfill('0') << index;
    return os.str();
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("missing file '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

} // namespace

DatasetRecord generate_record(const CorpusOptions& options, int index) {
    const int style_label = index % options.num_styles;
    StyleSpec style = default_style(style_label, options.num_classes, mix(options.seed, index, 1));
    DatasetRecord r;
    r.style = style_label;
    r.layout = sample_layout(mix(options.seed, index, 0), options.num_classes, options.size,
                             style.density, style.min_dist);
    r.image = quantize_8bit(render_image(r.layout, style));
    const uint64_t mseed = mix(options.seed, index, 2);
    const double u = static_cast<double>(mseed % 10007) / 10006.0;
    MaskSpec ms;
    ms.kind = kMaskCycle[index % 3];
    ms.target_coverage = options.min_coverage + u * (options.max_coverage - options.min_coverage);
    ms.seed = mseed;
    r.mask = sample_mask(ms, options.size);
    return r;
}

Dataset generate_corpus(const CorpusOptions& options) {
    if (options.count < 0 || options.num_styles < 1)
        throw ValidationError("generate_corpus: count must be >= 0 and num_styles >= 1");
    Dataset d;
    d.manifest.num_classes = options.num_classes;
    d.manifest.size = options.size;
    d.manifest.seed = options.seed;
    d.manifest.num_styles = options.num_styles;
    d.records.reserve(options.count);
    for (int i = 0; i < options.count; ++i) d.records.push_back(generate_record(options, i));
    return d;
}

nlohmann::json layout_to_json(const CentroidSet& layout) {
    auto arr = nlohmann::json::array();
    for (const auto& c : layout.entries) arr.push_back({{"x", c.x}, {"y", c.y}, {"class_id", c.class_id}});
    return arr;
}

CentroidSet layout_from_json(const nlohmann::json& j, ImageSize size, int num_classes) {
    if (!j.is_array()) throw IoError("centroid annotation must be a JSON list");
    CentroidSet s;
    s.size = size;
    s.num_classes = num_classes;
    for (const auto& e : j) {
        if (!e.is_object() || !e.contains("x") || !e.contains("y") || !e.contains("class_id") ||
            !e["x"].is_number_integer() || !e["y"].is_number_integer() ||
            !e["class_id"].is_number_integer())
            throw IoError("malformed centroid entry: " + e.dump());
        s.entries.push_back({e["x"].get<int>(), e["y"].get<int>(), e["class_id"].get<int>()});
    }
    return s;
}

void save_layout_file(const fs::path& path, const CentroidSet& layout) {
    write_json(path, {{"num_classes", layout.num_classes},
                      {"height", layout.size.height},
                      {"width", layout.size.width},
                      {"centroids", layout_to_json(layout)}});
}

CentroidSet load_layout_file(const fs::path& path) {
    const auto j = read_json(path);
    try {
        if (j.is_array()) {
            // A dataset's centroids/NNNN.json: size and K come from the manifest.
            const auto manifest = path.parent_path().parent_path() / "manifest.json";
            if (!fs::exists(manifest))
                throw IoError("layout file '" + path.string() +
                              "' is a bare centroid list and no dataset manifest was found at '" +
                              manifest.string() + "'");
            const auto m = read_json(manifest);
            auto s = layout_from_json(j, {m.at("height").get<int64_t>(), m.at("width").get<int64_t>()},
                                      m.at("num_classes").get<int>());
            s.validate();
            return s;
        }
        auto s = layout_from_json(j.at("centroids"),
                                  {j.at("height").get<int64_t>(), j.at("width").get<int64_t>()},
                                  j.at("num_classes").get<int>());
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed layout file '" + path.string() + "': " + e.what());
    } catch (const ValidationError& e) {
        throw IoError("invalid layout file '" + path.string() + "': " + e.what());
    }
}

DatasetManifest write_dataset(const fs::path& dir, const Dataset& dataset) {
    DatasetManifest m = dataset.manifest;
    m.records.clear();
    std::error_code ec;
    for (const char* sub : {"images", "masks", "centroids"}) {
        fs::create_directories(dir / sub, ec);
        if (ec) throw IoError("cannot create '" + (dir / sub).string() + "': " + ec.message());
    }
    auto records = nlohmann::json::array();
    for (size_t i = 0; i < dataset.records.size(); ++i) {
        const auto& r = dataset.records[i];
        if (r.image.size(1) != m.size.height || r.image.size(2) != m.size.width ||
            r.layout.size != m.size || r.layout.num_classes != m.num_classes)
            throw ValidationError("record " + std::to_string(i) + " disagrees with the manifest (K, H, W)");
        const auto name = record_name(i);
        ManifestEntry e{"images/" + name + ".png", "centroids/" + name + ".json",
                        "masks/" + name + ".png", r.style};
        write_png_rgb(dir / e.image, r.image);
        write_png_gray(dir / e.mask, r.mask.data);
        write_json(dir / e.centroids, layout_to_json(r.layout));
        records.push_back({{"image", e.image}, {"centroids", e.centroids}, {"mask", e.mask},
                           {"style", e.style}});
        m.records.push_back(std::move(e));
    }
    write_json(dir / "manifest.json", {{"format_version", DatasetManifest::kFormatVersion},
                                       {"num_classes", m.num_classes},
                                       {"height", m.size.height},
                                       {"width", m.size.width},
                                       {"seed", m.seed},
                                       {"num_styles", m.num_styles},
                                       {"records", records}});
    return m;
}

Dataset read_dataset(const fs::path& dir) {
    const auto j = read_json(dir / "manifest.json");
    Dataset d;
    auto& m = d.manifest;
    try {
        if (j.at("format_version").get<int>() != DatasetManifest::kFormatVersion)
            throw IoError("unsupported dataset format_version in '" + (dir / "manifest.json").string() + "'");
        m.num_classes = j.at("num_classes").get<int>();
        m.size = {j.at("height").get<int64_t>(), j.at("width").get<int64_t>()};
        m.seed = j.at("seed").get<uint64_t>();
        m.num_styles = j.at("num_styles").get<int>();
        for (const auto& r : j.at("records"))
            m.records.push_back({r.at("image").get<std::string>(), r.at("centroids").get<std::string>(),
                                 r.at("mask").get<std::string>(), r.at("style").get<int>()});
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest '" + (dir / "manifest.json").string() + "': " + e.what());
    }
    for (const auto& e : m.records) {
        for (const auto& rel : {e.image, e.centroids, e.mask})
            if (!fs::exists(dir / rel)) throw IoError("missing file '" + (dir / rel).string() + "'");
        DatasetRecord r;
        r.style = e.style;
        r.image = read_png_rgb(dir / e.image);
        r.mask = {(read_png_gray(dir / e.mask) > 0.5).to(torch::kFloat32)};
        if (r.image.size(1) != m.size.height || r.image.size(2) != m.size.width)
            throw IoError("size mismatch: '" + (dir / e.image).string() + "' is not " +
                          std::to_string(m.size.height) + "x" + std::to_string(m.size.width));
        if (r.mask.data.size(0) != m.size.height || r.mask.data.size(1) != m.size.width)
            throw IoError("size mismatch: '" + (dir / e.mask).string() + "'");
        r.layout = layout_from_json(read_json(dir / e.centroids), m.size, m.num_classes);
        try {
            r.layout.validate();
        } catch (const ValidationError& err) {
            throw IoError("malformed annotation '" + (dir / e.centroids).string() + "': " + err.what());
        }
        d.records.push_back(std::move(r));
    }
    return d;
}

} // namespace cdiff
