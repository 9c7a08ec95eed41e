#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdiff/synthdata.hpp"
#include "cdiff/types.hpp"

namespace cdiff {

struct DatasetRecord {
    Image image;         // on the 8-bit grid
    CentroidSet layout;
    BinaryMask mask;
    int style = 0;
};

struct ManifestEntry {
    std::string image;      // relative to the dataset root
    std::string centroids;
    std::string mask;
    int style = 0;
};

struct DatasetManifest {
    static constexpr int kFormatVersion = 1;

    int num_classes = 3;
    ImageSize size;
    uint64_t seed = 0;
    int num_styles = 2;
    std::vector<ManifestEntry> records;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<DatasetRecord> records;
};

struct CorpusOptions {
    int count = 64;
    ImageSize size;
    int num_classes = 3;
    int num_styles = 2;
    uint64_t seed = 0;
    double min_coverage = 0.1;
    double max_coverage = 0.5;
};

// Builds an in-memory corpus: record i uses style i % num_styles, a layout
// sampled with that style's density, and a mask of a kind cycling through the
// three families. Every record is a pure function of (options, i).
Dataset generate_corpus(const CorpusOptions& options);
DatasetRecord generate_record(const CorpusOptions& options, int index);

// Writes manifest.json, images/NNNN.png, masks/NNNN.png, centroids/NNNN.json.
// Returns the manifest with record paths filled in.
DatasetManifest write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

// Centroid annotation files: a JSON list of {x, y, class_id}.
nlohmann::json layout_to_json(const CentroidSet& layout);
CentroidSet layout_from_json(const nlohmann::json& j, ImageSize size, int num_classes);

// Self-describing layout file used by the CLI:
// {"num_classes": K, "height": H, "width": W, "centroids": [...]}.
void save_layout_file(const std::filesystem::path& path, const CentroidSet& layout);
CentroidSet load_layout_file(const std::filesystem::path& path);

} // namespace cdiff
