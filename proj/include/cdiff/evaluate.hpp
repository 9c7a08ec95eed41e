#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "cdiff/checkpoint.hpp"
#include "cdiff/classifier.hpp"
#include "cdiff/dataset.hpp"
#include "cdiff/diffusion.hpp"

namespace cdiff {

enum class Protocol { completion, synthesis };
std::string to_string(Protocol protocol);
Protocol parse_protocol(const std::string& text);

struct MetricReport {
    std::map<std::string, double> metrics;
    nlohmann::json metadata;

    bool operator==(const MetricReport&) const = default;
};

nlohmann::json to_json(const MetricReport& report);
MetricReport metric_report_from_json(const nlohmann::json& j);
void save_report(const MetricReport& report, const std::filesystem::path& path);
MetricReport load_report(const std::filesystem::path& path);

struct EvalOptions {
    int64_t test_records = 32;  // the last N records are held out
    int64_t batch_size = 16;
    SamplerConfig sampler;
    ClassifierOptions classifier;
    double cond_radius = 1.0;
    uint64_t perceptual_seed = 0;
};

// Produces images for held-out records: synthesis gets (maps, styles),
// completion additionally (images, masks). Returns [B, 3, H, W] in [0, 1].
using ImageProducer = std::function<torch::Tensor(
    const std::vector<const DatasetRecord*>& records, TaskMode mode)>;

// The records' own images: evaluating a dataset against itself.
ImageProducer identity_producer();
ImageProducer model_producer(DiffusionModel model, NoiseSchedule schedule, EvalOptions options);

MetricReport evaluate_with(const ImageProducer& producer, const Dataset& dataset,
                           Protocol protocol, const EvalOptions& options);
// Throws ValidationError when the checkpoint's K or image size disagree with
// the dataset.
MetricReport evaluate_run(const Checkpoint& checkpoint, const Dataset& dataset,
                          Protocol protocol, const EvalOptions& options);

} // namespace cdiff
