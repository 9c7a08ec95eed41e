#include "cdiff/evaluate.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "cdiff/errors.hpp"
#include "cdiff/losses.hpp"
#include "cdiff/random.hpp"

namespace cdiff {

std::string to_string(Protocol protocol) {
    return protocol == Protocol::completion ? "completion" : "synthesis";
}

Protocol parse_protocol(const std::string& text) {
    if (text == "completion") return Protocol::completion;
    if (text == "synthesis") return Protocol::synthesis;
    throw ValidationError("unknown protocol '" + text + "' (expected completion or synthesis)");
}

nlohmann::json to_json(const MetricReport& report) {
    return {{"metrics", report.metrics}, {"metadata", report.metadata}};
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.metrics = j.at("metrics").get<std::map<std::string, double>>();
    r.metadata = j.at("metadata");
    return r;
}

void save_report(const MetricReport& report, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report '" + path.string() + "'");
    out << to_json(report).dump(2) << '\n';
}

MetricReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("missing report '" + path.string() + "'");
    try {
        return metric_report_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed report '" + path.string() + "': " + e.what());
    }
}

ImageProducer identity_producer() {
    return [](const std::vector<const DatasetRecord*>& records, TaskMode) {
        std::vector<torch::Tensor> images;
        for (const auto* r : records) images.push_back(r->image);
        return torch::stack(images);
    };
}

namespace {

// Content-derived batch seed: the same records always get the same noise.
uint64_t layout_seed(uint64_t seed, const std::vector<const DatasetRecord*>& records) {
    uint64_t h = seed;
    for (const auto* r : records)
        for (const auto& c : r->layout.entries)
            h = derive_seed(h, static_cast<uint64_t>(c.x) * 4099 + static_cast<uint64_t>(c.y), c.class_id);
    return h;
}

} // namespace

ImageProducer model_producer(DiffusionModel model, NoiseSchedule schedule, EvalOptions options) {
    return [model, schedule, options](const std::vector<const DatasetRecord*>& records, TaskMode mode) mutable {
        std::vector<torch::Tensor> maps, images, masks;
        std::vector<int> styles;
        for (const auto* r : records) {
            maps.push_back(rasterize_centroids(r->layout, options.cond_radius).data);
            images.push_back(r->image);
            masks.push_back(r->mask.data);
            styles.push_back(r->style);
        }
        const TaskMode previous = model->bank().active_mode();
        model->bank().set_active(mode);
        auto cfg = options.sampler;
        cfg.seed = layout_seed(options.sampler.seed, records);
        torch::Tensor out;
        {
            torch::NoGradGuard no_grad;
            const auto prompts = model->prompt_batch(styles, mode);
            out = mode == TaskMode::gen
                      ? sample_generation(model, torch::stack(maps), prompts, cfg, schedule)
                      : sample_inpaint(model, torch::stack(images), torch::stack(masks), torch::stack(maps),
                                       prompts, cfg, schedule);
        }
        model->bank().set_active(previous);
        return out;
    };
}

MetricReport evaluate_with(const ImageProducer& producer, const Dataset& dataset, Protocol protocol,
                           const EvalOptions& options) {
    const auto total = static_cast<int64_t>(dataset.records.size());
    if (total < 2) throw ValidationError("evaluate: dataset needs at least two records");
    if (options.test_records < 1) throw ValidationError("evaluate: test_records must be >= 1");
    const int64_t n_test = std::min(options.test_records, total);
    const int64_t first_test = total - n_test;
    const int k = dataset.manifest.num_classes;

    std::vector<const DatasetRecord*> test;
    for (int64_t i = first_test; i < total; ++i) test.push_back(&dataset.records[i]);
    const TaskMode mode = protocol == Protocol::completion ? TaskMode::inpaint : TaskMode::gen;
    std::vector<torch::Tensor> produced;
    for (size_t b = 0; b < test.size(); b += options.batch_size) {
        std::vector<const DatasetRecord*> batch(test.begin() + b,
                                                test.begin() + std::min(test.size(), b + options.batch_size));
        auto out = producer(batch, mode);
        if (out.dim() != 4 || out.size(0) != static_cast<int64_t>(batch.size()) ||
            out.size(2) != dataset.manifest.size.height || out.size(3) != dataset.manifest.size.width)
            throw ValidationError("evaluate: producer returned a batch of the wrong shape");
        produced.push_back(out.to(torch::kFloat32));
    }
    const auto generated = torch::cat(produced, 0);
    std::vector<torch::Tensor> real_v;
    std::vector<int> test_labels;
    for (const auto* r : test) {
        real_v.push_back(r->image);
        test_labels.push_back(r->style);
    }
    const auto real = torch::stack(real_v);

    // Feature extractor: style classifier trained on the non-held-out records.
    std::vector<torch::Tensor> train_v;
    std::vector<int> train_labels;
    for (int64_t i = 0; i < first_test; ++i) {
        train_v.push_back(dataset.records[i].image);
        train_labels.push_back(dataset.records[i].style);
    }
    if (train_v.empty()) {
        train_v = real_v;
        train_labels = test_labels;
    }
    const auto train_images = torch::stack(train_v);
    const int num_styles = std::max(2, dataset.manifest.num_styles);
    StyleClassifier clf(num_styles, options.classifier.seed);
    clf->fit(train_images, train_labels, options.classifier);

    MetricReport report;
    auto& m = report.metrics;
    const double fd = frechet_distance(clf->extract(real), clf->extract(generated));
    RandomConvPerceptual perceptual(options.perceptual_seed);
    double perc_full = 0.0;
    {
        torch::NoGradGuard no_grad;
        for (int64_t i = 0; i < n_test; ++i)
            perc_full += perceptual.distance(generated[i], real[i]).item<double>();
    }
    perc_full /= static_cast<double>(n_test);

    if (protocol == Protocol::completion) {
        m["frechet_full"] = fd;
        m["perceptual_full"] = perc_full;
        double l1 = 0.0, psnr = 0.0, ssim_sum = 0.0, perc_mask = 0.0;
        int64_t ssim_count = 0;
        torch::NoGradGuard no_grad;
        for (int64_t i = 0; i < n_test; ++i) {
            const auto& mask = test[i]->mask;
            const auto f = masked_fidelity(generated[i], real[i], mask);
            l1 += f.l1;
            psnr += f.psnr;
            if (f.ssim) {
                ssim_sum += *f.ssim;
                ++ssim_count;
            }
            const auto hole = mask.data.unsqueeze(0);
            const auto composed = generated[i] * hole + real[i] * (1.0 - hole);
            perc_mask += perceptual.distance(composed, real[i]).item<double>();
        }
        m["l1_mask"] = l1 / static_cast<double>(n_test);
        m["psnr_mask"] = psnr / static_cast<double>(n_test);
        m["perceptual_mask"] = perc_mask / static_cast<double>(n_test);
        if (ssim_count > 0) m["ssim_mask"] = ssim_sum / static_cast<double>(ssim_count);
        report.metadata["ssim"] = {{"window", kSsimWindow},
                                   {"region", "bounding box of mask = 1 pixels"},
                                   {"defined_for", ssim_count}};
    } else {
        m["frechet"] = fd;
        m["perceptual"] = perc_full;
        std::vector<RecoveryScore> scores;
        for (int64_t i = 0; i < n_test; ++i) {
            const auto style = default_style(test[i]->style, k);
            scores.push_back(centroid_recovery(generated[i], test[i]->layout, style, style.max_radius()));
        }
        const auto pooled = pool_scores(scores);
        m["centroid_precision"] = pooled.precision;
        m["centroid_recall"] = pooled.recall;
        m["centroid_f1"] = pooled.f1;
        std::set<int> distinct(test_labels.begin(), test_labels.end());
        if (distinct.size() >= 2) {
            const auto cls = classification_metrics(test_labels, clf->predict(generated), num_styles);
            m["downstream_accuracy"] = cls.accuracy;
            m["downstream_balanced_accuracy"] = cls.balanced_accuracy;
            m["downstream_kappa"] = cls.kappa;
            m["downstream_weighted_f1"] = cls.weighted_f1;
        }
        report.metadata["detection"] = {{"color_tolerance", kDetectionColorTolerance},
                                        {"match_radius", "largest cell radius of the record's style"}};
    }
    report.metadata["protocol"] = to_string(protocol);
    report.metadata["test_records"] = n_test;
    report.metadata["train_records"] = static_cast<int64_t>(train_labels.size());
    report.metadata["dataset_seed"] = dataset.manifest.seed;
    report.metadata["feature_extractor"] = clf->descriptor();
    report.metadata["perceptual"] = {{"name", perceptual.name()}, {"seed", perceptual.seed()}};
    report.metadata["sampler"] = {{"steps", options.sampler.steps},
                                  {"kind", to_string(options.sampler.kind)},
                                  {"seed", options.sampler.seed},
                                  {"composite", options.sampler.composite_known_region}};
    report.metadata["batch_size"] = options.batch_size;
    report.metadata["cond_radius"] = options.cond_radius;
    return report;
}

MetricReport evaluate_run(const Checkpoint& checkpoint, const Dataset& dataset, Protocol protocol,
                          const EvalOptions& options) {
    const auto& spec = checkpoint.model->spec();
    if (spec.num_classes != dataset.manifest.num_classes)
        throw ValidationError("checkpoint has K = " + std::to_string(spec.num_classes) + " but the dataset has K = " +
                              std::to_string(dataset.manifest.num_classes));
    const int64_t stride = int64_t{1} << (spec.levels() - 1);
    const auto size = dataset.manifest.size;
    if (size.height % stride != 0 || size.width % stride != 0)
        throw ValidationError("dataset images are " + std::to_string(size.height) + "x" + std::to_string(size.width) +
                              " but the checkpoint needs sides divisible by " + std::to_string(stride));
    if (checkpoint.model->bank().empty())
        throw ValidationError("evaluate: checkpoint has no adapters; train-adapters first");
    auto model = clone_model(checkpoint.model);
    auto report = evaluate_with(model_producer(model, checkpoint.schedule(), options), dataset, protocol, options);
    report.metadata["checkpoint_step"] = checkpoint.step;
    report.metadata["checkpoint_phase"] = to_string(checkpoint.phase);
    return report;
}

} // namespace cdiff
