#include "cdiff/cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cdiff/checkpoint.hpp"
#include "cdiff/config.hpp"
#include "cdiff/dataset.hpp"
#include "cdiff/errors.hpp"
#include "cdiff/evaluate.hpp"
#include "cdiff/image_io.hpp"
#include "cdiff/trainer.hpp"

namespace cdiff::cli {
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int64_t kGridGutter = 4;

struct Invocation {
    std::vector<std::string> argv;
    std::string command;
    nlohmann::json flags = nlohmann::json::object();
    nlohmann::json seeds = nlohmann::json::object();
    std::vector<std::string> outputs;
};

void write_manifest(const fs::path& dir, const Invocation& inv) {
    nlohmann::json j;
    j["command"] = inv.command;
    j["argv"] = inv.argv;
    j["flags"] = inv.flags;
    j["seeds"] = inv.seeds;
    j["outputs"] = inv.outputs;
    j["versions"] = {{"cdiff", kVersion}, {"libtorch", TORCH_VERSION}};
    fs::create_directories(dir);
    std::ofstream out(dir / "run_manifest.json");
    if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
    out << j.dump(2) << '\n';
}

TrainConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets,
                                const std::string& out_dir, const std::string& dataset) {
    auto config = load_config(path);
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        apply_config_value(config, s.substr(0, eq), s.substr(eq + 1));
    }
    if (!out_dir.empty()) config.out_dir = out_dir;
    if (!dataset.empty()) config.dataset = dataset;
    if (config.dataset.empty()) throw ConfigError("dataset: no dataset directory given");
    return config;
}

void log_progress(const StepRecord& rec, int64_t total, int64_t every) {
    if ((rec.step + 1) % every != 0 && rec.step + 1 != total) return;
    std::cerr << "step " << rec.step + 1 << "/" << total << " " << to_string(rec.mode) << " loss " << rec.loss << "\n";
}

// Centroid dots in class colors over a gray canvas, the hole tinted red.
torch::Tensor condition_panel(const CentroidSet& layout, int style, const torch::Tensor* mask) {
    const auto h = layout.size.height, w = layout.size.width;
    auto panel = torch::full({3, h, w}, 0.5f);
    if (mask) {
        auto m = mask->unsqueeze(0);
        auto red = torch::tensor({0.85f, 0.2f, 0.2f}).view({3, 1, 1});
        panel = panel * (1 - 0.6 * m) + red * 0.6 * m;
    }
    const auto s = default_style(style, layout.num_classes);
    auto maps = rasterize_centroids(layout, 1.0).data;
    for (int k = 0; k < layout.num_classes; ++k) {
        auto color = torch::tensor({static_cast<float>(s.color[k][0]), static_cast<float>(s.color[k][1]),
                                    static_cast<float>(s.color[k][2])})
                         .view({3, 1, 1});
        auto dot = maps[k].unsqueeze(0) > 0.5;
        panel = torch::where(dot, color.expand({3, h, w}), panel);
    }
    return panel;
}

torch::Tensor grid(const std::vector<torch::Tensor>& panels) {
    const auto h = panels.front().size(1);
    std::vector<torch::Tensor> parts;
    for (size_t i = 0; i < panels.size(); ++i) {
        if (i > 0) parts.push_back(torch::ones({3, h, kGridGutter}));
        parts.push_back(panels[i]);
    }
    return torch::cat(parts, 2);
}

void check_layout_against(const Checkpoint& ckpt, const CentroidSet& layout) {
    const auto k = ckpt.model->spec().num_classes;
    if (layout.num_classes != k)
        throw ValidationError("layout file has K = " + std::to_string(layout.num_classes) +
                              " but the checkpoint expects K = " + std::to_string(k));
    const int64_t stride = int64_t{1} << (ckpt.model->spec().levels() - 1);
    if (layout.size.height % stride != 0 || layout.size.width % stride != 0)
        throw ValidationError("image size " + std::to_string(layout.size.height) + "x" +
                              std::to_string(layout.size.width) + " is not divisible by " + std::to_string(stride));
}

void check_style(const Checkpoint& ckpt, int style) {
    if (style < 0 || style >= ckpt.model->spec().num_styles)
        throw ValidationError("--style " + std::to_string(style) + " outside [0, " +
                              std::to_string(ckpt.model->spec().num_styles) + ")");
}

} // namespace

int run(const std::vector<std::string>& argv) {
    CLI::App app{"Dual-mode centroid-conditioned diffusion toolkit", "cdiff"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);
    Invocation inv;
    inv.argv = argv;

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "Generate a synthetic two-style corpus");
    std::string synth_out;
    CorpusOptions corpus;
    std::vector<int64_t> synth_size{64, 64};
    synth->add_option("--out", synth_out, "Output dataset directory")->required();
    synth->add_option("--n", corpus.count, "Number of records")->check(CLI::PositiveNumber);
    synth->add_option("--size", synth_size, "Image height and width")->expected(2);
    synth->add_option("--k", corpus.num_classes, "Number of cell classes")->check(CLI::Range(1, 16));
    synth->add_option("--styles", corpus.num_styles, "Number of styles")->check(CLI::Range(1, 2));
    synth->add_option("--seed", corpus.seed, "Root seed");
    synth->add_option("--min-coverage", corpus.min_coverage, "Smallest hole coverage");
    synth->add_option("--max-coverage", corpus.max_coverage, "Largest hole coverage");

    // training commands
    std::string config_path, base_path, train_out, train_dataset;
    std::vector<std::string> sets;
    auto add_train_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "Run config file (key = value lines)")
            ->required()
            ->check(CLI::ExistingFile);
        cmd->add_option("--set", sets, "Override a config key: key=value (repeatable, wins over the file)");
        cmd->add_option("--out", train_out, "Output directory (overrides out_dir)");
        cmd->add_option("--dataset", train_dataset, "Dataset directory (overrides dataset)");
    };
    auto* pre = app.add_subcommand("pretrain", "Train the backbone and control trunk");
    add_train_flags(pre);
    auto* adapt = app.add_subcommand("train-adapters", "Train dual adapters over a frozen pretrain checkpoint");
    add_train_flags(adapt);
    adapt->add_option("--base", base_path, "Pretrain checkpoint")->required()->check(CLI::ExistingFile);

    auto* res = app.add_subcommand("resume", "Continue training from a checkpoint");
    std::string resume_ckpt, resume_out;
    int64_t resume_steps = -1;
    res->add_option("--ckpt", resume_ckpt, "Checkpoint to continue")->required()->check(CLI::ExistingFile);
    res->add_option("--steps", resume_steps, "New total step budget");
    res->add_option("--out", resume_out, "Output directory (default: the checkpoint's out_dir)");

    // sampling commands
    std::string ckpt_path, layout_path, image_path, mask_path, sample_out;
    int style = 0;
    SamplerConfig sampler;
    std::string sampler_kind = "det";
    bool composite = true;
    auto add_sampler_flags = [&](CLI::App* cmd) {
        cmd->add_option("--ckpt", ckpt_path, "Adapter checkpoint")->required()->check(CLI::ExistingFile);
        cmd->add_option("--style", style, "Style label of the prompt");
        cmd->add_option("--steps", sampler.steps, "Sampling steps");
        cmd->add_option("--sampler", sampler_kind, "ancestral | det")
            ->check(CLI::IsMember({"ancestral", "det"}));
        cmd->add_option("--seed", sampler.seed, "Sampler seed");
        cmd->add_option("--out", sample_out, "Output directory")->required();
    };
    auto* smp = app.add_subcommand("sample", "Synthesize an image from a centroid layout");
    add_sampler_flags(smp);
    smp->add_option("--layout", layout_path, "Layout JSON file")->required()->check(CLI::ExistingFile);
    auto* inp = app.add_subcommand("inpaint", "Complete the masked region of an image");
    add_sampler_flags(inp);
    inp->add_option("--image", image_path, "Input RGB PNG")->required()->check(CLI::ExistingFile);
    inp->add_option("--mask", mask_path, "Mask PNG, nonzero marks missing pixels")->required()->check(CLI::ExistingFile);
    inp->add_option("--layout", layout_path, "Layout JSON file (default: no centroids)")->check(CLI::ExistingFile);
    inp->add_flag("--composite,!--no-composite", composite, "Paste known pixels back into the output (default on)");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on held-out records");
    std::string eval_data, eval_protocol = "synthesis", eval_out;
    EvalOptions eval_opts;
    ev->add_option("--ckpt", ckpt_path, "Adapter checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--protocol", eval_protocol, "completion | synthesis")
        ->check(CLI::IsMember({"completion", "synthesis"}));
    ev->add_option("--out", eval_out, "Output directory")->required();
    ev->add_option("--test-records", eval_opts.test_records, "Held-out records (the last N)");
    ev->add_option("--batch", eval_opts.batch_size, "Sampling batch size")->check(CLI::PositiveNumber);
    ev->add_option("--steps", eval_opts.sampler.steps, "Sampling steps");
    ev->add_option("--sampler", sampler_kind, "ancestral | det")->check(CLI::IsMember({"ancestral", "det"}));
    ev->add_option("--seed", eval_opts.sampler.seed, "Sampler seed");
    ev->add_option("--classifier-seed", eval_opts.classifier.seed, "Feature classifier seed");

    try {
        std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        for (auto* sub : app.get_subcommands()) {
            inv.command = sub->get_name();
            for (const auto* opt : sub->get_options())
                if (opt->count() > 0) inv.flags[opt->get_name()] = opt->results();
        }

        if (synth->parsed()) {
            corpus.size = {synth_size[0], synth_size[1]};
            auto data = generate_corpus(corpus);
            write_dataset(synth_out, data);
            inv.seeds["corpus"] = corpus.seed;
            inv.outputs = {"manifest.json", "images/", "masks/", "centroids/"};
            write_manifest(synth_out, inv);
            std::cout << "wrote " << corpus.count << " records to " << synth_out << "\n";
            return kOk;
        }

        if (pre->parsed() || adapt->parsed()) {
            auto config = load_with_overrides(config_path, sets, train_out, train_dataset);
            const auto data = read_dataset(config.dataset);
            const bool is_pre = pre->parsed();
            if (is_pre && config.phase != Phase::pretrain) config.phase = Phase::pretrain;
            if (!is_pre && config.phase != Phase::adapters) config.phase = Phase::adapters;
            auto session = is_pre ? TrainingSession::start_pretrain(config, data)
                                  : TrainingSession::start_adapters(config, load_checkpoint(base_path), data);
            if (!is_pre)
                std::cerr << "trainable parameters " << session.trainable_parameter_count() << " of "
                          << session.total_parameter_count() << "\n";
            const auto every = std::max<int64_t>(1, config.log_every);
            session.run([&](const StepRecord& r) { log_progress(r, config.total_steps, every); });
            const fs::path out = config.out_dir;
            const auto name = std::string(is_pre ? "pretrain" : "adapters") + ".pt";
            save_checkpoint(session.checkpoint(), out / name);
            {
                std::ofstream cfg(out / "config.txt");
                cfg << format_config(session.config());
            }
            inv.seeds["train"] = config.seed;
            inv.outputs = {name, "config.txt", "train_log_" + to_string(config.phase) + ".csv"};
            write_manifest(out, inv);
            std::cout << "wrote " << (out / name).string() << "\n";
            return kOk;
        }

        if (res->parsed()) {
            const auto ckpt = load_checkpoint(resume_ckpt);
            auto override_config = ckpt.config;
            if (resume_steps >= 0) override_config.total_steps = resume_steps;
            if (!resume_out.empty()) override_config.out_dir = resume_out;
            const auto data = read_dataset(ckpt.config.dataset);
            auto session = TrainingSession::resume(ckpt, data, override_config);
            const auto every = std::max<int64_t>(1, session.config().log_every);
            session.run([&](const StepRecord& r) { log_progress(r, session.config().total_steps, every); });
            const fs::path out = session.config().out_dir;
            const auto name = to_string(ckpt.phase) + ".pt";
            save_checkpoint(session.checkpoint(), out / name);
            inv.seeds["train"] = session.config().seed;
            inv.outputs = {name};
            write_manifest(out, inv);
            std::cout << "wrote " << (out / name).string() << " at step " << session.current_step() << "\n";
            return kOk;
        }

        if (smp->parsed() || inp->parsed()) {
            const auto ckpt = load_checkpoint(ckpt_path);
            if (ckpt.model->bank().empty())
                throw ValidationError("checkpoint has no adapters; run train-adapters first");
            check_style(ckpt, style);
            sampler.kind = parse_sampler_kind(sampler_kind);
            sampler.composite_known_region = composite;
            auto model = ckpt.model;
            const fs::path out = sample_out;
            fs::create_directories(out);
            torch::Tensor result, input_panel, cond_panel;
            if (smp->parsed()) {
                const auto layout = load_layout_file(layout_path);
                check_layout_against(ckpt, layout);
                model->bank().set_active(TaskMode::gen);
                const auto maps = rasterize_centroids(layout, ckpt.config.cond_radius).data.unsqueeze(0);
                result = sample_generation(model, maps, model->prompt_batch({style}, TaskMode::gen), sampler,
                                           ckpt.schedule())[0];
                input_panel = torch::full({3, layout.size.height, layout.size.width}, 0.5f);
                cond_panel = condition_panel(layout, style, nullptr);
                write_png_rgb(out / "sample.png", result);
                inv.outputs = {"sample.png", "grid.png"};
            } else {
                const auto image = read_png_rgb(image_path);
                const ImageSize size{image.size(1), image.size(2)};
                BinaryMask mask{(read_png_gray(mask_path) > 0.0).to(torch::kFloat32)};
                if (mask.size() != size)
                    throw ValidationError("mask is " + std::to_string(mask.size().height) + "x" +
                                          std::to_string(mask.size().width) + " but the image is " +
                                          std::to_string(size.height) + "x" + std::to_string(size.width));
                CentroidSet layout;
                layout.size = size;
                layout.num_classes = static_cast<int>(ckpt.model->spec().num_classes);
                if (!layout_path.empty()) {
                    layout = load_layout_file(layout_path);
                    if (layout.size != size) throw ValidationError("layout size does not match the image");
                }
                check_layout_against(ckpt, layout);
                model->bank().set_active(TaskMode::inpaint);
                const auto maps = rasterize_centroids(layout, ckpt.config.cond_radius).data.unsqueeze(0);
                result = sample_inpaint(model, image.unsqueeze(0), mask.data.unsqueeze(0), maps,
                                        model->prompt_batch({style}, TaskMode::inpaint), sampler,
                                        ckpt.schedule())[0];
                input_panel = image * (1.0 - mask.data.unsqueeze(0));
                cond_panel = condition_panel(layout, style, &mask.data);
                write_png_rgb(out / "inpaint.png", result);
                inv.outputs = {"inpaint.png", "grid.png"};
            }
            write_png_rgb(out / "grid.png", grid({input_panel, cond_panel, result}));
            inv.seeds["sampler"] = sampler.seed;
            write_manifest(out, inv);
            std::cout << "wrote " << (out / inv.outputs.front()).string() << "\n";
            return kOk;
        }

        if (ev->parsed()) {
            const auto ckpt = load_checkpoint(ckpt_path);
            const auto data = read_dataset(eval_data);
            eval_opts.sampler.kind = parse_sampler_kind(sampler_kind);
            eval_opts.cond_radius = ckpt.config.cond_radius;
            auto report = evaluate_run(ckpt, data, parse_protocol(eval_protocol), eval_opts);
            const fs::path out = eval_out;
            save_report(report, out / "report.json");
            inv.seeds["sampler"] = eval_opts.sampler.seed;
            inv.seeds["classifier"] = eval_opts.classifier.seed;
            inv.outputs = {"report.json"};
            write_manifest(out, inv);
            for (const auto& [name, value] : report.metrics) std::cout << name << " " << value << "\n";
            return kOk;
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const InfeasibleDensity& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const CoverageUnreachable& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}

} // namespace cdiff::cli
