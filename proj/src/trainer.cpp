#include "cdiff/trainer.hpp"

#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "cdiff/errors.hpp"

namespace cdiff {
namespace F = torch::nn::functional;

namespace {

// Random stream ids for derive_seed.
enum Stream : uint64_t {
    kIndices = 1,
    kNoise = 2,
    kMask = 3,
    kBankInit = 4,
    kValidation = 5,
};

constexpr double kEmaDecay = 0.98;
constexpr uint64_t kPerceptualSeed = 0;

void apply_determinism(const TrainConfig& config) {
    torch::set_num_threads(config.deterministic ? 1 : static_cast<int>(config.threads));
    at::globalContext().setDeterministicAlgorithms(config.deterministic, false);
}

int64_t train_record_count(const TrainConfig& config, const Dataset& data) {
    const auto n = static_cast<int64_t>(data.records.size());
    const int64_t used = config.train_records < 0 ? n : std::min(config.train_records, n);
    if (used < 1) throw ValidationError("dataset has no training records");
    return used;
}

void check_dataset(const DenoiserSpec& spec, const Dataset& data) {
    if (data.records.empty()) throw ValidationError("dataset is empty");
    if (data.manifest.num_classes != spec.num_classes)
        throw ValidationError("dataset has K = " + std::to_string(data.manifest.num_classes) +
                              " but the model expects K = " + std::to_string(spec.num_classes));
    if (data.manifest.num_styles > spec.num_styles)
        throw ValidationError("dataset has " + std::to_string(data.manifest.num_styles) +
                              " styles but the prompt table holds " + std::to_string(spec.num_styles));
}

BinaryMask training_mask(const TrainConfig& config, const DatasetRecord& record, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> cov(config.min_coverage, config.max_coverage);
    MaskSpec spec;
    spec.kind = static_cast<MaskKind>(rng() % 3);
    spec.target_coverage = cov(rng);
    spec.seed = rng();
    try {
        return sample_mask(spec, record.mask.size());
    } catch (const CoverageUnreachable&) {
        return record.mask;
    }
}

// Fills every random draw of a batch from (seed, step) so that any step can
// be rebuilt in isolation.
TrainBatch build_batch(const Dataset& data, const std::vector<int64_t>& indices, TaskMode mode,
                       const TrainConfig& config, const NoiseSchedule& schedule, uint64_t seed,
                       uint64_t step) {
    TrainBatch b;
    b.mode = mode;
    b.indices = indices;
    std::vector<torch::Tensor> images, masks, maps;
    for (size_t i = 0; i < indices.size(); ++i) {
        const auto& r = data.records.at(indices[i]);
        images.push_back(r.image);
        maps.push_back(rasterize_centroids(r.layout, config.cond_radius).data);
        b.styles.push_back(r.style);
        b.layouts.push_back(r.layout);
        if (mode == TaskMode::inpaint)
            masks.push_back(training_mask(config, r, derive_seed(seed, kMask, step * 4096 + i)).data);
    }
    b.images = torch::stack(images);
    b.x0 = to_model_space(b.images);
    b.maps = torch::stack(maps);
    b.masks = mode == TaskMode::inpaint ? torch::stack(masks)
                                        : torch::zeros({b.images.size(0), b.images.size(2), b.images.size(3)});
    auto gen = make_generator(derive_seed(seed, kNoise, step));
    b.t = torch::randint(0, schedule.steps(), {b.images.size(0)}, gen, torch::kLong);
    b.eps = torch::randn(b.x0.sizes(), gen, torch::kFloat32);
    return b;
}

ConditionTensor batch_condition(const TrainBatch& b) {
    std::vector<ConditionTensor> conds;
    for (int64_t i = 0; i < b.images.size(0); ++i) {
        if (b.mode == TaskMode::inpaint)
            conds.push_back(build_condition(b.images[i], BinaryMask{b.masks[i]}, {b.maps[i]}, TaskMode::inpaint));
        else
            conds.push_back(build_condition(std::nullopt, std::nullopt, {b.maps[i]}, TaskMode::gen));
    }
    return stack_conditions(conds);
}

struct LossResult {
    torch::Tensor total;
    std::map<std::string, double> components;
};

double centroid_sigma(const HyperParams& hp, int style, int num_classes) {
    if (hp.sigma_cent > 0.0) return hp.sigma_cent;
    const auto s = default_style(style, num_classes);
    double sum = 0.0;
    for (double r : s.radius) sum += r;
    return sum / static_cast<double>(s.radius.size());
}

constexpr double kLayoutTargetSigma = 1.0;

// Gaussian-smoothed centroid maps, bilinearly downsampled to the head's resolution.
torch::Tensor layout_target(const TrainBatch& b, const TrainConfig& config, int64_t factor) {
    std::vector<torch::Tensor> maps;
    for (const auto& layout : b.layouts)
        maps.push_back(rasterize_centroids(layout, config.cond_radius, kLayoutTargetSigma).data);
    return F::interpolate(torch::stack(maps), F::InterpolateFuncOptions()
                                                  .size(std::vector<int64_t>{b.maps.size(2) / factor,
                                                                             b.maps.size(3) / factor})
                                                  .mode(torch::kBilinear)
                                                  .align_corners(false));
}

LossResult phase_loss(DiffusionModel& model, const TrainBatch& b, Phase phase, const TrainConfig& config,
                      const NoiseSchedule& schedule, const PerceptualMetric& perceptual, int64_t step) {
    model->bank().set_active(b.mode);
    const auto cond = batch_condition(b);
    const auto z = q_sample(b.x0, b.t, b.eps, schedule);
    const auto prompts = model->prompt_batch(b.styles, b.mode);
    auto out = model->denoise_with_features(z, b.t, cond, prompts);
    LossResult r;
    if (phase == Phase::pretrain) {
        r.total = F::mse_loss(out.eps_hat, b.eps);
        r.components["eps"] = r.total.item<double>();
        return r;
    }
    const auto& hp = config.hp;
    const auto w_snr = min_snr_weights(b.t, schedule, hp.gamma_snr);
    // Clamped like the sampler's x0; unclamped estimates at large t swamp the image terms.
    const auto x0_hat = to_data_space(predict_x0(z, out.eps_hat, b.t, schedule));
    const int64_t n = b.images.size(0);
    if (b.mode == TaskMode::inpaint) {
        std::vector<torch::Tensor> w_mask, m_soft;
        for (int64_t i = 0; i < n; ++i) {
            BinaryMask m{b.masks[i]};
            w_mask.push_back(mask_weight_map(m, hp.lambda_mask).data);
            m_soft.push_back(soften_mask(m, hp.soft_mask_sigma).data);
        }
        InpaintLossInputs in{b.eps, out.eps_hat, torch::stack(w_mask), w_snr, x0_hat, b.images,
                             torch::stack(m_soft), TaskMode::inpaint};
        auto l = total_inpaint_loss(in, perceptual, hp, step);
        r.total = l.total;
        r.components = {{"eps", l.eps.item<double>()},
                        {"l1", l.l1.item<double>()},
                        {"perceptual", l.perceptual.defined() ? l.perceptual.item<double>() : 0.0}};
        return r;
    }
    std::vector<torch::Tensor> w_cent;
    const auto k = static_cast<int>(model->spec().num_classes);
    for (int64_t i = 0; i < n; ++i)
        w_cent.push_back(centroid_weight_map({b.maps[i]}, hp.beta_cent, centroid_sigma(hp, b.styles[i], k)).data);
    auto layout = model->predict_layout(out.control);
    const auto target = layout_target(b, config, layout.upsample_factor);
    GenLossInputs in{b.eps, out.eps_hat, torch::stack(w_cent), w_snr, x0_hat, b.images,
                     layout.maps, target, TaskMode::gen};
    auto l = total_gen_loss(in, perceptual, hp, step);
    r.total = l.total;
    auto val = [](const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; };
    r.components = {{"eps", val(l.eps)},
                    {"inter", val(l.inter)},
                    {"perceptual", val(l.perceptual)},
                    {"layout_fit", val(l.layout_fit)}};
    return r;
}

std::string serialize_optimizer(const torch::optim::Optimizer& opt) {
    torch::serialize::OutputArchive archive;
    opt.save(archive);
    std::ostringstream os;
    archive.save_to(os);
    return os.str();
}

void restore_optimizer(torch::optim::Optimizer& opt, const std::string& blob) {
    std::istringstream is(blob);
    torch::serialize::InputArchive archive;
    archive.load_from(is);
    opt.load(archive);
}

const std::vector<std::string> kLogColumns = {"eps", "l1", "perceptual", "inter", "layout_fit"};

} // namespace

struct TrainingSession::State {
    TrainConfig config;
    Phase phase = Phase::pretrain;
    const Dataset* data = nullptr;
    int64_t train_count = 0;
    DiffusionModel model{nullptr};
    NoiseSchedule schedule{std::vector<double>{1e-4}};
    RandomConvPerceptual perceptual{kPerceptualSeed};
    std::map<std::string, std::unique_ptr<torch::optim::AdamW>> optimizers;
    int64_t step = 0;
    std::array<double, 2> ema{0.0, 0.0};
    std::array<double, 2> initial_ema{0.0, 0.0};

    void build_optimizers() {
        optimizers.clear();
        if (phase == Phase::pretrain) {
            std::vector<torch::Tensor> params = model->backbone_parameters();
            for (auto& p : model->control_trunk_parameters()) params.push_back(p);
            for (auto& p : model->prompt_parameters()) params.push_back(p);
            for (auto& p : params) p.set_requires_grad(true);
            for (auto& p : model->layout_head_parameters()) p.set_requires_grad(false);
            optimizers["model"] = std::make_unique<torch::optim::AdamW>(
                params, torch::optim::AdamWOptions(config.lr).weight_decay(config.weight_decay));
            return;
        }
        for (auto& p : model->parameters()) p.set_requires_grad(false);
        for (auto& p : model->layout_head_parameters()) p.set_requires_grad(true);
        auto opts = torch::optim::AdamWOptions(config.lr).weight_decay(0.0);
        auto& bank = model->bank();
        if (bank.shared()) {
            // One adapter set serves both modes; the layout head keeps its own state.
            optimizers["shared"] = std::make_unique<torch::optim::AdamW>(bank.parameters(TaskMode::inpaint), opts);
            optimizers["layout"] = std::make_unique<torch::optim::AdamW>(model->layout_head_parameters(), opts);
        } else {
            optimizers["inpaint"] = std::make_unique<torch::optim::AdamW>(bank.parameters(TaskMode::inpaint), opts);
            auto gen = bank.parameters(TaskMode::gen);
            for (auto& p : model->layout_head_parameters()) gen.push_back(p);
            optimizers["gen"] = std::make_unique<torch::optim::AdamW>(gen, opts);
        }
        bank.set_active(TaskMode::inpaint);
    }

    std::vector<torch::optim::AdamW*> optimizers_for(TaskMode mode) {
        if (phase == Phase::pretrain) return {optimizers.at("model").get()};
        if (model->bank().shared()) {
            if (mode == TaskMode::gen) return {optimizers.at("shared").get(), optimizers.at("layout").get()};
            return {optimizers.at("shared").get()};
        }
        return {optimizers.at(to_string(mode)).get()};
    }

    void log_line(const StepRecord& rec) {
        if (config.out_dir.empty() || rec.step % config.log_every != 0) return;
        std::filesystem::create_directories(config.out_dir);
        const auto path = std::filesystem::path(config.out_dir) / ("train_log_" + to_string(phase) + ".csv");
        const bool fresh = !std::filesystem::exists(path);
        std::ofstream out(path, std::ios::app);
        if (!out) throw IoError("cannot append to log '" + path.string() + "'");
        if (fresh) {
            out << "step,mode,total";
            for (const auto& c : kLogColumns) out << ',' << c;
            out << '\n';
        }
        out << rec.step << ',' << to_string(rec.mode) << ',' << rec.loss;
        for (const auto& c : kLogColumns) {
            auto it = rec.components.find(c);
            out << ',' << (it == rec.components.end() ? 0.0 : it->second);
        }
        out << '\n';
    }
};

TrainingSession::TrainingSession(std::unique_ptr<State> state) : state_(std::move(state)) {}
TrainingSession::TrainingSession(TrainingSession&&) noexcept = default;
TrainingSession& TrainingSession::operator=(TrainingSession&&) noexcept = default;
TrainingSession::~TrainingSession() = default;

TrainingSession TrainingSession::start_pretrain(const TrainConfig& config_in, const Dataset& data) {
    if (config_in.phase != Phase::pretrain) throw ConfigError("phase: pretrain requires phase = pretrain");
    auto config = resolve_warmup(config_in);
    config.model.num_classes = data.manifest.num_classes;
    config.model.num_styles = std::max(config.model.num_styles, static_cast<int64_t>(data.manifest.num_styles));
    config.validate();
    apply_determinism(config);
    auto s = std::make_unique<State>();
    s->config = config;
    s->phase = Phase::pretrain;
    s->data = &data;
    s->model = DiffusionModel(config.model, derive_seed(config.seed, 0));
    check_dataset(s->model->spec(), data);
    s->train_count = train_record_count(config, data);
    s->schedule = make_schedule(config.schedule_steps, config.beta_start, config.beta_end);
    s->build_optimizers();
    return TrainingSession(std::move(s));
}

TrainingSession TrainingSession::start_adapters(const TrainConfig& config_in, const Checkpoint& base,
                                                const Dataset& data) {
    if (config_in.phase != Phase::adapters) throw ConfigError("phase: train-adapters requires phase = adapters");
    if (base.phase != Phase::pretrain) throw ConfigError("base checkpoint is not a pretrain checkpoint");
    auto config = resolve_warmup(config_in);
    config.model = base.model->spec();
    config.schedule_steps = base.config.schedule_steps;
    config.beta_start = base.config.beta_start;
    config.beta_end = base.config.beta_end;
    config.validate();
    apply_determinism(config);
    auto s = std::make_unique<State>();
    s->config = config;
    s->phase = Phase::adapters;
    s->data = &data;
    s->model = clone_model(base.model);
    check_dataset(s->model->spec(), data);
    s->train_count = train_record_count(config, data);
    s->schedule = base.schedule();
    if (!s->model->bank().empty()) s->model->bank().check_against(s->model->adapter_registry());
    s->model->install_bank(AdapterBank::create(s->model->adapter_registry(), config.lora_rank,
                                               derive_seed(config.seed, kBankInit), config.shared_adapter,
                                               config.lora_alpha));
    s->build_optimizers();
    return TrainingSession(std::move(s));
}

TrainingSession TrainingSession::resume(const Checkpoint& ckpt, const Dataset& data,
                                        const std::optional<TrainConfig>& override_config) {
    auto config = ckpt.config;
    if (override_config) {
        static const std::set<std::string> kMutable = {"total_steps", "checkpoint_every", "log_every",
                                                       "out_dir", "threads"};
        auto requested = *override_config;
        requested.total_steps = ckpt.config.total_steps;
        requested = resolve_warmup(requested);
        requested.total_steps = override_config->total_steps;
        std::istringstream a(format_config(ckpt.config)), b(format_config(requested));
        std::string la, lb;
        while (std::getline(a, la) && std::getline(b, lb)) {
            const auto key = la.substr(0, la.find(" = "));
            if (la != lb && !kMutable.contains(key)) {
                // Dataset-derived model fields are filled in at start; compare what the user could set.
                if (key == "model.num_classes" || key == "model.num_styles") continue;
                throw ConfigError(key + ": conflicts with the checkpoint (" + la.substr(la.find(" = ") + 3) +
                                  " vs " + lb.substr(lb.find(" = ") + 3) + ")");
            }
        }
        config.total_steps = override_config->total_steps;
        config.checkpoint_every = override_config->checkpoint_every;
        config.log_every = override_config->log_every;
        config.out_dir = override_config->out_dir;
        config.threads = override_config->threads;
    }
    config.validate();
    apply_determinism(config);
    auto s = std::make_unique<State>();
    s->config = config;
    s->phase = ckpt.phase;
    s->data = &data;
    s->model = clone_model(ckpt.model);
    check_dataset(s->model->spec(), data);
    s->train_count = train_record_count(config, data);
    s->schedule = ckpt.schedule();
    s->build_optimizers();
    for (auto& [name, opt] : s->optimizers) {
        auto it = ckpt.optimizer_state.find(name);
        if (it == ckpt.optimizer_state.end())
            throw ConfigError("checkpoint lacks optimizer state '" + name + "'");
        restore_optimizer(*opt, it->second);
    }
    s->step = ckpt.step;
    s->ema = ckpt.ema_loss;
    s->initial_ema = ckpt.initial_ema_loss;
    return TrainingSession(std::move(s));
}

TaskMode TrainingSession::mode_for_step(int64_t step) const {
    return (step / state_->config.alternation_period) % 2 == 0 ? TaskMode::inpaint : TaskMode::gen;
}

TrainBatch TrainingSession::make_batch(int64_t step) const {
    const auto& s = *state_;
    std::mt19937_64 rng(derive_seed(s.config.seed, kIndices, static_cast<uint64_t>(step)));
    std::uniform_int_distribution<int64_t> pick(0, s.train_count - 1);
    std::vector<int64_t> indices(s.config.batch_size);
    for (auto& i : indices) i = pick(rng);
    return build_batch(*s.data, indices, mode_for_step(step), s.config, s.schedule, s.config.seed,
                       static_cast<uint64_t>(step));
}

StepRecord TrainingSession::step() {
    auto& s = *state_;
    if (finished()) throw ValidationError("training session already finished");
    const auto batch = make_batch(s.step);
    auto loss = phase_loss(s.model, batch, s.phase, s.config, s.schedule, s.perceptual, s.step);
    auto opts = s.optimizers_for(batch.mode);
    for (auto* o : opts) o->zero_grad();
    loss.total.backward();
    for (auto* o : opts) o->step();

    StepRecord rec;
    rec.step = s.step;
    rec.mode = batch.mode;
    rec.loss = loss.total.item<double>();
    rec.components = loss.components;
    const int m = mode_index(batch.mode);
    if (s.initial_ema[m] == 0.0) {
        s.initial_ema[m] = rec.loss;
        s.ema[m] = rec.loss;
    } else {
        s.ema[m] = kEmaDecay * s.ema[m] + (1.0 - kEmaDecay) * rec.loss;
    }
    ++s.step;
    s.log_line(rec);
    return rec;
}

void TrainingSession::run(const std::function<void(const StepRecord&)>& observer, std::optional<int64_t> until) {
    auto& s = *state_;
    const int64_t stop = std::min(until.value_or(s.config.total_steps), s.config.total_steps);
    while (s.step < stop) {
        auto rec = step();
        if (observer) observer(rec);
        if (s.config.checkpoint_every > 0 && s.step % s.config.checkpoint_every == 0 && !s.config.out_dir.empty())
            save_checkpoint(checkpoint(), std::filesystem::path(s.config.out_dir) /
                                              ("ckpt_" + to_string(s.phase) + "_" + std::to_string(s.step) + ".pt"));
    }
}

bool TrainingSession::finished() const { return state_->step >= state_->config.total_steps; }
int64_t TrainingSession::current_step() const { return state_->step; }

Checkpoint TrainingSession::checkpoint() const {
    const auto& s = *state_;
    Checkpoint c;
    c.phase = s.phase;
    c.step = s.step;
    c.config = s.config;
    c.model = clone_model(s.model);
    for (const auto& [name, opt] : s.optimizers) c.optimizer_state[name] = serialize_optimizer(*opt);
    c.ema_loss = s.ema;
    c.initial_ema_loss = s.initial_ema;
    return c;
}

DiffusionModel& TrainingSession::model() { return state_->model; }
const TrainConfig& TrainingSession::config() const { return state_->config; }
const NoiseSchedule& TrainingSession::schedule() const { return state_->schedule; }
const PerceptualMetric& TrainingSession::perceptual() const { return state_->perceptual; }

std::vector<torch::Tensor> TrainingSession::trainable_parameters(TaskMode mode) const {
    const auto& s = *state_;
    if (s.phase == Phase::pretrain) {
        auto params = s.model->backbone_parameters();
        for (auto& p : s.model->control_trunk_parameters()) params.push_back(p);
        for (auto& p : s.model->prompt_parameters()) params.push_back(p);
        return params;
    }
    auto params = s.model->bank().parameters(mode);
    if (mode == TaskMode::gen)
        for (auto& p : s.model->layout_head_parameters()) params.push_back(p);
    return params;
}

std::vector<torch::Tensor> TrainingSession::frozen_parameters() const {
    const auto& s = *state_;
    if (s.phase == Phase::pretrain) return s.model->layout_head_parameters();
    auto params = s.model->backbone_parameters();
    for (auto& p : s.model->control_trunk_parameters()) params.push_back(p);
    for (auto& p : s.model->prompt_parameters()) params.push_back(p);
    return params;
}

int64_t TrainingSession::total_parameter_count() const {
    return parameter_count(state_->model->parameters()) + state_->model->bank().parameter_count();
}

int64_t TrainingSession::trainable_parameter_count() const {
    const auto& s = *state_;
    if (s.phase == Phase::pretrain) return parameter_count(trainable_parameters(TaskMode::inpaint));
    return s.model->bank().parameter_count() + parameter_count(s.model->layout_head_parameters());
}

Checkpoint pretrain(const TrainConfig& config, const Dataset& data) {
    auto session = TrainingSession::start_pretrain(config, data);
    session.run();
    return session.checkpoint();
}

Checkpoint train_adapters(const TrainConfig& config, const Checkpoint& base, const Dataset& data) {
    auto session = TrainingSession::start_adapters(config, base, data);
    session.run();
    return session.checkpoint();
}

Checkpoint resume(const Checkpoint& checkpoint, const Dataset& data, const std::optional<TrainConfig>& override_config) {
    auto session = TrainingSession::resume(checkpoint, data, override_config);
    session.run();
    return session.checkpoint();
}

ValidationLoss validation_losses(DiffusionModel& model, const Dataset& data, int64_t first, int64_t count,
                                 const TrainConfig& config, uint64_t seed) {
    if (first < 0 || count < 1 || first + count > static_cast<int64_t>(data.records.size()))
        throw ValidationError("validation_losses: record range outside the dataset");
    torch::NoGradGuard no_grad;
    const auto schedule = make_schedule(config.schedule_steps, config.beta_start, config.beta_end);
    RandomConvPerceptual perceptual(kPerceptualSeed);
    const TaskMode restore = model->bank().active_mode();
    ValidationLoss out;
    const int64_t past_warmup = std::max<int64_t>(config.hp.warmup_steps, 0);
    for (TaskMode mode : {TaskMode::inpaint, TaskMode::gen}) {
        double sum = 0.0;
        int64_t n = 0;
        uint64_t chunk = 0;
        for (int64_t begin = first; begin < first + count; begin += config.batch_size, ++chunk) {
            std::vector<int64_t> idx;
            for (int64_t i = begin; i < std::min(first + count, begin + config.batch_size); ++i) idx.push_back(i);
            const auto b = build_batch(data, idx, mode, config, schedule, derive_seed(seed, kValidation), chunk);
            const auto l = phase_loss(model, b, Phase::adapters, config, schedule, perceptual, past_warmup);
            sum += l.total.item<double>() * static_cast<double>(idx.size());
            n += static_cast<int64_t>(idx.size());
        }
        (mode == TaskMode::inpaint ? out.inpaint : out.gen) = sum / static_cast<double>(n);
    }
    model->bank().set_active(restore);
    return out;
}

} // namespace cdiff
