#include "cdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cdiff/errors.hpp"
#include "cdiff/random.hpp"

namespace cdiff {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    double prod = 1.0;
    for (double b : betas_) {
        prod *= 1.0 - b;
        alpha_bar_.push_back(prod);
    }
    alpha_bar_tensor_ = torch::tensor(alpha_bar_, torch::kFloat64);
}

namespace {

torch::Tensor gather_coeff(const torch::Tensor& table, const torch::Tensor& t, int64_t steps) {
    if (t.dim() != 1) throw ValidationError("timesteps must be a [B] tensor");
    if ((t < 0).any().item<bool>() || (t >= steps).any().item<bool>()) {
        std::ostringstream os;
        os << "timestep outside the schedule range [0, " << steps << ")";
        throw ValidationError(os.str());
    }
    return table.index_select(0, t.to(torch::kLong)).view({-1, 1, 1, 1});
}

} // namespace

torch::Tensor NoiseSchedule::sqrt_alpha_bar(const torch::Tensor& t) const {
    return gather_coeff(alpha_bar_tensor_, t, steps()).sqrt();
}

torch::Tensor NoiseSchedule::sqrt_one_minus_alpha_bar(const torch::Tensor& t) const {
    return (1.0 - gather_coeff(alpha_bar_tensor_, t, steps())).sqrt();
}

NoiseSchedule make_schedule(int64_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw ValidationError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ValidationError("make_schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(steps);
    for (int64_t i = 0; i < steps; ++i)
        betas[i] = steps == 1 ? beta_start
                              : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                                 static_cast<double>(steps - 1);
    return NoiseSchedule(std::move(betas));
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
    if (!x0.sizes().equals(eps.sizes())) throw ValidationError("q_sample: eps must match x0's shape");
    if (x0.dim() != 4 || t.size(0) != x0.size(0)) throw ValidationError("q_sample: expects [B, C, H, W] and t of size B");
    const auto a = schedule.sqrt_alpha_bar(t).to(x0.dtype());
    const auto s = schedule.sqrt_one_minus_alpha_bar(t).to(x0.dtype());
    return a * x0 + s * eps;
}

torch::Tensor predict_x0(const torch::Tensor& z_t, const torch::Tensor& eps_hat, const torch::Tensor& t,
                         const NoiseSchedule& schedule) {
    if (!z_t.sizes().equals(eps_hat.sizes())) throw ValidationError("predict_x0: shapes disagree");
    const auto a = schedule.sqrt_alpha_bar(t);
    if ((a == 0).any().item<bool>()) throw ValidationError("predict_x0: alpha_bar_t = 0 is not invertible");
    const auto s = schedule.sqrt_one_minus_alpha_bar(t).to(z_t.dtype());
    return (z_t - s * eps_hat) / a.to(z_t.dtype());
}

double q_sample_scalar(double x0, double eps, double alpha_bar) {
    return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

double predict_x0_scalar(double z_t, double eps_hat, double alpha_bar) {
    if (alpha_bar <= 0.0) throw ValidationError("predict_x0: alpha_bar_t = 0 is not invertible");
    return (z_t - std::sqrt(1.0 - alpha_bar) * eps_hat) / std::sqrt(alpha_bar);
}

double min_snr_weight_from_alpha_bar(double alpha_bar, double gamma) {
    if (!(gamma > 0.0)) throw ValidationError("min_snr_weight: gamma must be > 0");
    constexpr double kMinSnr = 1e-10, kMaxSnr = 1e10;
    const double snr = std::clamp(alpha_bar / std::max(1.0 - alpha_bar, 1e-300), kMinSnr, kMaxSnr);
    return std::min(snr, gamma) / snr;
}

double min_snr_weight(int64_t t, const NoiseSchedule& schedule, double gamma) {
    return min_snr_weight_from_alpha_bar(schedule.alpha_bar(t), gamma);
}

torch::Tensor min_snr_weights(const torch::Tensor& t, const NoiseSchedule& schedule, double gamma) {
    auto tl = t.to(torch::kLong).contiguous();
    std::vector<float> w;
    for (int64_t i = 0; i < tl.size(0); ++i)
        w.push_back(static_cast<float>(min_snr_weight(tl[i].item<int64_t>(), schedule, gamma)));
    return torch::tensor(w, torch::kFloat32);
}

torch::Tensor to_model_space(const torch::Tensor& x) { return x * 2.0 - 1.0; }
torch::Tensor to_data_space(const torch::Tensor& x) { return ((x + 1.0) * 0.5).clamp(0.0, 1.0); }

std::string to_string(SamplerKind kind) {
    return kind == SamplerKind::ancestral ? "ancestral" : "det";
}

SamplerKind parse_sampler_kind(const std::string& text) {
    if (text == "ancestral") return SamplerKind::ancestral;
    if (text == "det" || text == "deterministic") return SamplerKind::deterministic;
    throw ValidationError("unknown sampler '" + text + "' (expected ancestral or det)");
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
    if (steps < 1 || steps > schedule.steps()) {
        std::ostringstream os;
        os << "sampler steps must lie in [1, " << schedule.steps() << "], got " << steps;
        throw ValidationError(os.str());
    }
}

std::vector<int64_t> sampling_timesteps(int64_t schedule_steps, int64_t steps) {
    std::vector<int64_t> ts;
    if (steps == 1) return {schedule_steps - 1};
    for (int64_t i = steps - 1; i >= 0; --i)
        ts.push_back(static_cast<int64_t>(std::llround(static_cast<double>(i) * (schedule_steps - 1) /
                                                      static_cast<double>(steps - 1))));
    return ts;
}

namespace {

torch::Tensor reverse_process(DiffusionModel& model, const ConditionTensor& cond,
                              const torch::Tensor& prompts, const SamplerConfig& config,
                              const NoiseSchedule& schedule) {
    config.validate(schedule);
    torch::NoGradGuard no_grad;
    const int64_t b = cond.data.size(0), h = cond.data.size(2), w = cond.data.size(3);
    auto gen = make_generator(config.seed);
    auto z = torch::randn({b, 3, h, w}, gen, torch::kFloat32);
    const auto ts = sampling_timesteps(schedule.steps(), config.steps);
    torch::Tensor x0;
    for (size_t i = 0; i < ts.size(); ++i) {
        const int64_t t = ts[i];
        const double ab = schedule.alpha_bar(t);
        const double ab_prev = i + 1 < ts.size() ? schedule.alpha_bar(ts[i + 1]) : 1.0;
        auto tt = torch::full({b}, t, torch::kLong);
        auto eps = model->denoise(z, tt, cond, prompts);
        x0 = ((z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).clamp(-1.0, 1.0);
        if (i + 1 == ts.size()) break;
        auto eps_dir = (z - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
        if (config.kind == SamplerKind::deterministic) {
            z = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps_dir;
        } else {
            const double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
            const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
            z = std::sqrt(ab_prev) * x0 + dir * eps_dir +
                sigma * torch::randn({b, 3, h, w}, gen, torch::kFloat32);
        }
    }
    return to_data_space(x0);
}

void require_mode(const DiffusionModel& model, TaskMode mode, const char* who) {
    if (model->bank().active_mode() != mode)
        throw ValidationError(std::string(who) + " requires the " + to_string(mode) +
                              " adapters to be active, but the bank is in " +
                              to_string(model->bank().active_mode()) + " mode");
}

} // namespace

torch::Tensor sample_generation(DiffusionModel& model, const torch::Tensor& maps,
                                const torch::Tensor& prompts, const SamplerConfig& config,
                                const NoiseSchedule& schedule) {
    require_mode(model, TaskMode::gen, "sample_generation");
    if (maps.dim() != 4) throw ValidationError("sample_generation: maps must be [B, K, H, W]");
    std::vector<ConditionTensor> conds;
    for (int64_t i = 0; i < maps.size(0); ++i)
        conds.push_back(build_condition(std::nullopt, std::nullopt, {maps[i]}, TaskMode::gen));
    return reverse_process(model, stack_conditions(conds), prompts, config, schedule);
}

torch::Tensor sample_inpaint(DiffusionModel& model, const torch::Tensor& images,
                             const torch::Tensor& masks, const torch::Tensor& maps,
                             const torch::Tensor& prompts, const SamplerConfig& config,
                             const NoiseSchedule& schedule) {
    require_mode(model, TaskMode::inpaint, "sample_inpaint");
    if (images.dim() != 4 || masks.dim() != 3 || maps.dim() != 4 || images.size(0) != masks.size(0) ||
        images.size(0) != maps.size(0))
        throw ValidationError("sample_inpaint: expects images [B,3,H,W], masks [B,H,W], maps [B,K,H,W]");
    if (images.size(2) != masks.size(1) || images.size(3) != masks.size(2))
        throw ValidationError("sample_inpaint: mask and image sizes disagree");
    std::vector<ConditionTensor> conds;
    for (int64_t i = 0; i < images.size(0); ++i)
        conds.push_back(build_condition(images[i], BinaryMask{masks[i]}, {maps[i]}, TaskMode::inpaint));
    auto out = reverse_process(model, stack_conditions(conds), prompts, config, schedule);
    if (config.composite_known_region) {
        auto hole = (masks > 0.5).unsqueeze(1).expand_as(images);
        out = torch::where(hole, out, images);
    }
    return out;
}

} // namespace cdiff
