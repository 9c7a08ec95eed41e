#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cdiff/backbone.hpp"
#include "cdiff/conditioning.hpp"
#include "cdiff/types.hpp"

namespace cdiff {

// Linear-beta DDPM schedule. Steps are 0-based: alpha_bar(0) = 1 - beta_start.
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> betas);

    int64_t steps() const { return static_cast<int64_t>(betas_.size()); }
    double beta(int64_t t) const { return betas_.at(t); }
    double alpha_bar(int64_t t) const { return alpha_bar_.at(t); }
    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

    // Gathers sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t) for a batch of
    // timesteps, shaped [B, 1, 1, 1] for broadcasting.
    torch::Tensor sqrt_alpha_bar(const torch::Tensor& t) const;
    torch::Tensor sqrt_one_minus_alpha_bar(const torch::Tensor& t) const;

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bar_;
    torch::Tensor alpha_bar_tensor_;
};

// Throws ValidationError unless 0 < beta_start <= beta_end < 1 and T >= 1.
NoiseSchedule make_schedule(int64_t steps, double beta_start, double beta_end);

// z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; t is a long tensor [B].
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);

// x0_hat = (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t). Rejects ab_t == 0.
torch::Tensor predict_x0(const torch::Tensor& z_t, const torch::Tensor& eps_hat,
                         const torch::Tensor& t, const NoiseSchedule& schedule);

// Scalar forms, useful for reasoning about single coefficients.
double q_sample_scalar(double x0, double eps, double alpha_bar);
double predict_x0_scalar(double z_t, double eps_hat, double alpha_bar);

// min(SNR_t, gamma) / SNR_t with SNR clamped to a finite positive range.
double min_snr_weight(int64_t t, const NoiseSchedule& schedule, double gamma);
double min_snr_weight_from_alpha_bar(double alpha_bar, double gamma);
// Per-sample weights for a batch of timesteps, float [B].
torch::Tensor min_snr_weights(const torch::Tensor& t, const NoiseSchedule& schedule,
                              double gamma);

// Dataset space [0, 1] <-> model space [-1, 1].
torch::Tensor to_model_space(const torch::Tensor& x);
torch::Tensor to_data_space(const torch::Tensor& x);

enum class SamplerKind { ancestral, deterministic };
std::string to_string(SamplerKind kind);
SamplerKind parse_sampler_kind(const std::string& text);

struct SamplerConfig {
    int64_t steps = 50;
    SamplerKind kind = SamplerKind::deterministic;
    uint64_t seed = 0;
    bool composite_known_region = false;

    void validate(const NoiseSchedule& schedule) const;
};

// Descending, evenly spaced subsequence of [0, T) of length `steps`.
std::vector<int64_t> sampling_timesteps(int64_t schedule_steps, int64_t steps);

// Runs the reverse process from pure noise under [0, 0, C]. maps is a batch
// [B, K, H, W]; prompts is [B, prompt_dim]. Returns [B, 3, H, W] in [0, 1].
// Throws ValidationError when the bank is not in gen mode.
torch::Tensor sample_generation(DiffusionModel& model, const torch::Tensor& maps,
                                const torch::Tensor& prompts, const SamplerConfig& config,
                                const NoiseSchedule& schedule);

// Reverse process under [x (1 - m), m, C]. images [B, 3, H, W] in [0, 1],
// masks [B, H, W]. With composite_known_region the known pixels are copied
// back from the input. Throws ValidationError when the bank is not in
// inpaint mode.
torch::Tensor sample_inpaint(DiffusionModel& model, const torch::Tensor& images,
                             const torch::Tensor& masks, const torch::Tensor& maps,
                             const torch::Tensor& prompts, const SamplerConfig& config,
                             const NoiseSchedule& schedule);

} // namespace cdiff
