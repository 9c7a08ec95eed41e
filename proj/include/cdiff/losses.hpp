#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cdiff/types.hpp"

namespace cdiff {

// Loss weights and gates left open by the method description.
struct HyperParams {
    double lambda_l1 = 1.0;
    double lambda_lpips = 0.5;      // inpaint-side perceptual weight
    double lambda_lpips_gen = 0.05; // deliberately weak gen-side weight
    double w_inter = 0.1;
    double lambda_mask = 3.0;
    double beta_cent = 1.0;
    double sigma_cent = 0.0;        // <= 0: use the cell radius
    double gamma_snr = 5.0;
    double soft_mask_sigma = 2.0;
    int64_t warmup_steps = 0;
    bool layout_fit = true;         // BCE fit of the layout head to smoothed maps
    double layout_fit_weight = 0.1;
    bool masked_perceptual = false; // inpaint perceptual term restricted to the hole

    void validate() const;
    bool operator==(const HyperParams&) const = default;
};

nlohmann::json to_json(const HyperParams& hp);
HyperParams hyperparams_from_json(const nlohmann::json& j);

// Maps two equal-shaped image batches [B, 3, H, W] (or [3, H, W]) in [0, 1]
// to a non-negative scalar (batch mean). Implementations must be symmetric,
// zero on identical inputs, differentiable and deterministic.
class PerceptualMetric {
public:
    virtual ~PerceptualMetric() = default;
    virtual torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b) const = 0;
    virtual std::string name() const = 0;
    virtual uint64_t seed() const = 0;
};

// Pixel MSE plus unit-normalized feature distances from a fixed random
// convolutional stack at three scales. No learned weights.
class RandomConvPerceptual final : public PerceptualMetric {
public:
    explicit RandomConvPerceptual(uint64_t seed = 0);
    torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b) const override;
    std::string name() const override { return "random-conv-lpips"; }
    uint64_t seed() const override { return seed_; }

private:
    uint64_t seed_;
    std::vector<torch::Tensor> weights_;
    std::vector<torch::Tensor> biases_;
};

torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b,
                                  const PerceptualMetric& metric);

// mean(((eps - eps_hat) * w_mask * w_snr)^2). w_mask broadcasts over channels
// ([H, W], [B, H, W] or [B, 1, H, W]); w_snr is a scalar or per-sample [B].
torch::Tensor loss_eps_inpaint(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                               const torch::Tensor& w_mask, const torch::Tensor& w_snr);
torch::Tensor loss_eps_gen(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                           const torch::Tensor& w_cent, const torch::Tensor& w_snr);

// lambda_L1 * mean(|x0_hat - x| * m_soft) plus lambda_LPIPS * perceptual once
// step >= warmup_steps. With hp.masked_perceptual the perceptual term compares
// x0_hat * m_soft + x * (1 - m_soft) against x.
torch::Tensor loss_img(const torch::Tensor& x0_hat, const torch::Tensor& x,
                       const torch::Tensor& m_soft, const PerceptualMetric& perceptual,
                       const HyperParams& hp, int64_t step);

// Mean pairwise overlap 2/(K(K-1)) sum_{i<j} <C_i, C_j>/(H W) of
// [K, H, W] or [B, K, H, W] maps (batch-averaged). K < 2 yields 0.
torch::Tensor loss_inter(const torch::Tensor& c_hat);

// Binary cross-entropy of the layout head against its target maps.
torch::Tensor layout_fit_loss(const torch::Tensor& c_hat, const torch::Tensor& target);

struct InpaintLossInputs {
    torch::Tensor eps, eps_hat;
    torch::Tensor w_mask;   // [B, H, W]
    torch::Tensor w_snr;    // [B]
    torch::Tensor x0_hat, x; // data space [B, 3, H, W]
    torch::Tensor m_soft;   // [B, H, W]
    TaskMode mode = TaskMode::inpaint;
};

struct GenLossInputs {
    torch::Tensor eps, eps_hat;
    torch::Tensor w_cent;   // [B, H, W]
    torch::Tensor w_snr;    // [B]
    torch::Tensor x0_hat, x;
    torch::Tensor c_hat;    // [B, K, H', W']
    torch::Tensor layout_target; // [B, K, H', W'], used when hp.layout_fit
    TaskMode mode = TaskMode::gen;
};

struct InpaintLoss {
    torch::Tensor total, eps, l1, perceptual;
};

struct GenLoss {
    torch::Tensor total, eps, inter, perceptual, layout_fit;
};

// L_eps^inpaint + lambda_L1 * L1 + [warm] lambda_LPIPS * LPIPS.
InpaintLoss total_inpaint_loss(const InpaintLossInputs& in, const PerceptualMetric& perceptual,
                               const HyperParams& hp, int64_t step);
// L_eps^gen + w_inter L_inter + [warm] lambda_LPIPS_gen LPIPS
// (+ layout_fit_weight * BCE when hp.layout_fit).
GenLoss total_gen_loss(const GenLossInputs& in, const PerceptualMetric& perceptual,
                       const HyperParams& hp, int64_t step);

} // namespace cdiff
