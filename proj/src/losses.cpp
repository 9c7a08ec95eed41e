#include "cdiff/losses.hpp"

#include <iostream>

#include "cdiff/errors.hpp"

namespace cdiff {

void HyperParams::validate() const {
    for (double v : {lambda_l1, lambda_lpips, lambda_lpips_gen, w_inter, beta_cent, layout_fit_weight,
                     soft_mask_sigma})
        if (v < 0.0) throw ValidationError("HyperParams: coefficients must be >= 0");
    if (lambda_mask < 1.0) throw ValidationError("HyperParams: lambda_mask must be >= 1");
    if (!(gamma_snr > 0.0)) throw ValidationError("HyperParams: gamma_snr must be > 0");
    if (warmup_steps < 0) throw ValidationError("HyperParams: warmup_steps must be >= 0");
}

nlohmann::json to_json(const HyperParams& hp) {
    return {{"lambda_l1", hp.lambda_l1},
            {"lambda_lpips", hp.lambda_lpips},
            {"lambda_lpips_gen", hp.lambda_lpips_gen},
            {"w_inter", hp.w_inter},
            {"lambda_mask", hp.lambda_mask},
            {"beta_cent", hp.beta_cent},
            {"sigma_cent", hp.sigma_cent},
            {"gamma_snr", hp.gamma_snr},
            {"soft_mask_sigma", hp.soft_mask_sigma},
            {"warmup_steps", hp.warmup_steps},
            {"layout_fit", hp.layout_fit},
            {"layout_fit_weight", hp.layout_fit_weight},
            {"masked_perceptual", hp.masked_perceptual},
            {"reduction", "mean"}};
}

HyperParams hyperparams_from_json(const nlohmann::json& j) {
    HyperParams hp;
    hp.lambda_l1 = j.at("lambda_l1").get<double>();
    hp.lambda_lpips = j.at("lambda_lpips").get<double>();
    hp.lambda_lpips_gen = j.at("lambda_lpips_gen").get<double>();
    hp.w_inter = j.at("w_inter").get<double>();
    hp.lambda_mask = j.at("lambda_mask").get<double>();
    hp.beta_cent = j.at("beta_cent").get<double>();
    hp.sigma_cent = j.at("sigma_cent").get<double>();
    hp.gamma_snr = j.at("gamma_snr").get<double>();
    hp.soft_mask_sigma = j.at("soft_mask_sigma").get<double>();
    hp.warmup_steps = j.at("warmup_steps").get<int64_t>();
    hp.layout_fit = j.at("layout_fit").get<bool>();
    hp.layout_fit_weight = j.at("layout_fit_weight").get<double>();
    hp.masked_perceptual = j.at("masked_perceptual").get<bool>();
    return hp;
}

namespace {

// Spatial weights [H, W] / [B, H, W] / [B, 1, H, W] against a [B, C, H, W]
// residual; anything else must already broadcast.
torch::Tensor spatial_weight(const torch::Tensor& w, const torch::Tensor& like) {
    if (like.dim() == 4 && w.dim() == 3) return w.unsqueeze(1);
    return w;
}

torch::Tensor sample_weight(const torch::Tensor& w, const torch::Tensor& like) {
    if (w.dim() == 1 && like.dim() == 4 && w.size(0) == like.size(0)) return w.view({-1, 1, 1, 1});
    return w;
}

torch::Tensor weighted_eps_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                                const torch::Tensor& w_spatial, const torch::Tensor& w_snr,
                                const char* who) {
    if (!eps.sizes().equals(eps_hat.sizes())) throw ValidationError(std::string(who) + ": eps shapes disagree");
    if ((w_spatial < 0).any().item<bool>() || (w_snr < 0).any().item<bool>())
        throw ValidationError(std::string(who) + ": weights must be non-negative");
    auto r = (eps - eps_hat) * spatial_weight(w_spatial, eps).to(eps.dtype()) *
             sample_weight(w_snr, eps).to(eps.dtype());
    return r.pow(2).mean();
}

} // namespace

torch::Tensor loss_eps_inpaint(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                               const torch::Tensor& w_mask, const torch::Tensor& w_snr) {
    return weighted_eps_loss(eps, eps_hat, w_mask, w_snr, "loss_eps_inpaint");
}

torch::Tensor loss_eps_gen(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                           const torch::Tensor& w_cent, const torch::Tensor& w_snr) {
    return weighted_eps_loss(eps, eps_hat, w_cent, w_snr, "loss_eps_gen");
}

namespace {

torch::Tensor soft_l1(const torch::Tensor& x0_hat, const torch::Tensor& x, const torch::Tensor& m_soft) {
    if (!x0_hat.sizes().equals(x.sizes())) throw ValidationError("loss_img: image shapes disagree");
    return ((x0_hat - x).abs() * spatial_weight(m_soft, x).to(x.dtype())).mean();
}

torch::Tensor inpaint_perceptual(const torch::Tensor& x0_hat, const torch::Tensor& x,
                                 const torch::Tensor& m_soft, const PerceptualMetric& metric,
                                 const HyperParams& hp) {
    if (!hp.masked_perceptual) return metric.distance(x0_hat, x);
    const auto m = spatial_weight(m_soft, x).to(x.dtype());
    return metric.distance(x0_hat * m + x * (1.0 - m), x);
}

} // namespace

torch::Tensor loss_img(const torch::Tensor& x0_hat, const torch::Tensor& x, const torch::Tensor& m_soft,
                       const PerceptualMetric& perceptual, const HyperParams& hp, int64_t step) {
    auto loss = hp.lambda_l1 * soft_l1(x0_hat, x, m_soft);
    if (step >= hp.warmup_steps && hp.lambda_lpips > 0.0)
        loss = loss + hp.lambda_lpips * inpaint_perceptual(x0_hat, x, m_soft, perceptual, hp);
    return loss;
}

torch::Tensor loss_inter(const torch::Tensor& c_hat) {
    auto c = c_hat.dim() == 3 ? c_hat.unsqueeze(0) : c_hat;
    if (c.dim() != 4) throw ValidationError("loss_inter: expects [K, H, W] or [B, K, H, W]");
    const int64_t k = c.size(1);
    if (k < 2) {
        std::cerr << "warning: loss_inter with K < 2 has no class pairs; returning 0\n";
        return torch::zeros({}, c.options());
    }
    // sum_{i<j} C_i C_j = ((sum_k C_k)^2 - sum_k C_k^2) / 2, per pixel.
    auto s = c.sum(1);
    auto pairs = (s * s - (c * c).sum(1)) * 0.5;
    return pairs.mean() * (2.0 / static_cast<double>(k * (k - 1)));
}

torch::Tensor layout_fit_loss(const torch::Tensor& c_hat, const torch::Tensor& target) {
    if (!c_hat.sizes().equals(target.sizes()))
        throw ValidationError("layout_fit_loss: prediction and target shapes disagree");
    return torch::binary_cross_entropy(c_hat, target.to(c_hat.dtype()));
}

InpaintLoss total_inpaint_loss(const InpaintLossInputs& in, const PerceptualMetric& perceptual,
                               const HyperParams& hp, int64_t step) {
    if (in.mode != TaskMode::inpaint) throw ValidationError("total_inpaint_loss: inputs are not from an inpaint batch");
    InpaintLoss out;
    out.eps = loss_eps_inpaint(in.eps, in.eps_hat, in.w_mask, in.w_snr);
    out.l1 = soft_l1(in.x0_hat, in.x, in.m_soft);
    out.total = out.eps + hp.lambda_l1 * out.l1;
    if (step >= hp.warmup_steps && hp.lambda_lpips > 0.0) {
        out.perceptual = inpaint_perceptual(in.x0_hat, in.x, in.m_soft, perceptual, hp);
        out.total = out.total + hp.lambda_lpips * out.perceptual;
    } else {
        out.perceptual = torch::zeros({}, out.eps.options());
    }
    return out;
}

GenLoss total_gen_loss(const GenLossInputs& in, const PerceptualMetric& perceptual,
                       const HyperParams& hp, int64_t step) {
    if (in.mode != TaskMode::gen) throw ValidationError("total_gen_loss: inputs are not from a gen batch");
    GenLoss out;
    const auto zero = torch::zeros({}, in.eps.options());
    out.eps = loss_eps_gen(in.eps, in.eps_hat, in.w_cent, in.w_snr);
    out.total = out.eps;
    out.inter = zero;
    if (hp.w_inter > 0.0) {
        out.inter = loss_inter(in.c_hat);
        out.total = out.total + hp.w_inter * out.inter;
    }
    out.perceptual = zero;
    if (step >= hp.warmup_steps && hp.lambda_lpips_gen > 0.0) {
        out.perceptual = perceptual.distance(in.x0_hat, in.x);
        out.total = out.total + hp.lambda_lpips_gen * out.perceptual;
    }
    out.layout_fit = zero;
    if (hp.layout_fit && hp.layout_fit_weight > 0.0) {
        out.layout_fit = layout_fit_loss(in.c_hat, in.layout_target);
        out.total = out.total + hp.layout_fit_weight * out.layout_fit;
    }
    return out;
}

torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b,
                                  const PerceptualMetric& metric) {
    if (!a.sizes().equals(b.sizes())) throw ValidationError("perceptual_distance: shapes disagree");
    return metric.distance(a, b);
}

} // namespace cdiff
