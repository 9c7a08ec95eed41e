#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cdiff/conditioning.hpp"
#include "cdiff/lora.hpp"
#include "cdiff/types.hpp"

namespace cdiff {

struct DenoiserSpec {
    int64_t image_channels = 3;
    int64_t base_width = 64;
    std::vector<int64_t> channel_mult{1, 2, 2};
    int64_t control_width = 32;
    int64_t time_dim = 128;
    int64_t prompt_dim = 64;
    int64_t num_classes = 3;
    int64_t num_styles = 2;
    int64_t groups = 8;
    int64_t heads = 4;

    void validate() const;
    int64_t levels() const { return static_cast<int64_t>(channel_mult.size()); }
    int64_t condition_channels() const { return kConditionPrefixChannels + num_classes; }
    bool operator==(const DenoiserSpec&) const = default;
};

nlohmann::json to_json(const DenoiserSpec& spec);
DenoiserSpec denoiser_spec_from_json(const nlohmann::json& j);

struct PromptEmbedding {
    torch::Tensor vector; // [prompt_dim]
    int style_label = 0;
    TaskMode mode = TaskMode::gen;
};

// Per-level control-branch outputs (pre zero-projection), finest first, and
// the coarsest-level feature that feeds the middle block.
struct ControlFeatures {
    std::vector<torch::Tensor> levels;
    torch::Tensor middle;
};

struct LayoutPrediction {
    torch::Tensor maps;          // [B, K, H / factor, W / factor] in [0, 1]
    int64_t upsample_factor = 2; // to image resolution
};

// Linear layer that consults an AdapterBank on every forward. Layers built
// without a bank (the frozen denoiser) behave as plain torch Linear.
class LoraLinearImpl : public torch::nn::Module {
public:
    LoraLinearImpl(int64_t in, int64_t out, std::string layer_id,
                   std::shared_ptr<const AdapterBank> bank);
    torch::Tensor forward(const torch::Tensor& x);

    const std::string& layer_id() const { return layer_id_; }
    LayerShape shape() const;
    torch::nn::Linear base{nullptr};

private:
    std::string layer_id_;
    std::shared_ptr<const AdapterBank> bank_;
};
TORCH_MODULE(LoraLinear);

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int64_t in, int64_t out, int64_t emb_dim, int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::Linear emb_proj{nullptr};
};
TORCH_MODULE(ResBlock);

// Multi-head self-attention over spatial positions, residual.
class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int64_t channels, int64_t heads, int64_t groups, const std::string& prefix,
                  std::shared_ptr<const AdapterBank> bank);
    torch::Tensor forward(const torch::Tensor& x);
    std::vector<LayerShape> adapted_layers() const;

private:
    int64_t heads_;
    torch::nn::GroupNorm norm{nullptr};
    LoraLinear qkv{nullptr}, out{nullptr};
};
TORCH_MODULE(Attention);

// Sinusoidal timestep features followed by a two-layer MLP.
class TimeEmbeddingImpl : public torch::nn::Module {
public:
    TimeEmbeddingImpl(int64_t feature_dim, int64_t out_dim, const std::string& prefix,
                      std::shared_ptr<const AdapterBank> bank);
    torch::Tensor forward(const torch::Tensor& t);
    std::vector<LayerShape> adapted_layers() const;

private:
    int64_t feature_dim_;
    LoraLinear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TimeEmbedding);

// Frozen base denoiser: a three-level U-shaped encoder/decoder with
// attention in the middle block and the prompt added to the time embedding.
class UNetImpl : public torch::nn::Module {
public:
    explicit UNetImpl(const DenoiserSpec& spec);

    // control: one residual per encoder level plus one for the middle block,
    // already projected to the denoiser's channel widths; empty for none.
    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t,
                          const torch::Tensor& prompt,
                          const std::vector<torch::Tensor>& control = {});

private:
    DenoiserSpec spec_;
    TimeEmbedding time_embed{nullptr};
    torch::nn::Linear prompt_proj{nullptr};
    torch::nn::Conv2d conv_in{nullptr};
    torch::nn::ModuleList down_blocks, downsamplers;
    ResBlock mid1{nullptr}, mid2{nullptr};
    Attention mid_attn{nullptr};
    torch::nn::ModuleList up_blocks, upsamplers;
    torch::nn::GroupNorm norm_out{nullptr};
    torch::nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(UNet);

// Control-branch block: conv, embedding shift, pointwise mixing, conv.
class ControlBlockImpl : public torch::nn::Module {
public:
    ControlBlockImpl(int64_t in, int64_t out, int64_t emb_dim, int64_t groups,
                     const std::string& prefix, std::shared_ptr<const AdapterBank> bank);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);
    std::vector<LayerShape> adapted_layers() const;

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    LoraLinear emb_proj{nullptr}, mix{nullptr};
};
TORCH_MODULE(ControlBlock);

// Downsampling encoder over the condition tensor. Its outputs reach the
// denoiser only through zero-initialized 1x1 projections.
class ControlBranchImpl : public torch::nn::Module {
public:
    ControlBranchImpl(const DenoiserSpec& spec, std::shared_ptr<const AdapterBank> bank);

    ControlFeatures features(const torch::Tensor& cond, const torch::Tensor& t,
                             const torch::Tensor& prompt);
    std::vector<torch::Tensor> project(const ControlFeatures& features);

    // Every adapted linear layer, in a fixed order.
    std::vector<LayerShape> adapted_layers() const;
    std::vector<torch::Tensor> zero_projection_parameters() const;

private:
    DenoiserSpec spec_;
    TimeEmbedding time_embed{nullptr};
    LoraLinear prompt_proj{nullptr};
    torch::nn::Conv2d stem{nullptr};
    torch::nn::ModuleList blocks, downsamplers;
    Attention attn{nullptr};
    torch::nn::ModuleList zero_proj;
    torch::nn::Conv2d zero_mid{nullptr};
};
TORCH_MODULE(ControlBranch);

// Two convolutions + sigmoid over the finest control feature, predicting
// centroid activations at half resolution.
class LayoutHeadImpl : public torch::nn::Module {
public:
    LayoutHeadImpl(int64_t in_channels, int64_t num_classes);
    torch::Tensor forward(const torch::Tensor& finest);

private:
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(LayoutHead);

struct DenoiseOutput {
    torch::Tensor eps_hat;
    ControlFeatures control;
};

// eps_theta(z_t, t; [hint, m, C], c_txt; phi^(s)) with its parameter groups.
class DiffusionModelImpl : public torch::nn::Module {
public:
    DiffusionModelImpl(const DenoiserSpec& spec, uint64_t seed);

    // Throws ValidationError on shape mismatch, or when the condition's mode
    // disagrees with the bank's active mode.
    torch::Tensor denoise(const torch::Tensor& z_t, const torch::Tensor& t,
                          const ConditionTensor& cond, const torch::Tensor& prompt);
    DenoiseOutput denoise_with_features(const torch::Tensor& z_t, const torch::Tensor& t,
                                        const ConditionTensor& cond,
                                        const torch::Tensor& prompt);
    // The denoiser alone, without any control contribution.
    torch::Tensor base_denoise(const torch::Tensor& z_t, const torch::Tensor& t,
                               const torch::Tensor& prompt);

    PromptEmbedding embed_prompt(int style_label, TaskMode mode);
    // [B, prompt_dim] for per-sample style labels.
    torch::Tensor prompt_batch(const std::vector<int>& style_labels, TaskMode mode);

    LayoutPrediction predict_layout(const ControlFeatures& features);

    const DenoiserSpec& spec() const { return spec_; }
    std::vector<LayerShape> adapter_registry() const { return control->adapted_layers(); }

    AdapterBank& bank() { return *bank_; }
    const AdapterBank& bank() const { return *bank_; }
    // Throws ConfigError if the bank does not match the registry.
    void install_bank(AdapterBank bank);

    std::vector<torch::Tensor> backbone_parameters() const { return unet->parameters(); }
    std::vector<torch::Tensor> control_trunk_parameters() const { return control->parameters(); }
    std::vector<torch::Tensor> prompt_parameters() const { return prompts->parameters(); }
    std::vector<torch::Tensor> layout_head_parameters() const { return layout_head->parameters(); }

    UNet unet{nullptr};
    ControlBranch control{nullptr};
    LayoutHead layout_head{nullptr};
    torch::nn::Embedding prompts{nullptr};

private:
    void check_inputs(const torch::Tensor& z_t, const torch::Tensor& t,
                      const ConditionTensor& cond, const torch::Tensor& prompt) const;

    DenoiserSpec spec_;
    std::shared_ptr<AdapterBank> bank_;
};
TORCH_MODULE(DiffusionModel);

// Order-sensitive FNV-1a digest over the raw bytes of the given tensors.
uint64_t parameter_hash(const std::vector<torch::Tensor>& tensors);
int64_t parameter_count(const std::vector<torch::Tensor>& tensors);

} // namespace cdiff
