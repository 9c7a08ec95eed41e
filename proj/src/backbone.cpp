#include "cdiff/backbone.hpp"

#include <cmath>
#include <sstream>

#include "cdiff/errors.hpp"

namespace cdiff {
namespace nn = torch::nn;

void DenoiserSpec::validate() const {
    if (image_channels != 3) throw ValidationError("DenoiserSpec: image_channels must be 3");
    if (base_width < 1 || control_width < 1 || time_dim < 2 || prompt_dim < 1)
        throw ValidationError("DenoiserSpec: widths and embedding sizes must be positive");
    if (channel_mult.empty()) throw ValidationError("DenoiserSpec: channel_mult must be non-empty");
    if (num_classes < 1 || num_styles < 1)
        throw ValidationError("DenoiserSpec: num_classes and num_styles must be >= 1");
    for (int64_t m : channel_mult) {
        if (m < 1) throw ValidationError("DenoiserSpec: channel multipliers must be >= 1");
        if ((base_width * m) % groups || (control_width * m) % groups)
            throw ValidationError("DenoiserSpec: every level width must be divisible by groups");
        if ((control_width * m) % heads || (base_width * m) % heads)
            throw ValidationError("DenoiserSpec: every level width must be divisible by heads");
    }
}

nlohmann::json to_json(const DenoiserSpec& s) {
    return {{"image_channels", s.image_channels}, {"base_width", s.base_width},
            {"channel_mult", s.channel_mult},     {"control_width", s.control_width},
            {"time_dim", s.time_dim},             {"prompt_dim", s.prompt_dim},
            {"num_classes", s.num_classes},       {"num_styles", s.num_styles},
            {"groups", s.groups},                 {"heads", s.heads}};
}

DenoiserSpec denoiser_spec_from_json(const nlohmann::json& j) {
    DenoiserSpec s;
    s.image_channels = j.at("image_channels").get<int64_t>();
    s.base_width = j.at("base_width").get<int64_t>();
    s.channel_mult = j.at("channel_mult").get<std::vector<int64_t>>();
    s.control_width = j.at("control_width").get<int64_t>();
    s.time_dim = j.at("time_dim").get<int64_t>();
    s.prompt_dim = j.at("prompt_dim").get<int64_t>();
    s.num_classes = j.at("num_classes").get<int64_t>();
    s.num_styles = j.at("num_styles").get<int64_t>();
    s.groups = j.at("groups").get<int64_t>();
    s.heads = j.at("heads").get<int64_t>();
    return s;
}

// ---------------------------------------------------------------------------

LoraLinearImpl::LoraLinearImpl(int64_t in, int64_t out, std::string layer_id,
                               std::shared_ptr<const AdapterBank> bank)
    : layer_id_(std::move(layer_id)), bank_(std::move(bank)) {
    base = register_module("base", nn::Linear(in, out));
}

torch::Tensor LoraLinearImpl::forward(const torch::Tensor& x) {
    auto y = base->forward(x);
    if (bank_) {
        if (const LoraAdapter* a = bank_->active_adapter(layer_id_)) y = y + adapter_delta(x, *a);
    }
    return y;
}

LayerShape LoraLinearImpl::shape() const {
    return {layer_id_, base->weight.size(0), base->weight.size(1)};
}

namespace {

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

nn::Conv2d conv1x1(int64_t in, int64_t out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 1)); }

torch::Tensor broadcast_emb(const torch::Tensor& e) { return e.unsqueeze(-1).unsqueeze(-1); }

// Applies a linear layer over the channel axis of an NCHW tensor.
torch::Tensor pointwise(LoraLinear& layer, const torch::Tensor& x) {
    return layer->forward(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

void zero_init(nn::Conv2d& conv) {
    torch::NoGradGuard guard;
    conv->weight.zero_();
    conv->bias.zero_();
}

} // namespace

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t emb_dim, int64_t groups) {
    norm1 = register_module("norm1", nn::GroupNorm(groups, in));
    conv1 = register_module("conv1", conv3x3(in, out));
    emb_proj = register_module("emb_proj", nn::Linear(emb_dim, out));
    norm2 = register_module("norm2", nn::GroupNorm(groups, out));
    conv2 = register_module("conv2", conv3x3(out, out));
    if (in != out) skip = register_module("skip", conv1x1(in, out));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1->forward(torch::silu(norm1->forward(x)));
    h = h + broadcast_emb(emb_proj->forward(torch::silu(emb)));
    h = conv2->forward(torch::silu(norm2->forward(h)));
    return (skip ? skip->forward(x) : x) + h;
}

AttentionImpl::AttentionImpl(int64_t channels, int64_t heads, int64_t groups,
                             const std::string& prefix, std::shared_ptr<const AdapterBank> bank)
    : heads_(heads) {
    norm = register_module("norm", nn::GroupNorm(groups, channels));
    qkv = register_module("qkv", LoraLinear(channels, 3 * channels, prefix + ".qkv", bank));
    out = register_module("out", LoraLinear(channels, channels, prefix + ".out", bank));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x) {
    const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    const int64_t d = c / heads_;
    auto tokens = norm->forward(x).flatten(2).transpose(1, 2); // [B, HW, C]
    auto parts = qkv->forward(tokens).chunk(3, -1);
    auto split = [&](const torch::Tensor& t) { return t.view({b, h * w, heads_, d}).transpose(1, 2); };
    auto q = split(parts[0]), k = split(parts[1]), v = split(parts[2]);
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d)), -1);
    auto mixed = torch::matmul(attn, v).transpose(1, 2).reshape({b, h * w, c});
    return x + out->forward(mixed).transpose(1, 2).view({b, c, h, w});
}

std::vector<LayerShape> AttentionImpl::adapted_layers() const {
    return {qkv->shape(), out->shape()};
}

TimeEmbeddingImpl::TimeEmbeddingImpl(int64_t feature_dim, int64_t out_dim, const std::string& prefix,
                                     std::shared_ptr<const AdapterBank> bank)
    : feature_dim_(feature_dim) {
    fc1 = register_module("fc1", LoraLinear(feature_dim, out_dim, prefix + ".fc1", bank));
    fc2 = register_module("fc2", LoraLinear(out_dim, out_dim, prefix + ".fc2", bank));
}

torch::Tensor TimeEmbeddingImpl::forward(const torch::Tensor& t) {
    const int64_t half = feature_dim_ / 2;
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
    auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    auto feats = torch::cat({torch::sin(args), torch::cos(args)}, 1);
    if (feats.size(1) < feature_dim_) feats = torch::nn::functional::pad(
        feats, torch::nn::functional::PadFuncOptions({0, feature_dim_ - feats.size(1)}));
    return fc2->forward(torch::silu(fc1->forward(feats)));
}

std::vector<LayerShape> TimeEmbeddingImpl::adapted_layers() const {
    return {fc1->shape(), fc2->shape()};
}

// ---------------------------------------------------------------------------

UNetImpl::UNetImpl(const DenoiserSpec& spec) : spec_(spec) {
    const int64_t levels = spec.levels();
    auto width = [&](int64_t l) { return spec.base_width * spec.channel_mult[l]; };
    time_embed = register_module("time_embed", TimeEmbedding(spec.base_width, spec.time_dim, "unet.time", nullptr));
    prompt_proj = register_module("prompt_proj", nn::Linear(spec.prompt_dim, spec.time_dim));
    conv_in = register_module("conv_in", conv3x3(spec.image_channels, width(0)));
    down_blocks = register_module("down_blocks", nn::ModuleList());
    downsamplers = register_module("downsamplers", nn::ModuleList());
    int64_t prev = width(0);
    for (int64_t l = 0; l < levels; ++l) {
        down_blocks->push_back(ResBlock(prev, width(l), spec.time_dim, spec.groups));
        prev = width(l);
        if (l + 1 < levels) downsamplers->push_back(conv3x3(prev, prev, 2));
    }
    mid1 = register_module("mid1", ResBlock(prev, prev, spec.time_dim, spec.groups));
    mid_attn = register_module("mid_attn", Attention(prev, spec.heads, spec.groups, "unet.mid_attn", nullptr));
    mid2 = register_module("mid2", ResBlock(prev, prev, spec.time_dim, spec.groups));
    up_blocks = register_module("up_blocks", nn::ModuleList());
    upsamplers = register_module("upsamplers", nn::ModuleList());
    for (int64_t l = levels - 1; l >= 0; --l) {
        up_blocks->push_back(ResBlock(prev + width(l), width(l), spec.time_dim, spec.groups));
        prev = width(l);
        if (l > 0) upsamplers->push_back(conv3x3(prev, prev));
    }
    norm_out = register_module("norm_out", nn::GroupNorm(spec.groups, width(0)));
    conv_out = register_module("conv_out", conv3x3(width(0), spec.image_channels));
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z, const torch::Tensor& t,
                                const torch::Tensor& prompt,
                                const std::vector<torch::Tensor>& control) {
    const int64_t levels = spec_.levels();
    if (!control.empty() && static_cast<int64_t>(control.size()) != levels + 1)
        throw ValidationError("UNet: expected one control residual per level plus the middle block");
    auto emb = time_embed->forward(t) + prompt_proj->forward(prompt);
    auto h = conv_in->forward(z);
    std::vector<torch::Tensor> skips;
    for (int64_t l = 0; l < levels; ++l) {
        h = down_blocks[l]->as<ResBlock>()->forward(h, emb);
        skips.push_back(control.empty() ? h : h + control[l]);
        if (l + 1 < levels) h = downsamplers[l]->as<nn::Conv2d>()->forward(h);
    }
    h = mid2->forward(mid_attn->forward(mid1->forward(h, emb)), emb);
    if (!control.empty()) h = h + control[levels];
    for (int64_t i = 0, l = levels - 1; l >= 0; ++i, --l) {
        h = up_blocks[i]->as<ResBlock>()->forward(torch::cat({h, skips[l]}, 1), emb);
        if (l > 0) {
            h = torch::nn::functional::interpolate(
                h, torch::nn::functional::InterpolateFuncOptions()
                       .scale_factor(std::vector<double>{2.0, 2.0})
                       .mode(torch::kNearest));
            h = upsamplers[i]->as<nn::Conv2d>()->forward(h);
        }
    }
    return conv_out->forward(torch::silu(norm_out->forward(h)));
}

// ---------------------------------------------------------------------------

ControlBlockImpl::ControlBlockImpl(int64_t in, int64_t out, int64_t emb_dim, int64_t groups,
                                   const std::string& prefix, std::shared_ptr<const AdapterBank> bank) {
    norm1 = register_module("norm1", nn::GroupNorm(groups, in));
    conv1 = register_module("conv1", conv3x3(in, out));
    emb_proj = register_module("emb_proj", LoraLinear(emb_dim, out, prefix + ".emb_proj", bank));
    norm2 = register_module("norm2", nn::GroupNorm(groups, out));
    mix = register_module("mix", LoraLinear(out, out, prefix + ".mix", bank));
    conv2 = register_module("conv2", conv3x3(out, out));
    if (in != out) skip = register_module("skip", conv1x1(in, out));
}

torch::Tensor ControlBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1->forward(torch::silu(norm1->forward(x)));
    h = h + broadcast_emb(emb_proj->forward(torch::silu(emb)));
    h = torch::silu(norm2->forward(h));
    h = h + pointwise(mix, h);
    h = conv2->forward(h);
    return (skip ? skip->forward(x) : x) + h;
}

std::vector<LayerShape> ControlBlockImpl::adapted_layers() const {
    return {emb_proj->shape(), mix->shape()};
}

ControlBranchImpl::ControlBranchImpl(const DenoiserSpec& spec, std::shared_ptr<const AdapterBank> bank)
    : spec_(spec) {
    const int64_t levels = spec.levels();
    auto width = [&](int64_t l) { return spec.control_width * spec.channel_mult[l]; };
    auto unet_width = [&](int64_t l) { return spec.base_width * spec.channel_mult[l]; };
    time_embed = register_module("time_embed", TimeEmbedding(spec.control_width, spec.time_dim, "ctrl.time", bank));
    prompt_proj = register_module("prompt_proj", LoraLinear(spec.prompt_dim, spec.time_dim, "ctrl.prompt_proj", bank));
    stem = register_module("stem", conv3x3(spec.condition_channels(), width(0)));
    blocks = register_module("blocks", nn::ModuleList());
    downsamplers = register_module("downsamplers", nn::ModuleList());
    zero_proj = register_module("zero_proj", nn::ModuleList());
    int64_t prev = width(0);
    for (int64_t l = 0; l < levels; ++l) {
        blocks->push_back(ControlBlock(prev, width(l), spec.time_dim, spec.groups,
                                       "ctrl.block" + std::to_string(l), bank));
        prev = width(l);
        auto proj = conv1x1(prev, unet_width(l));
        zero_init(proj);
        zero_proj->push_back(proj);
        if (l + 1 < levels) downsamplers->push_back(conv3x3(prev, prev, 2));
    }
    attn = register_module("attn", Attention(prev, spec.heads, spec.groups, "ctrl.attn", bank));
    zero_mid = register_module("zero_mid", conv1x1(prev, unet_width(levels - 1)));
    zero_init(zero_mid);
}

ControlFeatures ControlBranchImpl::features(const torch::Tensor& cond, const torch::Tensor& t,
                                            const torch::Tensor& prompt) {
    const int64_t levels = spec_.levels();
    auto emb = time_embed->forward(t) + prompt_proj->forward(prompt);
    auto h = stem->forward(cond);
    ControlFeatures out;
    for (int64_t l = 0; l < levels; ++l) {
        h = blocks[l]->as<ControlBlock>()->forward(h, emb);
        out.levels.push_back(h);
        if (l + 1 < levels) h = downsamplers[l]->as<nn::Conv2d>()->forward(h);
    }
    out.middle = attn->forward(h);
    return out;
}

std::vector<torch::Tensor> ControlBranchImpl::project(const ControlFeatures& features) {
    std::vector<torch::Tensor> out;
    for (size_t l = 0; l < features.levels.size(); ++l)
        out.push_back(zero_proj[l]->as<nn::Conv2d>()->forward(features.levels[l]));
    out.push_back(zero_mid->forward(features.middle));
    return out;
}

std::vector<LayerShape> ControlBranchImpl::adapted_layers() const {
    std::vector<LayerShape> out = time_embed->adapted_layers();
    out.push_back(prompt_proj->shape());
    for (const auto& b : *blocks) {
        auto l = b->as<ControlBlock>()->adapted_layers();
        out.insert(out.end(), l.begin(), l.end());
    }
    auto a = attn->adapted_layers();
    out.insert(out.end(), a.begin(), a.end());
    return out;
}

std::vector<torch::Tensor> ControlBranchImpl::zero_projection_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& m : *zero_proj) {
        auto p = m->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    auto p = zero_mid->parameters();
    out.insert(out.end(), p.begin(), p.end());
    return out;
}

LayoutHeadImpl::LayoutHeadImpl(int64_t in_channels, int64_t num_classes) {
    conv1 = register_module("conv1", conv3x3(in_channels, in_channels, 2));
    conv2 = register_module("conv2", conv3x3(in_channels, num_classes));
    torch::NoGradGuard guard;
    conv1->bias.zero_();
    conv2->bias.zero_();
}

torch::Tensor LayoutHeadImpl::forward(const torch::Tensor& finest) {
    return torch::sigmoid(conv2->forward(torch::silu(conv1->forward(finest))));
}

// ---------------------------------------------------------------------------

DiffusionModelImpl::DiffusionModelImpl(const DenoiserSpec& spec, uint64_t seed)
    : spec_(spec), bank_(std::make_shared<AdapterBank>()) {
    spec.validate();
    torch::manual_seed(seed);
    unet = register_module("unet", UNet(spec));
    control = register_module("control", ControlBranch(spec, bank_));
    layout_head = register_module("layout_head", LayoutHead(spec.control_width * spec.channel_mult[0], spec.num_classes));
    prompts = register_module("prompts", nn::Embedding(spec.num_styles * 2, spec.prompt_dim));
}

void DiffusionModelImpl::check_inputs(const torch::Tensor& z_t, const torch::Tensor& t,
                                      const ConditionTensor& cond, const torch::Tensor& prompt) const {
    if (z_t.dim() != 4 || z_t.size(1) != spec_.image_channels)
        throw ValidationError("denoise: z_t must be [B, 3, H, W]");
    const int64_t b = z_t.size(0);
    const int64_t factor = int64_t{1} << (spec_.levels() - 1);
    if (z_t.size(2) % factor || z_t.size(3) % factor) {
        std::ostringstream os;
        os << "denoise: spatial size must be divisible by " << factor;
        throw ValidationError(os.str());
    }
    if (t.dim() != 1 || t.size(0) != b) throw ValidationError("denoise: t must be [B]");
    if ((t < 0).any().item<bool>()) throw ValidationError("denoise: negative timestep");
    if (!cond.batched() || cond.data.size(0) != b || cond.data.size(2) != z_t.size(2) ||
        cond.data.size(3) != z_t.size(3)) {
        std::ostringstream os;
        os << "denoise: condition " << cond.data.sizes() << " does not match z_t " << z_t.sizes();
        throw ValidationError(os.str());
    }
    if (cond.num_classes() != spec_.num_classes) {
        std::ostringstream os;
        os << "denoise: condition has K = " << cond.num_classes() << " but the model expects K = "
           << spec_.num_classes;
        throw ValidationError(os.str());
    }
    if (prompt.dim() != 2 || prompt.size(0) != b || prompt.size(1) != spec_.prompt_dim)
        throw ValidationError("denoise: prompt must be [B, prompt_dim]");
    if (cond.mode != bank_->active_mode())
        throw ValidationError("denoise: condition is in " + to_string(cond.mode) +
                              " mode but the active adapter mode is " + to_string(bank_->active_mode()));
}

DenoiseOutput DiffusionModelImpl::denoise_with_features(const torch::Tensor& z_t, const torch::Tensor& t,
                                                        const ConditionTensor& cond,
                                                        const torch::Tensor& prompt) {
    check_inputs(z_t, t, cond, prompt);
    DenoiseOutput out;
    out.control = control->features(cond.data, t, prompt);
    out.eps_hat = unet->forward(z_t, t, prompt, control->project(out.control));
    return out;
}

torch::Tensor DiffusionModelImpl::denoise(const torch::Tensor& z_t, const torch::Tensor& t,
                                          const ConditionTensor& cond, const torch::Tensor& prompt) {
    return denoise_with_features(z_t, t, cond, prompt).eps_hat;
}

torch::Tensor DiffusionModelImpl::base_denoise(const torch::Tensor& z_t, const torch::Tensor& t,
                                               const torch::Tensor& prompt) {
    return unet->forward(z_t, t, prompt);
}

PromptEmbedding DiffusionModelImpl::embed_prompt(int style_label, TaskMode mode) {
    if (style_label < 0 || style_label >= spec_.num_styles)
        throw ValidationError("unknown style label " + std::to_string(style_label) + " (model has " +
                              std::to_string(spec_.num_styles) + " styles)");
    return {prompts->weight[style_label * 2 + mode_index(mode)], style_label, mode};
}

torch::Tensor DiffusionModelImpl::prompt_batch(const std::vector<int>& style_labels, TaskMode mode) {
    std::vector<int64_t> idx;
    for (int s : style_labels) {
        if (s < 0 || s >= spec_.num_styles)
            throw ValidationError("unknown style label " + std::to_string(s));
        idx.push_back(s * 2 + mode_index(mode));
    }
    return prompts->forward(torch::tensor(idx, torch::kLong));
}

LayoutPrediction DiffusionModelImpl::predict_layout(const ControlFeatures& features) {
    const int64_t expected = spec_.control_width * spec_.channel_mult[0];
    if (features.levels.empty() || features.levels[0].dim() != 4 || features.levels[0].size(1) != expected) {
        std::ostringstream os;
        os << "predict_layout: finest control feature must have " << expected << " channels";
        throw ValidationError(os.str());
    }
    return {layout_head->forward(features.levels[0]), 2};
}

void DiffusionModelImpl::install_bank(AdapterBank bank) {
    bank.check_against(adapter_registry());
    *bank_ = std::move(bank);
}

uint64_t parameter_hash(const std::vector<torch::Tensor>& tensors) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors) {
        auto c = t.detach().contiguous().cpu();
        const auto* p = static_cast<const uint8_t*>(c.data_ptr());
        const size_t n = c.numel() * c.element_size();
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

int64_t parameter_count(const std::vector<torch::Tensor>& tensors) {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
}

} // namespace cdiff
