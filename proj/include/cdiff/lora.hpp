#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cdiff/types.hpp"

namespace cdiff {

// Low-rank delta for one host layer with weight [d_out, d_in]:
// W_eff = W + scale * B A.
struct LoraAdapter {
    torch::Tensor A; // [rank, d_in]
    torch::Tensor B; // [d_out, rank]
    int64_t rank = 0;
    double scale = 1.0;
    std::string layer_id;

    int64_t d_in() const { return A.size(1); }
    int64_t d_out() const { return B.size(0); }
};

// A ~ N(0, 1/rank) (std 1/sqrt(rank)), B = 0. alpha <= 0 means alpha = rank,
// i.e. scale 1. Throws ValidationError unless 1 <= rank <= min(d_out, d_in).
LoraAdapter init_adapter(int64_t d_out, int64_t d_in, int64_t rank, uint64_t seed,
                         std::string layer_id = {}, double alpha = 0.0);

torch::Tensor effective_weight(const torch::Tensor& weight, const LoraAdapter& adapter);

// scale * ((x A^T) B^T) for x of shape [..., d_in].
torch::Tensor adapter_delta(const torch::Tensor& x, const LoraAdapter& adapter);

// x W^T + scale * ((x A^T) B^T), never materializing W_eff.
torch::Tensor adapter_forward(const torch::Tensor& x, const torch::Tensor& weight,
                              const LoraAdapter& adapter);

// Host layer description used to build and validate banks.
struct LayerShape {
    std::string id;
    int64_t d_out = 0;
    int64_t d_in = 0;
    bool operator==(const LayerShape&) const = default;
};

// One adapter set per task mode over the same layer ids, plus the routing
// switch. Mode switching is single-writer and must not interleave with
// forward passes.
class AdapterBank {
public:
    static constexpr int kFormatVersion = 1;

    AdapterBank() = default;

    // shared = true binds both modes to the same tensors (the single-adapter
    // ablation); the bank still routes by mode but the weights coincide.
    static AdapterBank create(const std::vector<LayerShape>& layers, int64_t rank,
                              uint64_t seed, bool shared = false, double alpha = 0.0);

    // Routes forwards through `mode` and marks only its matrices trainable.
    void set_active(TaskMode mode);
    TaskMode active_mode() const { return active_; }

    // Adapter for layer_id in the active mode, or nullptr if not adapted.
    const LoraAdapter* active_adapter(const std::string& layer_id) const;
    const LoraAdapter& adapter(TaskMode mode, const std::string& layer_id) const;

    std::vector<torch::Tensor> parameters(TaskMode mode) const;
    std::vector<torch::Tensor> all_parameters() const;
    int64_t parameter_count() const;

    std::vector<std::string> layer_ids() const;
    std::vector<LayerShape> layer_shapes() const;
    bool empty() const { return adapters_[0].empty(); }
    bool shared() const { return shared_; }
    int64_t rank() const;
    double scale() const;

    // Deep copy with fresh storage (the copy constructor shares tensors).
    AdapterBank clone() const;

    // Throws ConfigError naming the first layer the registry lacks or
    // whose shape disagrees.
    void check_against(const std::vector<LayerShape>& registry) const;

    void insert(TaskMode mode, LoraAdapter adapter);
    void set_shared(bool shared) { shared_ = shared; }

private:
    std::array<std::map<std::string, LoraAdapter>, 2> adapters_;
    TaskMode active_ = TaskMode::inpaint;
    bool shared_ = false;
};

void save_bank(const AdapterBank& bank, const std::filesystem::path& path);
AdapterBank load_bank(const std::filesystem::path& path);

// In-archive form, used by checkpoints that embed a bank.
void write_bank(const AdapterBank& bank, torch::serialize::OutputArchive& archive);
AdapterBank read_bank(torch::serialize::InputArchive& archive);

} // namespace cdiff
