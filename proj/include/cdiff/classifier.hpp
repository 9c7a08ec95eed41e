#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cdiff/metrics.hpp"

namespace cdiff {

struct ClassifierOptions {
    int64_t epochs = 4;
    int64_t batch_size = 32;
    double lr = 2e-3;
    uint64_t seed = 0;
};

// Small CNN style classifier. Its penultimate activations double as the
// feature space for Fréchet distances.
class StyleClassifierImpl : public torch::nn::Module {
public:
    static constexpr int64_t kFeatureDim = 32;

    StyleClassifierImpl(int64_t num_classes, uint64_t seed);
    torch::Tensor features(const torch::Tensor& images); // [B, kFeatureDim]
    torch::Tensor forward(const torch::Tensor& images);  // logits

    void fit(const torch::Tensor& images, const std::vector<int>& labels,
             const ClassifierOptions& options);
    std::vector<int> predict(const torch::Tensor& images);
    // Batched, no-grad feature extraction, double [N, kFeatureDim].
    torch::Tensor extract(const torch::Tensor& images);

    std::string descriptor() const;

private:
    int64_t num_classes_;
    uint64_t seed_;
    int64_t trained_epochs_ = 0;
    torch::nn::Conv2d c1{nullptr}, c2{nullptr}, c3{nullptr};
    torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(StyleClassifier);

// Trains on real patches, scores predictions on generated ones. Throws
// ValidationError when either side has fewer than two labels.
ClassificationMetrics downstream_classification(const torch::Tensor& real_images,
                                                const std::vector<int>& real_labels,
                                                const torch::Tensor& generated_images,
                                                const std::vector<int>& generated_labels,
                                                int num_classes,
                                                const ClassifierOptions& options);

} // namespace cdiff
