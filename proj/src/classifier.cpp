#include "cdiff/classifier.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "cdiff/errors.hpp"

namespace cdiff {
namespace nn = torch::nn;
namespace F = torch::nn::functional;

StyleClassifierImpl::StyleClassifierImpl(int64_t num_classes, uint64_t seed)
    : num_classes_(num_classes), seed_(seed) {
    if (num_classes < 2) throw ValidationError("StyleClassifier: needs at least two classes");
    torch::manual_seed(seed);
    c1 = register_module("c1", nn::Conv2d(nn::Conv2dOptions(3, 16, 3).stride(2).padding(1)));
    c2 = register_module("c2", nn::Conv2d(nn::Conv2dOptions(16, 32, 3).stride(2).padding(1)));
    c3 = register_module("c3", nn::Conv2d(nn::Conv2dOptions(32, kFeatureDim, 3).stride(2).padding(1)));
    fc = register_module("fc", nn::Linear(kFeatureDim, num_classes));
}

torch::Tensor StyleClassifierImpl::features(const torch::Tensor& images) {
    auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
    x = torch::relu(c1->forward(x * 2.0 - 1.0));
    x = torch::relu(c2->forward(x));
    x = torch::relu(c3->forward(x));
    return x.mean({2, 3});
}

torch::Tensor StyleClassifierImpl::forward(const torch::Tensor& images) { return fc->forward(features(images)); }

void StyleClassifierImpl::fit(const torch::Tensor& images, const std::vector<int>& labels,
                              const ClassifierOptions& options) {
    if (images.size(0) != static_cast<int64_t>(labels.size()))
        throw ValidationError("StyleClassifier::fit: image and label counts differ");
    train();
    torch::optim::Adam opt(parameters(), torch::optim::AdamOptions(options.lr));
    const auto y = torch::tensor(std::vector<int64_t>(labels.begin(), labels.end()), torch::kLong);
    std::vector<int64_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(options.seed);
    for (int64_t e = 0; e < options.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t b = 0; b < order.size(); b += options.batch_size) {
            const auto end = std::min(order.size(), b + static_cast<size_t>(options.batch_size));
            auto idx = torch::tensor(std::vector<int64_t>(order.begin() + b, order.begin() + end), torch::kLong);
            opt.zero_grad();
            auto loss = F::cross_entropy(forward(images.index_select(0, idx)), y.index_select(0, idx));
            loss.backward();
            opt.step();
        }
        ++trained_epochs_;
    }
    eval();
}

std::vector<int> StyleClassifierImpl::predict(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    std::vector<int> out;
    for (int64_t b = 0; b < images.size(0); b += 64) {
        auto logits = forward(images.slice(0, b, std::min(images.size(0), b + 64)));
        auto arg = logits.argmax(1);
        for (int64_t i = 0; i < arg.size(0); ++i) out.push_back(static_cast<int>(arg[i].item<int64_t>()));
    }
    return out;
}

torch::Tensor StyleClassifierImpl::extract(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> parts;
    for (int64_t b = 0; b < images.size(0); b += 64)
        parts.push_back(features(images.slice(0, b, std::min(images.size(0), b + 64))));
    return torch::cat(parts, 0).to(torch::kFloat64);
}

std::string StyleClassifierImpl::descriptor() const {
    std::ostringstream os;
    os << "style-cnn-3x3s2(16,32," << kFeatureDim << ")/classes=" << num_classes_ << "/seed=" << seed_
       << "/epochs=" << trained_epochs_;
    return os.str();
}

ClassificationMetrics downstream_classification(const torch::Tensor& real_images, const std::vector<int>& real_labels,
                                                const torch::Tensor& generated_images,
                                                const std::vector<int>& generated_labels, int num_classes,
                                                const ClassifierOptions& options) {
    auto distinct = [](const std::vector<int>& v) { return std::set<int>(v.begin(), v.end()).size(); };
    if (distinct(real_labels) < 2 || distinct(generated_labels) < 2)
        throw ValidationError("downstream_classification: both sets need at least two labels");
    StyleClassifier clf(num_classes, options.seed);
    clf->fit(real_images, real_labels, options);
    return classification_metrics(generated_labels, clf->predict(generated_images), num_classes);
}

} // namespace cdiff
