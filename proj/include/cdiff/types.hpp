#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace cdiff {

struct ImageSize {
    int64_t height = 64;
    int64_t width = 64;
    bool operator==(const ImageSize&) const = default;
};

// RGB image: float32 tensor [3, H, W], values in [0, 1].
using Image = torch::Tensor;

struct Centroid {
    int x = 0;
    int y = 0;
    int class_id = 0;
    bool operator==(const Centroid&) const = default;
};

// Sparse cell layout: one point per nucleus with its class.
struct CentroidSet {
    std::vector<Centroid> entries;
    ImageSize size;
    int num_classes = 3;

    // Throws ValidationError naming the first offending entry.
    void validate() const;
    bool operator==(const CentroidSet&) const = default;
};

// float32 [H, W] with values exactly 0 or 1; 1 marks a missing pixel.
struct BinaryMask {
    torch::Tensor data;

    static BinaryMask zeros(ImageSize size);
    static BinaryMask ones(ImageSize size);
    ImageSize size() const { return {data.size(0), data.size(1)}; }
    double coverage() const;
    void validate() const;
};

enum class TaskMode { inpaint, gen };

std::string to_string(TaskMode mode);
TaskMode parse_task_mode(const std::string& text);
inline TaskMode other(TaskMode mode) {
    return mode == TaskMode::inpaint ? TaskMode::gen : TaskMode::inpaint;
}
inline int mode_index(TaskMode mode) { return mode == TaskMode::inpaint ? 0 : 1; }

} // namespace cdiff
