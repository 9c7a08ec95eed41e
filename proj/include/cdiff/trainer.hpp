#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cdiff/checkpoint.hpp"
#include "cdiff/config.hpp"
#include "cdiff/dataset.hpp"
#include "cdiff/losses.hpp"
#include "cdiff/random.hpp"

namespace cdiff {

struct StepRecord {
    int64_t step = 0; // step index that was just executed (0-based)
    TaskMode mode = TaskMode::inpaint;
    double loss = 0.0;
    std::map<std::string, double> components;
};

// A prepared training batch: everything derived from the step seed.
struct TrainBatch {
    TaskMode mode = TaskMode::inpaint;
    torch::Tensor x0;        // model space [B, 3, H, W]
    torch::Tensor images;    // data space
    torch::Tensor masks;     // [B, H, W]
    torch::Tensor maps;      // [B, K, H, W]
    torch::Tensor t;         // long [B]
    torch::Tensor eps;
    std::vector<int> styles;
    std::vector<CentroidSet> layouts;
    std::vector<int64_t> indices;
};

// Two-phase training state machine. Every random draw of step n is a pure
// function of (seed, n), so resuming needs only the step counter and the
// optimizer state.
class TrainingSession {
public:
    static TrainingSession start_pretrain(const TrainConfig& config, const Dataset& data);
    // base must be a pretrain checkpoint; a fresh AdapterBank is created.
    static TrainingSession start_adapters(const TrainConfig& config, const Checkpoint& base,
                                          const Dataset& data);
    // Continues the checkpoint's phase. override_config, when given, may
    // only change the step budget, cadence and output settings; anything
    // else raises ConfigError naming the conflicting field.
    static TrainingSession resume(const Checkpoint& checkpoint, const Dataset& data,
                                  const std::optional<TrainConfig>& override_config = {});

    TrainingSession(TrainingSession&&) noexcept;
    TrainingSession& operator=(TrainingSession&&) noexcept;
    ~TrainingSession();

    StepRecord step();
    // Steps until total_steps (or `until`); calls observer after each step,
    // appends to the CSV log and writes periodic checkpoints if configured.
    void run(const std::function<void(const StepRecord&)>& observer = {},
             std::optional<int64_t> until = {});

    bool finished() const;
    int64_t current_step() const;
    TaskMode mode_for_step(int64_t step) const;
    TrainBatch make_batch(int64_t step) const;

    Checkpoint checkpoint() const;
    DiffusionModel& model();
    const TrainConfig& config() const;
    const NoiseSchedule& schedule() const;
    const PerceptualMetric& perceptual() const;

    // Parameters the phase may update, by mode.
    std::vector<torch::Tensor> trainable_parameters(TaskMode mode) const;
    // Parameters that must stay bitwise constant in this phase.
    std::vector<torch::Tensor> frozen_parameters() const;
    int64_t total_parameter_count() const;
    int64_t trainable_parameter_count() const;

private:
    struct State;
    explicit TrainingSession(std::unique_ptr<State> state);
    std::unique_ptr<State> state_;
};

Checkpoint pretrain(const TrainConfig& config, const Dataset& data);
Checkpoint train_adapters(const TrainConfig& config, const Checkpoint& base, const Dataset& data);
Checkpoint resume(const Checkpoint& checkpoint, const Dataset& data,
                  const std::optional<TrainConfig>& override_config = {});

struct ValidationLoss {
    double inpaint = 0.0;
    double gen = 0.0;
};

// Mean phase objective per mode over fixed held-out batches (records
// [first, first + count)), evaluated past warm-up with seeded noise.
ValidationLoss validation_losses(DiffusionModel& model, const Dataset& data, int64_t first,
                                 int64_t count, const TrainConfig& config, uint64_t seed);

} // namespace cdiff
