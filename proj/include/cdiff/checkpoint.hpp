#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "cdiff/backbone.hpp"
#include "cdiff/config.hpp"
#include "cdiff/diffusion.hpp"

namespace cdiff {

struct Checkpoint {
    static constexpr int kFormatVersion = 1;

    Phase phase = Phase::pretrain;
    int64_t step = 0;
    TrainConfig config;
    DiffusionModel model{nullptr};             // carries its AdapterBank
    std::map<std::string, std::string> optimizer_state; // serialized archives
    std::array<double, 2> ema_loss{0.0, 0.0};  // by mode_index
    std::array<double, 2> initial_ema_loss{0.0, 0.0};

    NoiseSchedule schedule() const;
    // Deep copy: the copy constructor shares the model.
    Checkpoint clone() const;
};

// Condition channel names in order, recorded with every checkpoint.
std::vector<std::string> condition_channel_names(int64_t num_classes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
// Throws IoError on unreadable files, ConfigError on version mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

DiffusionModel clone_model(const DiffusionModel& model);

} // namespace cdiff
