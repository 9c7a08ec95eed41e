#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cdiff/backbone.hpp"
#include "cdiff/losses.hpp"

namespace cdiff {

enum class Phase { pretrain, adapters };
std::string to_string(Phase phase);
Phase parse_phase(const std::string& text);

// Run configuration. Stored as a `key = value` text file (one entry per line,
// `#` starts a comment); the same text is echoed into checkpoints.
struct TrainConfig {
    Phase phase = Phase::pretrain;
    int64_t total_steps = 1000;
    int64_t batch_size = 8;
    double lr = 1e-4;
    double weight_decay = 0.01;     // pretrain only; adapter matrices get none
    int64_t alternation_period = 1; // batches per mode before switching
    uint64_t seed = 0;
    bool deterministic = true;
    int64_t threads = 1;

    std::string dataset;
    std::string out_dir = "run";
    int64_t checkpoint_every = 0;   // 0: final checkpoint only
    int64_t log_every = 1;

    int64_t schedule_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    DenoiserSpec model;             // num_classes / num_styles follow the dataset
    int64_t lora_rank = 8;
    double lora_alpha = 0.0;        // <= 0: alpha = rank
    bool shared_adapter = false;

    HyperParams hp;
    // When >= 0, hp.warmup_steps is set to round(warmup_fraction * total_steps)
    // at the start of a phase (and the fraction then reads -1).
    double warmup_fraction = 0.2;
    double cond_radius = 1.0;
    double min_coverage = 0.1;
    double max_coverage = 0.5;
    int64_t train_records = -1;     // first N records train; -1 = all

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

// Keys recognized in config files, each with a one-line description.
const std::vector<std::pair<std::string, std::string>>& config_keys();

// Sets one key; throws ConfigError naming the key on unknown keys or
// unparsable values.
void apply_config_value(TrainConfig& config, const std::string& key, const std::string& value);
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string format_config(const TrainConfig& config);
// Applies warmup_fraction against total_steps.
TrainConfig resolve_warmup(TrainConfig config);

} // namespace cdiff
