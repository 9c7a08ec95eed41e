#include "cdiff/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "cdiff/errors.hpp"

namespace cdiff {

std::string to_string(Phase phase) { return phase == Phase::pretrain ? "pretrain" : "adapters"; }

Phase parse_phase(const std::string& text) {
    if (text == "pretrain") return Phase::pretrain;
    if (text == "adapters") return Phase::adapters;
    throw ConfigError("phase: unknown value '" + text + "' (expected pretrain or adapters)");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError(field + ": " + why);
    };
    if (total_steps < 0) fail("total_steps", "must be >= 0");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (!(lr > 0.0)) fail("lr", "must be > 0");
    if (weight_decay < 0.0) fail("weight_decay", "must be >= 0");
    if (alternation_period < 1) fail("alternation_period", "must be >= 1");
    if (threads < 1) fail("threads", "must be >= 1");
    if (checkpoint_every < 0) fail("checkpoint_every", "must be >= 0");
    if (log_every < 1) fail("log_every", "must be >= 1");
    if (schedule_steps < 1) fail("schedule.steps", "must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        fail("schedule.beta_start", "need 0 < beta_start <= beta_end < 1");
    if (lora_rank < 1) fail("lora.rank", "must be >= 1");
    if (cond_radius < 0.0) fail("data.cond_radius", "must be >= 0");
    if (!(min_coverage > 0.0 && min_coverage <= max_coverage && max_coverage < 1.0))
        fail("data.min_coverage", "need 0 < min_coverage <= max_coverage < 1");
    try {
        hp.validate();
        model.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());
    }
}

namespace {

struct Field {
    std::string key;
    std::string help;
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* begin = value.data();
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc() || ptr != end)
        throw ConfigError(key + ": cannot parse '" + value + "' as a number");
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "off" || value == "no") return false;
    throw ConfigError(key + ": cannot parse '" + value + "' as a boolean");
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::vector<int64_t> parse_list(const std::string& key, const std::string& value) {
    std::vector<int64_t> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<int64_t>(key, item));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

#define CDIFF_INT(KEY, MEMBER, HELP)                                                             \
    Field {                                                                                      \
        KEY, HELP, [](TrainConfig& c, const std::string& v) { c.MEMBER = parse_number<int64_t>(KEY, v); }, \
            [](const TrainConfig& c) { return std::to_string(c.MEMBER); }                        \
    }
#define CDIFF_REAL(KEY, MEMBER, HELP)                                                            \
    Field {                                                                                      \
        KEY, HELP, [](TrainConfig& c, const std::string& v) { c.MEMBER = parse_number<double>(KEY, v); }, \
            [](const TrainConfig& c) { return fmt(c.MEMBER); }                                   \
    }
#define CDIFF_BOOL(KEY, MEMBER, HELP)                                                            \
    Field {                                                                                      \
        KEY, HELP, [](TrainConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); },  \
            [](const TrainConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }        \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"phase", "pretrain | adapters",
         [](TrainConfig& c, const std::string& v) { c.phase = parse_phase(v); },
         [](const TrainConfig& c) { return to_string(c.phase); }},
        CDIFF_INT("total_steps", total_steps, "optimization steps for the phase"),
        CDIFF_INT("batch_size", batch_size, "images per batch"),
        CDIFF_REAL("lr", lr, "learning rate (AdamW)"),
        CDIFF_REAL("weight_decay", weight_decay, "decoupled weight decay, pretrain phase only"),
        CDIFF_INT("alternation_period", alternation_period, "batches per mode before switching"),
        {"seed", "root seed for every random stream",
         [](TrainConfig& c, const std::string& v) { c.seed = parse_number<uint64_t>("seed", v); },
         [](const TrainConfig& c) { return std::to_string(c.seed); }},
        CDIFF_BOOL("deterministic", deterministic, "single-threaded deterministic kernels"),
        CDIFF_INT("threads", threads, "intra-op threads when not deterministic"),
        {"dataset", "dataset directory",
         [](TrainConfig& c, const std::string& v) { c.dataset = v; },
         [](const TrainConfig& c) { return c.dataset; }},
        {"out_dir", "output directory for checkpoints and logs",
         [](TrainConfig& c, const std::string& v) { c.out_dir = v; },
         [](const TrainConfig& c) { return c.out_dir; }},
        CDIFF_INT("checkpoint_every", checkpoint_every, "periodic checkpoint cadence in steps (0 = final only)"),
        CDIFF_INT("log_every", log_every, "CSV log cadence in steps"),
        CDIFF_INT("schedule.steps", schedule_steps, "diffusion steps T"),
        CDIFF_REAL("schedule.beta_start", beta_start, "first beta of the linear schedule"),
        CDIFF_REAL("schedule.beta_end", beta_end, "last beta of the linear schedule"),
        CDIFF_INT("model.base_width", model.base_width, "denoiser base channel width"),
        {"model.channel_mult", "comma-separated per-level multipliers",
         [](TrainConfig& c, const std::string& v) { c.model.channel_mult = parse_list("model.channel_mult", v); },
         [](const TrainConfig& c) {
             std::string s;
             for (size_t i = 0; i < c.model.channel_mult.size(); ++i)
                 s += (i ? "," : "") + std::to_string(c.model.channel_mult[i]);
             return s;
         }},
        CDIFF_INT("model.control_width", model.control_width, "control branch base width"),
        CDIFF_INT("model.time_dim", model.time_dim, "time embedding width"),
        CDIFF_INT("model.prompt_dim", model.prompt_dim, "prompt embedding width"),
        CDIFF_INT("model.groups", model.groups, "GroupNorm groups"),
        CDIFF_INT("model.heads", model.heads, "attention heads"),
        CDIFF_INT("lora.rank", lora_rank, "adapter rank"),
        CDIFF_REAL("lora.alpha", lora_alpha, "adapter alpha (<= 0 means alpha = rank)"),
        CDIFF_BOOL("lora.shared", shared_adapter, "bind both modes to one adapter set"),
        CDIFF_REAL("hp.lambda_l1", hp.lambda_l1, "image-domain L1 weight"),
        CDIFF_REAL("hp.lambda_lpips", hp.lambda_lpips, "inpaint perceptual weight"),
        CDIFF_REAL("hp.lambda_lpips_gen", hp.lambda_lpips_gen, "gen perceptual weight"),
        CDIFF_REAL("hp.w_inter", hp.w_inter, "inter-class separation weight"),
        CDIFF_REAL("hp.lambda_mask", hp.lambda_mask, "hole amplification of the eps loss"),
        CDIFF_REAL("hp.beta_cent", hp.beta_cent, "centroid weight amplitude"),
        CDIFF_REAL("hp.sigma_cent", hp.sigma_cent, "centroid weight width (<= 0: cell radius)"),
        CDIFF_REAL("hp.gamma_snr", hp.gamma_snr, "Min-SNR gamma"),
        CDIFF_REAL("hp.soft_mask_sigma", hp.soft_mask_sigma, "soft mask blur sigma"),
        CDIFF_INT("hp.warmup_steps", hp.warmup_steps, "steps before perceptual terms switch on"),
        CDIFF_REAL("warmup_fraction", warmup_fraction, "warm-up as a fraction of total_steps (< 0: use hp.warmup_steps)"),
        CDIFF_BOOL("hp.layout_fit", hp.layout_fit, "BCE fit of the layout head"),
        CDIFF_REAL("hp.layout_fit_weight", hp.layout_fit_weight, "layout fit weight"),
        CDIFF_BOOL("hp.masked_perceptual", hp.masked_perceptual, "restrict the inpaint perceptual term to the hole"),
        CDIFF_REAL("data.cond_radius", cond_radius, "centroid rasterization radius"),
        CDIFF_REAL("data.min_coverage", min_coverage, "smallest training hole coverage"),
        CDIFF_REAL("data.max_coverage", max_coverage, "largest training hole coverage"),
        CDIFF_INT("data.train_records", train_records, "records used for training (-1 = all)"),
    };
    return table;
}

#undef CDIFF_INT
#undef CDIFF_REAL
#undef CDIFF_BOOL

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

const std::vector<std::pair<std::string, std::string>>& config_keys() {
    static const auto keys = [] {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& f : fields()) out.emplace_back(f.key, f.help);
        return out;
    }();
    return keys;
}

void apply_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(config, value);
            return;
        }
    }
    throw ConfigError(key + ": unknown configuration key");
}

TrainConfig parse_config(const std::string& text) {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        apply_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("missing config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

TrainConfig resolve_warmup(TrainConfig config) {
    if (config.warmup_fraction >= 0.0) {
        config.hp.warmup_steps =
            static_cast<int64_t>(std::llround(config.warmup_fraction * static_cast<double>(config.total_steps)));
        config.warmup_fraction = -1.0;
    }
    return config;
}

std::string format_config(const TrainConfig& config) {
    std::ostringstream os;
    for (const auto& f : fields()) os << f.key << " = " << f.get(config) << '\n';
    return os.str();
}

} // namespace cdiff
