#include "cdiff/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cdiff/errors.hpp"

namespace cdiff {

NoiseSchedule Checkpoint::schedule() const {
    return make_schedule(config.schedule_steps, config.beta_start, config.beta_end);
}

Checkpoint Checkpoint::clone() const {
    Checkpoint out = *this;
    out.model = clone_model(model);
    return out;
}

std::vector<std::string> condition_channel_names(int64_t num_classes) {
    std::vector<std::string> names{"hint_r", "hint_g", "hint_b", "mask"};
    for (int64_t k = 0; k < num_classes; ++k) names.push_back("centroid_" + std::to_string(k));
    return names;
}

DiffusionModel clone_model(const DiffusionModel& model) {
    DiffusionModel out(model->spec(), 0);
    torch::NoGradGuard no_grad;
    auto src = model->named_parameters();
    for (auto& item : out->named_parameters()) {
        const auto* p = src.find(item.key());
        if (!p) throw ValidationError("clone_model: parameter '" + item.key() + "' missing from source");
        item.value().copy_(*p);
        item.value().set_requires_grad(p->requires_grad());
    }
    out->install_bank(model->bank().clone());
    return out;
}

namespace {

torch::Tensor string_tensor(const std::string& s) {
    auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
    std::memcpy(t.data_ptr<uint8_t>(), s.data(), s.size());
    return t;
}

std::string tensor_string(const torch::Tensor& t) {
    auto c = t.contiguous();
    return {reinterpret_cast<const char*>(c.data_ptr<uint8_t>()), static_cast<size_t>(c.numel())};
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    nlohmann::json meta;
    meta["format_version"] = Checkpoint::kFormatVersion;
    meta["phase"] = to_string(ckpt.phase);
    meta["step"] = ckpt.step;
    meta["config"] = format_config(ckpt.config);
    meta["model"] = to_json(ckpt.model->spec());
    meta["num_classes"] = ckpt.model->spec().num_classes;
    meta["channel_order"] = condition_channel_names(ckpt.model->spec().num_classes);
    meta["schedule"] = {{"steps", ckpt.config.schedule_steps},
                        {"beta_start", ckpt.config.beta_start},
                        {"beta_end", ckpt.config.beta_end}};
    meta["hyperparams"] = to_json(ckpt.config.hp);
    meta["ema_loss"] = ckpt.ema_loss;
    meta["initial_ema_loss"] = ckpt.initial_ema_loss;
    auto opt_names = nlohmann::json::array();
    for (const auto& [name, blob] : ckpt.optimizer_state) opt_names.push_back(name);
    meta["optimizers"] = opt_names;

    torch::serialize::OutputArchive archive;
    torch::serialize::OutputArchive params;
    auto param_names = nlohmann::json::array();
    for (const auto& item : ckpt.model->named_parameters()) {
        params.write("p" + std::to_string(param_names.size()), item.value().detach());
        param_names.push_back(item.key());
    }
    meta["parameters"] = param_names;
    archive.write("meta", string_tensor(meta.dump()));
    archive.write("params", params);
    torch::serialize::OutputArchive bank;
    write_bank(ckpt.model->bank(), bank);
    archive.write("bank", bank);
    for (const auto& [name, blob] : ckpt.optimizer_state) archive.write("opt_" + name, string_tensor(blob));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    try {
        archive.save_to(tmp.string());
    } catch (const c10::Error&) {
        throw IoError("cannot write checkpoint '" + path.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("missing checkpoint '" + path.string() + "'");
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error&) {
        throw IoError("cannot read checkpoint '" + path.string() + "'");
    }
    torch::Tensor meta_t;
    archive.read("meta", meta_t);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(tensor_string(meta_t));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint metadata is malformed: " + std::string(e.what()));
    }
    const int version = meta.value("format_version", -1);
    if (version != Checkpoint::kFormatVersion)
        throw ConfigError("checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(Checkpoint::kFormatVersion) + ")");
    const auto spec = denoiser_spec_from_json(meta.at("model"));
    if (meta.at("channel_order").get<std::vector<std::string>>() != condition_channel_names(spec.num_classes))
        throw ConfigError("checkpoint condition channel order does not match [hint, mask, C]");

    Checkpoint ckpt;
    ckpt.phase = parse_phase(meta.at("phase").get<std::string>());
    ckpt.step = meta.at("step").get<int64_t>();
    ckpt.config = parse_config(meta.at("config").get<std::string>());
    ckpt.ema_loss = meta.at("ema_loss").get<std::array<double, 2>>();
    ckpt.initial_ema_loss = meta.at("initial_ema_loss").get<std::array<double, 2>>();
    ckpt.model = DiffusionModel(spec, 0);
    {
        torch::NoGradGuard no_grad;
        torch::serialize::InputArchive params;
        archive.read("params", params);
        const auto names = meta.at("parameters").get<std::vector<std::string>>();
        for (auto& item : ckpt.model->named_parameters()) {
            const auto it = std::find(names.begin(), names.end(), item.key());
            torch::Tensor value;
            if (it == names.end() || !params.try_read("p" + std::to_string(it - names.begin()), value))
                throw IoError("checkpoint lacks parameter '" + item.key() + "'");
            if (!value.sizes().equals(item.value().sizes()))
                throw IoError("checkpoint parameter '" + item.key() + "' has the wrong shape");
            item.value().copy_(value);
        }
    }
    torch::serialize::InputArchive bank;
    archive.read("bank", bank);
    ckpt.model->install_bank(read_bank(bank));
    for (const auto& name : meta.at("optimizers")) {
        torch::Tensor blob;
        archive.read("opt_" + name.get<std::string>(), blob);
        ckpt.optimizer_state[name.get<std::string>()] = tensor_string(blob);
    }
    return ckpt;
}

} // namespace cdiff
