#include "cdiff/lora.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cdiff/errors.hpp"
#include "cdiff/random.hpp"

namespace cdiff {

LoraAdapter init_adapter(int64_t d_out, int64_t d_in, int64_t rank, uint64_t seed,
                         std::string layer_id, double alpha) {
    if (d_out < 1 || d_in < 1) throw ValidationError("init_adapter: layer dimensions must be positive");
    if (rank < 1 || rank > std::min(d_out, d_in)) {
        std::ostringstream os;
        os << "init_adapter: rank " << rank << " outside [1, " << std::min(d_out, d_in) << "] for "
           << (layer_id.empty() ? "layer" : "layer '" + layer_id + "'") << " " << d_out << "x" << d_in;
        throw ValidationError(os.str());
    }
    auto gen = make_generator(seed);
    LoraAdapter a;
    a.A = torch::randn({rank, d_in}, gen, torch::kFloat32) / std::sqrt(static_cast<double>(rank));
    a.B = torch::zeros({d_out, rank}, torch::kFloat32);
    a.rank = rank;
    a.scale = (alpha > 0.0 ? alpha : static_cast<double>(rank)) / static_cast<double>(rank);
    a.layer_id = std::move(layer_id);
    return a;
}

namespace {

void check_weight(const torch::Tensor& weight, const LoraAdapter& adapter) {
    if (weight.dim() != 2 || weight.size(0) != adapter.d_out() || weight.size(1) != adapter.d_in()) {
        std::ostringstream os;
        os << "adapter '" << adapter.layer_id << "' expects a " << adapter.d_out() << "x"
           << adapter.d_in() << " host weight, got " << weight.sizes();
        throw ValidationError(os.str());
    }
}

} // namespace

torch::Tensor effective_weight(const torch::Tensor& weight, const LoraAdapter& adapter) {
    check_weight(weight, adapter);
    return weight + adapter.scale * torch::mm(adapter.B, adapter.A);
}

torch::Tensor adapter_delta(const torch::Tensor& x, const LoraAdapter& adapter) {
    if (x.size(-1) != adapter.d_in()) {
        std::ostringstream os;
        os << "adapter '" << adapter.layer_id << "' expects inputs with last dimension "
           << adapter.d_in() << ", got " << x.sizes();
        throw ValidationError(os.str());
    }
    return adapter.scale * torch::matmul(torch::matmul(x, adapter.A.t()), adapter.B.t());
}

torch::Tensor adapter_forward(const torch::Tensor& x, const torch::Tensor& weight,
                              const LoraAdapter& adapter) {
    check_weight(weight, adapter);
    return torch::matmul(x, weight.t()) + adapter_delta(x, adapter);
}

AdapterBank AdapterBank::create(const std::vector<LayerShape>& layers, int64_t rank, uint64_t seed,
                                bool shared, double alpha) {
    AdapterBank bank;
    bank.shared_ = shared;
    std::set<std::string> seen;
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (!seen.insert(l.id).second) throw ValidationError("duplicate layer id '" + l.id + "'");
        auto inpaint = init_adapter(l.d_out, l.d_in, rank, derive_seed(seed, 0, i), l.id, alpha);
        bank.adapters_[mode_index(TaskMode::inpaint)].emplace(l.id, inpaint);
        bank.adapters_[mode_index(TaskMode::gen)].emplace(
            l.id, shared ? inpaint : init_adapter(l.d_out, l.d_in, rank, derive_seed(seed, 1, i), l.id, alpha));
    }
    bank.set_active(TaskMode::inpaint);
    return bank;
}

void AdapterBank::set_active(TaskMode mode) {
    active_ = mode;
    for (TaskMode m : {TaskMode::inpaint, TaskMode::gen}) {
        const bool trainable = shared_ || m == mode;
        for (auto& [id, a] : adapters_[mode_index(m)]) {
            a.A.requires_grad_(trainable);
            a.B.requires_grad_(trainable);
        }
    }
}

const LoraAdapter* AdapterBank::active_adapter(const std::string& layer_id) const {
    const auto& m = adapters_[mode_index(active_)];
    auto it = m.find(layer_id);
    return it == m.end() ? nullptr : &it->second;
}

const LoraAdapter& AdapterBank::adapter(TaskMode mode, const std::string& layer_id) const {
    const auto& m = adapters_[mode_index(mode)];
    auto it = m.find(layer_id);
    if (it == m.end()) throw ValidationError("no adapter for layer '" + layer_id + "'");
    return it->second;
}

std::vector<torch::Tensor> AdapterBank::parameters(TaskMode mode) const {
    std::vector<torch::Tensor> out;
    for (const auto& [id, a] : adapters_[mode_index(mode)]) {
        out.push_back(a.A);
        out.push_back(a.B);
    }
    return out;
}

std::vector<torch::Tensor> AdapterBank::all_parameters() const {
    auto out = parameters(TaskMode::inpaint);
    if (!shared_) {
        auto g = parameters(TaskMode::gen);
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

int64_t AdapterBank::parameter_count() const {
    int64_t n = 0;
    for (const auto& t : all_parameters()) n += t.numel();
    return n;
}

std::vector<std::string> AdapterBank::layer_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, a] : adapters_[0]) ids.push_back(id);
    return ids;
}

std::vector<LayerShape> AdapterBank::layer_shapes() const {
    std::vector<LayerShape> out;
    for (const auto& [id, a] : adapters_[0]) out.push_back({id, a.d_out(), a.d_in()});
    return out;
}

int64_t AdapterBank::rank() const { return empty() ? 0 : adapters_[0].begin()->second.rank; }

double AdapterBank::scale() const { return empty() ? 1.0 : adapters_[0].begin()->second.scale; }

AdapterBank AdapterBank::clone() const {
    AdapterBank out;
    out.shared_ = shared_;
    for (int m = 0; m < 2; ++m) {
        for (const auto& [id, a] : adapters_[m]) {
            if (shared_ && m == 1) {
                out.adapters_[1].emplace(id, out.adapters_[0].at(id));
                continue;
            }
            LoraAdapter c = a;
            c.A = a.A.detach().clone();
            c.B = a.B.detach().clone();
            out.adapters_[m].emplace(id, std::move(c));
        }
    }
    out.set_active(active_);
    return out;
}

void AdapterBank::check_against(const std::vector<LayerShape>& registry) const {
    for (const auto& shape : layer_shapes()) {
        auto it = std::find_if(registry.begin(), registry.end(),
                               [&](const LayerShape& r) { return r.id == shape.id; });
        if (it == registry.end())
            throw ConfigError("adapter layer '" + shape.id + "' does not exist in the model");
        if (*it != shape) {
            std::ostringstream os;
            os << "adapter layer '" << shape.id << "' is " << shape.d_out << "x" << shape.d_in
               << " but the model layer is " << it->d_out << "x" << it->d_in;
            throw ConfigError(os.str());
        }
    }
    if (empty()) return;
    for (const auto& r : registry)
        if (!adapters_[0].contains(r.id))
            throw ConfigError("model layer '" + r.id + "' has no adapter in the bank");
}

void AdapterBank::insert(TaskMode mode, LoraAdapter adapter) {
    auto id = adapter.layer_id;
    adapters_[mode_index(mode)].insert_or_assign(id, std::move(adapter));
}

namespace {

torch::Tensor string_tensor(const std::string& s) {
    auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
    std::copy(s.begin(), s.end(), t.data_ptr<uint8_t>());
    return t;
}

std::string tensor_string(const torch::Tensor& t) {
    auto c = t.contiguous();
    return {reinterpret_cast<const char*>(c.data_ptr<uint8_t>()), static_cast<size_t>(c.numel())};
}

std::string tensor_key(int mode, size_t layer, char which) {
    return "m" + std::to_string(mode) + "_l" + std::to_string(layer) + "_" + which;
}

} // namespace

void write_bank(const AdapterBank& bank, torch::serialize::OutputArchive& archive) {
    nlohmann::json meta;
    meta["format_version"] = AdapterBank::kFormatVersion;
    meta["rank"] = bank.rank();
    meta["scale"] = bank.scale();
    meta["active_mode"] = to_string(bank.active_mode());
    meta["shared"] = bank.shared();
    meta["modes"] = bank.shared() ? nlohmann::json{"inpaint"} : nlohmann::json{"inpaint", "gen"};
    auto layers = nlohmann::json::array();
    const auto ids = bank.layer_ids();
    for (const auto& id : ids) {
        const auto& a = bank.adapter(TaskMode::inpaint, id);
        layers.push_back({{"id", id}, {"d_out", a.d_out()}, {"d_in", a.d_in()},
                          {"rank", a.rank}, {"scale", a.scale}});
    }
    meta["layers"] = layers;
    archive.write("meta", string_tensor(meta.dump()));
    const int modes = bank.shared() ? 1 : 2;
    for (int m = 0; m < modes; ++m) {
        const TaskMode mode = m == 0 ? TaskMode::inpaint : TaskMode::gen;
        for (size_t i = 0; i < ids.size(); ++i) {
            const auto& a = bank.adapter(mode, ids[i]);
            archive.write(tensor_key(m, i, 'A'), a.A.detach());
            archive.write(tensor_key(m, i, 'B'), a.B.detach());
        }
    }
}

AdapterBank read_bank(torch::serialize::InputArchive& archive) {
    torch::Tensor meta_t;
    archive.read("meta", meta_t);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(tensor_string(meta_t));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("adapter bank metadata is malformed: ") + e.what());
    }
    const int version = meta.value("format_version", -1);
    if (version != AdapterBank::kFormatVersion)
        throw ConfigError("adapter bank format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(AdapterBank::kFormatVersion) + ")");
    AdapterBank bank;
    const bool shared = meta.at("shared").get<bool>();
    bank.set_shared(shared);
    const auto& layers = meta.at("layers");
    for (int m = 0; m < (shared ? 1 : 2); ++m) {
        const TaskMode mode = m == 0 ? TaskMode::inpaint : TaskMode::gen;
        for (size_t i = 0; i < layers.size(); ++i) {
            LoraAdapter a;
            a.layer_id = layers[i].at("id").get<std::string>();
            a.rank = layers[i].at("rank").get<int64_t>();
            a.scale = layers[i].at("scale").get<double>();
            archive.read(tensor_key(m, i, 'A'), a.A);
            archive.read(tensor_key(m, i, 'B'), a.B);
            if (a.A.size(0) != a.rank || a.B.size(0) != layers[i].at("d_out").get<int64_t>() ||
                a.A.size(1) != layers[i].at("d_in").get<int64_t>())
                throw IoError("adapter '" + a.layer_id + "' matrices disagree with their metadata");
            bank.insert(mode, a);
            if (shared) bank.insert(TaskMode::gen, a);
        }
    }
    bank.set_active(parse_task_mode(meta.at("active_mode").get<std::string>()));
    return bank;
}

void save_bank(const AdapterBank& bank, const std::filesystem::path& path) {
    torch::serialize::OutputArchive archive;
    write_bank(bank, archive);
    try {
        archive.save_to(path.string());
    } catch (const c10::Error& e) {
        throw IoError("cannot write adapter bank '" + path.string() + "'");
    }
}

AdapterBank load_bank(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("missing adapter bank '" + path.string() + "'");
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw IoError("cannot read adapter bank '" + path.string() + "'");
    }
    return read_bank(archive);
}

} // namespace cdiff
