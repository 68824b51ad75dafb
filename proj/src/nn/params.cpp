#include "emma/nn/params.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "emma/tensor_io.hpp"

namespace emma::nn {

ParamTensor& ParamSet::add(const std::string& name, std::vector<int> shape) {
    if (index_.count(name)) throw ConfigError("ParamSet: duplicate tensor " + name);
    index_[name] = tensors_.size();
    tensors_.emplace_back(name, std::move(shape));
    return tensors_.back();
}

ParamTensor& ParamSet::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("ParamSet: unknown tensor " + name);
    return tensors_[it->second];
}

const ParamTensor& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("ParamSet: unknown tensor " + name);
    return tensors_[it->second];
}

bool ParamSet::contains(const std::string& name) const {
    return index_.count(name) != 0;
}

std::size_t ParamSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.values.numel();
    return n;
}

void ParamSet::zero_grads() {
    for (auto& t : tensors_) std::fill(t.grad.v.begin(), t.grad.v.end(), 0.0);
}

void ParamSet::check_finite(const char* where) const {
    for (const auto& t : tensors_) {
        for (double v : t.values.v) {
            if (!std::isfinite(v)) {
                throw NumericError(std::string(where) + ": non-finite value in " + t.name);
            }
        }
        for (double g : t.grad.v) {
            if (!std::isfinite(g)) {
                throw NumericError(std::string(where) + ": non-finite grad in " + t.name);
            }
        }
    }
}

std::vector<double> ParamSet::flat_values() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto& t : tensors_) {
        flat.insert(flat.end(), t.values.v.begin(), t.values.v.end());
    }
    return flat;
}

void ParamSet::set_flat_values(const std::vector<double>& flat) {
    if (flat.size() != parameter_count()) {
        throw ShapeError("ParamSet::set_flat_values: size mismatch");
    }
    std::size_t off = 0;
    for (auto& t : tensors_) {
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + t.values.numel()),
                  t.values.v.begin());
        off += t.values.numel();
    }
}

namespace {

std::string file_name_for(const std::string& tensor_name) {
    std::string out;
    for (char c : tensor_name) out += (c == '/') ? std::string("__") : std::string(1, c);
    return out + ".emt";
}

}  // namespace

void save_checkpoint(const ParamSet& params, const CheckpointMeta& meta,
                     const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["schema"] = 1;
    j["kind"] = meta.kind;
    j["arch"] = nlohmann::json::parse(meta.arch_json);
    j["seed"] = meta.seed;
    j["step"] = meta.step;
    nlohmann::json names = nlohmann::json::array();
    for (const auto& t : params.tensors()) names.push_back(t.name);
    j["tensors"] = names;
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw IoError("save_checkpoint: cannot write manifest in " + dir);
    out << j.dump(2) << "\n";

    for (const auto& t : params.tensors()) {
        TensorBlob blob;
        for (int d : t.values.shape) blob.dims.push_back(static_cast<unsigned>(d));
        blob.values.assign(t.values.v.begin(), t.values.v.end());
        save_tensor(blob, (fs::path(dir) / file_name_for(t.name)).string());
    }
}

CheckpointMeta load_checkpoint(ParamSet& params, const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw IoError("load_checkpoint: missing manifest in " + dir);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    }
    if (!j.contains("schema") || j["schema"] != 1) {
        throw FormatError("checkpoint manifest: unsupported schema");
    }
    CheckpointMeta meta;
    meta.kind = j.at("kind").get<std::string>();
    meta.arch_json = j.at("arch").dump();
    meta.seed = j.at("seed").get<long long>();
    meta.step = j.at("step").get<long long>();

    for (auto& t : params.tensors()) {
        const TensorBlob blob =
            load_tensor((fs::path(dir) / file_name_for(t.name)).string());
        if (blob.values.size() != t.values.numel()) {
            throw FormatError("checkpoint: shape mismatch for " + t.name);
        }
        for (std::size_t i = 0; i < blob.values.size(); ++i) {
            t.values.v[i] = static_cast<double>(blob.values[i]);
        }
    }
    return meta;
}

}  // namespace emma::nn
