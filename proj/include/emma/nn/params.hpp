#pragma once

#include <map>
#include <string>
#include <vector>

#include "emma/nn/tensor.hpp"

namespace emma::nn {

// Named parameter with its gradient accumulator. Gradients are zeroed between
// optimizer steps and must stay finite after each one.
struct ParamTensor {
    std::string name;  // slash-separated path, e.g. "fuser/s0/ext_a/attn/wq"
    Tensor values;
    Tensor grad;

    ParamTensor(std::string n, std::vector<int> shape)
        : name(std::move(n)), values(shape), grad(std::move(shape)) {}
};

// Ordered collection; order is the canonical serialization order.
class ParamSet {
public:
    ParamTensor& add(const std::string& name, std::vector<int> shape);
    ParamTensor& at(const std::string& name);
    const ParamTensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<ParamTensor>& tensors() { return tensors_; }
    const std::vector<ParamTensor>& tensors() const { return tensors_; }

    std::size_t parameter_count() const;
    void zero_grads();
    void check_finite(const char* where) const;

    // Concatenation of all values (used by finite-difference checks).
    std::vector<double> flat_values() const;
    void set_flat_values(const std::vector<double>& flat);

private:
    std::vector<ParamTensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

// Checkpoint directory: manifest.json plus one EMT1 file per tensor, named by
// its path with '/' mapped to '__'.
struct CheckpointMeta {
    std::string kind;        // "fuser" or "sensor"
    std::string arch_json;   // architecture config as canonical JSON text
    long long seed = 0;
    long long step = 0;
};

void save_checkpoint(const ParamSet& params, const CheckpointMeta& meta,
                     const std::string& dir);
CheckpointMeta load_checkpoint(ParamSet& params, const std::string& dir);

}  // namespace emma::nn
