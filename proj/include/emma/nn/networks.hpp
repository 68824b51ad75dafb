#pragma once

#include <map>
#include <string>

#include "emma/image.hpp"
#include "emma/nn/graph.hpp"
#include "emma/nn/params.hpp"

namespace emma::nn {

// Which branches a Restormer-CNN block carries. The single-branch variants
// double the surviving branch to keep capacity comparable (ablations V/VI).
enum class BlockVariant { both, global_only, local_only };

BlockVariant block_variant_from_string(const std::string& s);
std::string to_string(BlockVariant v);

struct FuserArch {
    int scales = 2;         // S
    int base_channels = 8;  // C0; scale s uses C0 * 2^s channels
    BlockVariant variant = BlockVariant::both;

    std::string to_json() const;
    static FuserArch from_json(const std::string& text);
};

struct SensorArch {
    int depth = 3;          // resolution levels, including the bottleneck
    int base_channels = 8;

    std::string to_json() const;
    static SensorArch from_json(const std::string& text);
};

// Parameter construction (zero-valued) and deterministic initialization:
// fan-in-scaled uniform weights, zero biases, unit layer-norm gains; the
// output head bias stays zero so the initial sigmoid output sits near 0.5.
ParamSet make_fuser_params(const FuserArch& arch);
ParamSet make_sensor_params(const SensorArch& arch);
void init_params(ParamSet& params, unsigned long long seed);

// Closed-form parameter counts (documented in docs/ARCHITECTURE.md); the test
// suite checks them against the enumerated sets.
std::size_t fuser_param_count(const FuserArch& arch);
std::size_t sensor_param_count(const SensorArch& arch);

// Parameters bound into a graph as leaves, keyed by tensor path.
struct BoundParams {
    std::map<std::string, NodePtr> nodes;
    const NodePtr& at(const std::string& name) const;
};

BoundParams bind_params(Graph& g, const ParamSet& params, bool trainable);
// Adds each bound node's gradient into the ParamSet gradient buffers.
void accumulate_grads(const BoundParams& bound, ParamSet& params);

// One Restormer-CNN unit: embed -> (channel-attention branch || residual conv
// branch) -> concat + 1x1 conv -> 3x3 conv.
NodePtr restormer_cnn_block_forward(Graph& g, const BoundParams& p,
                                    const std::string& prefix, NodePtr x,
                                    BlockVariant variant = BlockVariant::both);

// f = F(i, v): multi-scale extraction, per-scale fusion, coarse-to-fine
// reconstruction with skip connections, sigmoid head.
NodePtr ufuser_forward(Graph& g, const BoundParams& p, const FuserArch& arch,
                       NodePtr i, NodePtr v);

// Pseudo-sensing U-Net with sigmoid head.
NodePtr sensor_forward(Graph& g, const BoundParams& p, const SensorArch& arch,
                       NodePtr f);

// Image-level inference wrappers (no gradient bookkeeping).
Image ufuser_infer(const ParamSet& params, const FuserArch& arch, const Image& i,
                   const Image& v);
Image sensor_infer(const ParamSet& params, const SensorArch& arch, const Image& f);

Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t);

}  // namespace emma::nn
