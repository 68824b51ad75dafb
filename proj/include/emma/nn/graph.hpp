#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "emma/nn/tensor.hpp"

namespace emma::nn {

// One value in the computation DAG. Gradient buffers exist only on the
// grad-requiring subgraph; inference builds a closure-free graph.
struct Node {
    Tensor val;
    Tensor grad;  // empty unless needs_grad
    bool needs_grad = false;
};
using NodePtr = std::shared_ptr<Node>;

// Dynamic tape. Creation order is the topological order, so reverse-mode
// differentiation replays the recorded closures back to front. A Graph is
// built per training step and discarded; no state survives between steps.
class Graph {
public:
    NodePtr input(Tensor t);                  // constant leaf
    NodePtr param(Tensor t);                  // differentiable leaf
    NodePtr leaf(Tensor t, bool needs_grad);

    // y = conv(x, w) + b; 'same' zero padding from the (odd) kernel size,
    // stride 1 or 2. x:[Ci,H,W], w:[Co,Ci,K,K], b:[Co] (optional).
    NodePtr conv2d(NodePtr x, NodePtr w, NodePtr b, int stride = 1);

    NodePtr add(NodePtr a, NodePtr b);
    NodePtr sub(NodePtr a, NodePtr b);
    NodePtr mul(NodePtr a, NodePtr b);  // elementwise
    NodePtr scale(NodePtr x, double c);

    NodePtr relu(NodePtr x);
    NodePtr gelu(NodePtr x);
    NodePtr sigmoid(NodePtr x);

    // Per-pixel normalization over the channel axis with learnable gain/bias.
    NodePtr layer_norm_channels(NodePtr x, NodePtr gain, NodePtr bias,
                                double eps = 1e-6);

    NodePtr concat_channels(NodePtr a, NodePtr b);
    NodePtr upsample_nearest2x(NodePtr x);

    // Rows = leading dim, remaining dims flattened as columns.
    NodePtr row_l2_normalize(NodePtr x, double eps = 1e-12);
    NodePtr matmul_nt(NodePtr a, NodePtr b);        // [R,K]x[S,K]^T -> [R,S]
    NodePtr matmul(NodePtr a, NodePtr b);           // [R,S]x[S,...] -> [R,cols(b)]
    NodePtr softmax_rows(NodePtr m);
    NodePtr scale_by_exp_neg(NodePtr x, NodePtr log_scale);  // x * exp(-s)

    // Exact pixel permutation: out[perm[p]] = x[p] per channel plane.
    NodePtr permute_pixels(NodePtr x, std::shared_ptr<const std::vector<int>> perm);

    // 3x3 Sobel responses with reflect borders; [1,H,W] -> [2,H,W] (gx, gy).
    NodePtr sobel_pair(NodePtr x);

    NodePtr mean_abs_diff(NodePtr a, NodePtr b);    // scalar [1]
    NodePtr mean_sq_diff(NodePtr a, NodePtr b);     // scalar [1]
    NodePtr weighted_sum(const std::vector<NodePtr>& terms,
                         const std::vector<double>& weights);  // scalar [1]

    // Reverse pass from a scalar root; accumulates into leaf grads.
    void backward(const NodePtr& root);

    std::size_t node_count() const { return tape_.size(); }

private:
    struct Step {
        NodePtr node;                    // keeps the DAG alive
        std::function<void()> backward;  // empty for leaves / constant subgraphs
    };
    NodePtr emit(Tensor val, bool needs_grad, std::function<void()> bw);
    std::vector<Step> tape_;
};

}  // namespace emma::nn
