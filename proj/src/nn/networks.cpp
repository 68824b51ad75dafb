#include "emma/nn/networks.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace emma::nn {

namespace {

void require_positive(int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string("architecture: ") + what + " must be positive");
}

bool divisible_by_pow2(int side, int levels) {
    for (int i = 0; i < levels; ++i) {
        if (side % 2 != 0) return false;
        side /= 2;
    }
    return true;
}

// --- tensor enumeration -----------------------------------------------------

void add_conv(ParamSet& ps, const std::string& name, int co, int ci, int k,
              bool bias = true) {
    ps.add(name + "_w", {co, ci, k, k});
    if (bias) ps.add(name + "_b", {co});
}

void add_global_branch(ParamSet& ps, const std::string& prefix, int c) {
    ps.add(prefix + "/ln1_g", {c});
    ps.add(prefix + "/ln1_b", {c});
    add_conv(ps, prefix + "/attn_wq", c, c, 1, false);
    add_conv(ps, prefix + "/attn_wk", c, c, 1, false);
    add_conv(ps, prefix + "/attn_wv", c, c, 1, false);
    add_conv(ps, prefix + "/attn_wo", c, c, 1);
    ps.add(prefix + "/attn_log_tau", {1});
    ps.add(prefix + "/ln2_g", {c});
    ps.add(prefix + "/ln2_b", {c});
    add_conv(ps, prefix + "/ffn_w1", 2 * c, c, 1);
    add_conv(ps, prefix + "/ffn_wg", 2 * c, c, 1);
    add_conv(ps, prefix + "/ffn_w2", c, 2 * c, 1);
}

void add_local_branch(ParamSet& ps, const std::string& prefix, int c) {
    add_conv(ps, prefix + "/res1", c, c, 3);
    add_conv(ps, prefix + "/res2", c, c, 3);
}

void add_block(ParamSet& ps, const std::string& prefix, int cin, int c,
               BlockVariant variant) {
    add_conv(ps, prefix + "/embed", c, cin, 3);
    switch (variant) {
        case BlockVariant::both:
            add_global_branch(ps, prefix, c);
            add_local_branch(ps, prefix, c);
            break;
        case BlockVariant::global_only:
            add_global_branch(ps, prefix, c);
            add_global_branch(ps, prefix + "/g2", c);
            break;
        case BlockVariant::local_only:
            add_local_branch(ps, prefix, c);
            add_local_branch(ps, prefix + "/l2", c);
            break;
    }
    add_conv(ps, prefix + "/inter", c, 2 * c, 1);
    add_conv(ps, prefix + "/final", c, c, 3);
}

}  // namespace

BlockVariant block_variant_from_string(const std::string& s) {
    if (s == "both") return BlockVariant::both;
    if (s == "global_only") return BlockVariant::global_only;
    if (s == "local_only") return BlockVariant::local_only;
    throw ConfigError("unknown block variant: " + s);
}

std::string to_string(BlockVariant v) {
    switch (v) {
        case BlockVariant::both: return "both";
        case BlockVariant::global_only: return "global_only";
        case BlockVariant::local_only: return "local_only";
    }
    return "both";
}

std::string FuserArch::to_json() const {
    nlohmann::json j = {{"scales", scales},
                        {"base_channels", base_channels},
                        {"variant", to_string(variant)}};
    return j.dump();
}

FuserArch FuserArch::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    FuserArch a;
    a.scales = j.at("scales").get<int>();
    a.base_channels = j.at("base_channels").get<int>();
    a.variant = block_variant_from_string(j.at("variant").get<std::string>());
    return a;
}

std::string SensorArch::to_json() const {
    nlohmann::json j = {{"depth", depth}, {"base_channels", base_channels}};
    return j.dump();
}

SensorArch SensorArch::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    SensorArch a;
    a.depth = j.at("depth").get<int>();
    a.base_channels = j.at("base_channels").get<int>();
    return a;
}

ParamSet make_fuser_params(const FuserArch& arch) {
    require_positive(arch.scales, "scales");
    require_positive(arch.base_channels, "base_channels");
    ParamSet ps;
    const int s_count = arch.scales;
    auto ch = [&](int s) { return arch.base_channels << s; };
    for (int s = 0; s < s_count; ++s) {
        const int cin = (s == 0) ? 1 : ch(s);
        add_block(ps, "fuser/s" + std::to_string(s) + "/ext_a", cin, ch(s), arch.variant);
        add_block(ps, "fuser/s" + std::to_string(s) + "/ext_b", cin, ch(s), arch.variant);
        add_block(ps, "fuser/s" + std::to_string(s) + "/fuse", 2 * ch(s), ch(s),
                  arch.variant);
    }
    for (int s = 0; s + 1 < s_count; ++s) {
        add_conv(ps, "fuser/s" + std::to_string(s) + "/down_a", ch(s + 1), ch(s), 3);
        add_conv(ps, "fuser/s" + std::to_string(s) + "/down_b", ch(s + 1), ch(s), 3);
        add_conv(ps, "fuser/s" + std::to_string(s) + "/up", ch(s), ch(s + 1), 3);
        add_block(ps, "fuser/s" + std::to_string(s) + "/rec", 2 * ch(s), ch(s),
                  arch.variant);
    }
    add_conv(ps, "fuser/head", 1, arch.base_channels, 3);
    return ps;
}

ParamSet make_sensor_params(const SensorArch& arch) {
    require_positive(arch.depth, "depth");
    require_positive(arch.base_channels, "base_channels");
    ParamSet ps;
    auto ch = [&](int d) { return arch.base_channels << d; };
    for (int d = 0; d < arch.depth; ++d) {
        const int cin = (d == 0) ? 1 : ch(d);
        add_conv(ps, "sensor/enc" + std::to_string(d) + "/c1", ch(d), cin, 3);
        add_conv(ps, "sensor/enc" + std::to_string(d) + "/c2", ch(d), ch(d), 3);
    }
    for (int d = 0; d + 1 < arch.depth; ++d) {
        add_conv(ps, "sensor/down" + std::to_string(d), ch(d + 1), ch(d), 3);
        add_conv(ps, "sensor/dec" + std::to_string(d) + "/up", ch(d), ch(d + 1), 3);
        add_conv(ps, "sensor/dec" + std::to_string(d) + "/c1", ch(d), 2 * ch(d), 3);
        add_conv(ps, "sensor/dec" + std::to_string(d) + "/c2", ch(d), ch(d), 3);
    }
    add_conv(ps, "sensor/head", 1, arch.base_channels, 1);
    return ps;
}

void init_params(ParamSet& params, unsigned long long seed) {
    Rng rng(seed ^ 0x5bd1e995u);
    for (ParamTensor& t : params.tensors()) {
        const auto& shape = t.values.shape;
        const std::string& name = t.name;
        const bool is_gain = name.ends_with("ln1_g") || name.ends_with("ln2_g");
        const bool is_weight = shape.size() == 4;
        if (is_weight) {
            // fan-in = Ci * K * K
            const double fan_in =
                static_cast<double>(shape[1]) * shape[2] * shape[3];
            const double bound = std::sqrt(1.0 / fan_in);
            for (double& v : t.values.v) v = rng.uniform(-bound, bound);
        } else if (is_gain) {
            for (double& v : t.values.v) v = 1.0;
        } else {
            for (double& v : t.values.v) v = 0.0;  // biases, log_tau
        }
    }
}

namespace {

std::size_t block_count(int cin, int c, BlockVariant variant) {
    const std::size_t c2 = static_cast<std::size_t>(c) * c;
    const std::size_t embed = 9ull * cin * c + c;
    const std::size_t global_branch = 4 * c + (4 * c2 + c + 1) + (6 * c2 + 5 * c);
    const std::size_t local_branch = 18 * c2 + 2 * c;
    const std::size_t tail = (2 * c2 + c) + (9 * c2 + c);
    std::size_t branches = 0;
    switch (variant) {
        case BlockVariant::both: branches = global_branch + local_branch; break;
        case BlockVariant::global_only: branches = 2 * global_branch; break;
        case BlockVariant::local_only: branches = 2 * local_branch; break;
    }
    return embed + branches + tail;
}

}  // namespace

std::size_t fuser_param_count(const FuserArch& arch) {
    auto ch = [&](int s) { return arch.base_channels << s; };
    std::size_t total = 0;
    for (int s = 0; s < arch.scales; ++s) {
        const int cin = (s == 0) ? 1 : ch(s);
        total += 2 * block_count(cin, ch(s), arch.variant);
        total += block_count(2 * ch(s), ch(s), arch.variant);
    }
    for (int s = 0; s + 1 < arch.scales; ++s) {
        total += 2 * (9ull * ch(s) * ch(s + 1) + ch(s + 1));  // down a, b
        total += 9ull * ch(s + 1) * ch(s) + ch(s);            // up
        total += block_count(2 * ch(s), ch(s), arch.variant); // rec
    }
    total += 9ull * arch.base_channels + 1;  // head
    return total;
}

std::size_t sensor_param_count(const SensorArch& arch) {
    auto ch = [&](int d) { return static_cast<std::size_t>(arch.base_channels) << d; };
    std::size_t total = 0;
    for (int d = 0; d < arch.depth; ++d) {
        const std::size_t cin = (d == 0) ? 1 : ch(d);
        total += 9 * cin * ch(d) + ch(d);
        total += 9 * ch(d) * ch(d) + ch(d);
    }
    for (int d = 0; d + 1 < arch.depth; ++d) {
        total += 9 * ch(d) * ch(d + 1) + ch(d + 1);      // down
        total += 9 * ch(d + 1) * ch(d) + ch(d);          // up
        total += 9 * (2 * ch(d)) * ch(d) + ch(d);        // dec c1
        total += 9 * ch(d) * ch(d) + ch(d);              // dec c2
    }
    total += ch(0) + 1;  // 1x1 head
    return total;
}

// --- graph binding ----------------------------------------------------------

const NodePtr& BoundParams::at(const std::string& name) const {
    auto it = nodes.find(name);
    if (it == nodes.end()) throw ConfigError("BoundParams: unknown tensor " + name);
    return it->second;
}

BoundParams bind_params(Graph& g, const ParamSet& params, bool trainable) {
    BoundParams bound;
    for (const ParamTensor& t : params.tensors()) {
        bound.nodes[t.name] = g.leaf(t.values, trainable);
    }
    return bound;
}

void accumulate_grads(const BoundParams& bound, ParamSet& params) {
    for (ParamTensor& t : params.tensors()) {
        const NodePtr& n = bound.at(t.name);
        if (!n->needs_grad) continue;
        for (std::size_t i = 0; i < t.grad.numel(); ++i) {
            t.grad.v[i] += n->grad.v[i];
        }
    }
}

// --- forwards ----------------------------------------------------------------

namespace {

NodePtr conv_named(Graph& g, const BoundParams& p, const std::string& name,
                   NodePtr x, int stride = 1) {
    return g.conv2d(x, p.at(name + "_w"), p.at(name + "_b"), stride);
}

NodePtr global_branch_forward(Graph& g, const BoundParams& p,
                              const std::string& prefix, NodePtr x) {
    // Pre-norm channel attention with a learnable temperature, then a gated
    // feed-forward, each with a residual connection.
    NodePtr h = g.layer_norm_channels(x, p.at(prefix + "/ln1_g"), p.at(prefix + "/ln1_b"));
    NodePtr q = g.conv2d(h, p.at(prefix + "/attn_wq_w"), nullptr);
    NodePtr k = g.conv2d(h, p.at(prefix + "/attn_wk_w"), nullptr);
    NodePtr v = g.conv2d(h, p.at(prefix + "/attn_wv_w"), nullptr);
    NodePtr logits = g.matmul_nt(g.row_l2_normalize(q), g.row_l2_normalize(k));
    NodePtr attn = g.softmax_rows(g.scale_by_exp_neg(logits, p.at(prefix + "/attn_log_tau")));
    NodePtr att_out = g.matmul(attn, v);
    NodePtr x1 = g.add(x, conv_named(g, p, prefix + "/attn_wo", att_out));

    NodePtr h2 = g.layer_norm_channels(x1, p.at(prefix + "/ln2_g"), p.at(prefix + "/ln2_b"));
    NodePtr u = conv_named(g, p, prefix + "/ffn_w1", h2);
    NodePtr gate = g.gelu(conv_named(g, p, prefix + "/ffn_wg", h2));
    NodePtr ff = conv_named(g, p, prefix + "/ffn_w2", g.mul(gate, u));
    return g.add(x1, ff);
}

NodePtr local_branch_forward(Graph& g, const BoundParams& p,
                             const std::string& prefix, NodePtr x) {
    NodePtr h = g.relu(conv_named(g, p, prefix + "/res1", x));
    return g.add(x, conv_named(g, p, prefix + "/res2", h));
}

}  // namespace

NodePtr restormer_cnn_block_forward(Graph& g, const BoundParams& p,
                                    const std::string& prefix, NodePtr x,
                                    BlockVariant variant) {
    NodePtr e = conv_named(g, p, prefix + "/embed", x);
    NodePtr first, second;
    switch (variant) {
        case BlockVariant::both:
            first = global_branch_forward(g, p, prefix, e);
            second = local_branch_forward(g, p, prefix, e);
            break;
        case BlockVariant::global_only:
            first = global_branch_forward(g, p, prefix, e);
            second = global_branch_forward(g, p, prefix + "/g2", first);
            break;
        case BlockVariant::local_only:
            first = local_branch_forward(g, p, prefix, e);
            second = local_branch_forward(g, p, prefix + "/l2", first);
            break;
    }
    NodePtr mixed = conv_named(g, p, prefix + "/inter", g.concat_channels(first, second));
    return conv_named(g, p, prefix + "/final", mixed);
}

NodePtr ufuser_forward(Graph& g, const BoundParams& p, const FuserArch& arch,
                       NodePtr i, NodePtr v) {
    const auto& si = i->val.shape;
    const auto& sv = v->val.shape;
    if (si.size() != 3 || si[0] != 1 || sv != si) {
        throw ShapeError("ufuser_forward: inputs must be matching [1,H,W]");
    }
    if (si[1] != si[2]) throw ShapeError("ufuser_forward: inputs must be square");
    if (!divisible_by_pow2(si[1], arch.scales - 1)) {
        throw ShapeError("ufuser_forward: side not divisible by 2^(S-1)");
    }

    std::vector<NodePtr> fused(arch.scales);
    NodePtr feat_a, feat_b;
    for (int s = 0; s < arch.scales; ++s) {
        const std::string scale = "fuser/s" + std::to_string(s);
        NodePtr in_a = (s == 0) ? i
                                : conv_named(g, p, "fuser/s" + std::to_string(s - 1) + "/down_a",
                                             feat_a, 2);
        NodePtr in_b = (s == 0) ? v
                                : conv_named(g, p, "fuser/s" + std::to_string(s - 1) + "/down_b",
                                             feat_b, 2);
        feat_a = restormer_cnn_block_forward(g, p, scale + "/ext_a", in_a, arch.variant);
        feat_b = restormer_cnn_block_forward(g, p, scale + "/ext_b", in_b, arch.variant);
        fused[s] = restormer_cnn_block_forward(g, p, scale + "/fuse",
                                               g.concat_channels(feat_a, feat_b),
                                               arch.variant);
    }
    NodePtr r = fused[arch.scales - 1];
    for (int s = arch.scales - 2; s >= 0; --s) {
        const std::string scale = "fuser/s" + std::to_string(s);
        NodePtr up = conv_named(g, p, scale + "/up", g.upsample_nearest2x(r));
        r = restormer_cnn_block_forward(g, p, scale + "/rec",
                                        g.concat_channels(up, fused[s]), arch.variant);
    }
    return g.sigmoid(conv_named(g, p, "fuser/head", r));
}

NodePtr sensor_forward(Graph& g, const BoundParams& p, const SensorArch& arch,
                       NodePtr f) {
    const auto& s = f->val.shape;
    if (s.size() != 3 || s[0] != 1) throw ShapeError("sensor_forward: expect [1,H,W]");
    if (s[1] != s[2]) throw ShapeError("sensor_forward: input must be square");
    if (!divisible_by_pow2(s[1], arch.depth - 1)) {
        throw ShapeError("sensor_forward: side not divisible by 2^(D-1)");
    }
    std::vector<NodePtr> skips(arch.depth);
    NodePtr h = f;
    for (int d = 0; d < arch.depth; ++d) {
        if (d > 0) h = conv_named(g, p, "sensor/down" + std::to_string(d - 1), h, 2);
        const std::string enc = "sensor/enc" + std::to_string(d);
        h = g.relu(conv_named(g, p, enc + "/c1", h));
        h = g.relu(conv_named(g, p, enc + "/c2", h));
        skips[d] = h;
    }
    for (int d = arch.depth - 2; d >= 0; --d) {
        const std::string dec = "sensor/dec" + std::to_string(d);
        h = conv_named(g, p, dec + "/up", g.upsample_nearest2x(h));
        h = g.concat_channels(h, skips[d]);
        h = g.relu(conv_named(g, p, dec + "/c1", h));
        h = g.relu(conv_named(g, p, dec + "/c2", h));
    }
    return g.sigmoid(conv_named(g, p, "sensor/head", h));
}

// --- inference wrappers -------------------------------------------------------

Tensor image_to_tensor(const Image& img) {
    if (img.channels != 1) throw ShapeError("image_to_tensor: single-channel only");
    Tensor t({1, img.height, img.width});
    t.v = img.data;
    return t;
}

Image tensor_to_image(const Tensor& t) {
    if (t.shape.size() != 3 || t.shape[0] != 1) {
        throw ShapeError("tensor_to_image: expect [1,H,W]");
    }
    Image img(t.shape[1], t.shape[2]);
    img.data = t.v;
    for (double& v : img.data) v = clamp01(v);
    return img;
}

Image ufuser_infer(const ParamSet& params, const FuserArch& arch, const Image& i,
                   const Image& v) {
    Graph g;
    BoundParams bound = bind_params(g, params, false);
    NodePtr out = ufuser_forward(g, bound, arch, g.input(image_to_tensor(i)),
                                 g.input(image_to_tensor(v)));
    return tensor_to_image(out->val);
}

Image sensor_infer(const ParamSet& params, const SensorArch& arch, const Image& f) {
    Graph g;
    BoundParams bound = bind_params(g, params, false);
    NodePtr out = sensor_forward(g, bound, arch, g.input(image_to_tensor(f)));
    return tensor_to_image(out->val);
}

}  // namespace emma::nn
