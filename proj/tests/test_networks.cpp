#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "emma/nn/networks.hpp"
#include "support/finite_diff.hpp"

using namespace emma;
using namespace emma::nn;
using emma::verify::finite_difference_at;
using emma::verify::relative_error;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.v) v = scale * rng.normal();
    return t;
}

Image random_image(Rng& rng, int h, int w) {
    Image img(h, w);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

// FD-checks a sampled subset of every parameter tensor of `params` against the
// analytic gradient of `loss_of_params`. Central differences, h = 1e-5 at
// float64. Elements pass on relative error < tol or, for near-zero gradients
// where truncation noise dominates the ratio, on an absolute floor well below
// the gradient scale; the sampled vector must also agree norm-wise.
void spot_check_gradients(
    ParamSet& params,
    const std::function<double(const ParamSet&)>& loss_of_params,
    const std::function<void(ParamSet&)>& compute_grads, double tol,
    int samples_per_tensor) {
    params.zero_grads();
    compute_grads(params);
    Rng pick(777);
    int checked = 0, skipped = 0;
    auto fd_at = [&](ParamTensor& t, int j, double h) {
        const double saved = t.values.v[static_cast<std::size_t>(j)];
        t.values.v[static_cast<std::size_t>(j)] = saved + h;
        const double up = loss_of_params(params);
        t.values.v[static_cast<std::size_t>(j)] = saved - h;
        const double down = loss_of_params(params);
        t.values.v[static_cast<std::size_t>(j)] = saved;
        return (up - down) / (2.0 * h);
    };
    for (std::size_t ti = 0; ti < params.tensors().size(); ++ti) {
        ParamTensor& t = params.tensors()[ti];
        const int n = static_cast<int>(t.values.numel());
        int accepted = 0;
        for (int attempt = 0; attempt < 3 * samples_per_tensor &&
                              accepted < std::min(samples_per_tensor, n);
             ++attempt) {
            const int j = static_cast<int>(pick.uniform_int(0, n - 1));
            const double h = 1e-5;
            const double fd = fd_at(t, j, h);
            const double fd_half = fd_at(t, j, h / 2.0);
            const double analytic = t.grad.v[static_cast<std::size_t>(j)];
            // A ReLU/L1 kink inside the FD window corrupts the estimate; the
            // two step sizes then disagree far beyond h^2 truncation.
            const double consistency = std::abs(fd - fd_half);
            if (consistency > std::max(5e-8, 1e-3 * std::max({std::abs(fd),
                                                              std::abs(fd_half),
                                                              std::abs(analytic)}))) {
                ++skipped;
                continue;
            }
            // Richardson extrapolation cancels the h^2 truncation term, which
            // is substantial along bias directions (softmax/LN curvature).
            const double fd_rich = (4.0 * fd_half - fd) / 3.0;
            ++accepted;
            ++checked;
            INFO(t.name, "[", j, "]: analytic=", analytic, " fd=", fd_rich);
            const bool rel_ok = relative_error(analytic, fd_rich) < tol;
            // For near-zero elements a kink inside the window biases the FD
            // estimate itself at the ~1e-7 level (it converges to the
            // analytic value as h -> 0); 1e-6 sits far below real gradient
            // magnitudes, so scaling/sign bugs still trip the checks above.
            const bool abs_ok = std::abs(analytic - fd_rich) < 1e-6;
            REQUIRE((rel_ok || abs_ok));
        }
    }
    REQUIRE(checked > 0);
    // The filter must stay the exception, not the rule.
    CHECK(skipped <= (checked + skipped) / 3);
}

}  // namespace

TEST_CASE("restormer-cnn block: zero params give zero output") {
    const int c = 4;
    ParamSet ps;
    Graph g;
    // build a lone block by reusing the fuser naming scheme
    FuserArch arch{1, c, BlockVariant::both};
    ParamSet fp = make_fuser_params(arch);  // all zeros
    BoundParams bound = bind_params(g, fp, false);
    Tensor x({1, 6, 6});
    NodePtr out = restormer_cnn_block_forward(g, bound, "fuser/s0/ext_a", g.input(x));
    for (double v : out->val.v) CHECK(v == 0.0);
}

TEST_CASE("restormer-cnn block preserves spatial dims") {
    Rng rng(31);
    FuserArch arch{1, 8, BlockVariant::both};
    ParamSet fp = make_fuser_params(arch);
    init_params(fp, 5);
    Graph g;
    BoundParams bound = bind_params(g, fp, false);
    NodePtr out = restormer_cnn_block_forward(g, bound, "fuser/s0/ext_a",
                                              g.input(random_tensor(rng, {1, 16, 16})));
    CHECK(out->val.shape == std::vector<int>{8, 16, 16});
}

TEST_CASE("channel attention matches a hand-computed softmax(QK^T/tau)V map") {
    // 2 channels, 2x2 input, identity projections, tau = 1 (log_tau = 0).
    // Replicates the attention sub-map arithmetic by hand at double precision.
    Graph g;
    Tensor x({2, 2, 2});
    x.v = {0.1, -0.4, 0.7, 0.2, 0.5, 0.3, -0.2, 0.6};
    NodePtr xin = g.input(x);
    Tensor eye({2, 2, 1, 1});
    eye.v = {1.0, 0.0, 0.0, 1.0};
    NodePtr q = g.conv2d(xin, g.input(eye), nullptr);
    NodePtr k = g.conv2d(xin, g.input(eye), nullptr);
    NodePtr v = g.conv2d(xin, g.input(eye), nullptr);
    Tensor lt({1});
    lt.v = {0.0};
    NodePtr logits = g.matmul_nt(g.row_l2_normalize(q), g.row_l2_normalize(k));
    NodePtr attn = g.softmax_rows(g.scale_by_exp_neg(logits, g.input(lt)));
    NodePtr out = g.matmul(attn, v);

    // By hand: rows r0 = (0.1,-0.4,0.7,0.2), r1 = (0.5,0.3,-0.2,0.6)
    const double n0 = std::sqrt(0.01 + 0.16 + 0.49 + 0.04 + 1e-12);
    const double n1 = std::sqrt(0.25 + 0.09 + 0.04 + 0.36 + 1e-12);
    const double dot01 = (0.1 * 0.5 - 0.4 * 0.3 - 0.7 * 0.2 + 0.2 * 0.6) / (n0 * n1);
    const double m00 = (0.01 + 0.16 + 0.49 + 0.04) / (n0 * n0);
    const double m11 = (0.25 + 0.09 + 0.04 + 0.36) / (n1 * n1);
    auto softmax2 = [](double a, double b) {
        const double m = std::max(a, b);
        const double ea = std::exp(a - m), eb = std::exp(b - m);
        return std::pair<double, double>{ea / (ea + eb), eb / (ea + eb)};
    };
    const auto [a00, a01] = softmax2(m00, dot01);
    const auto [a10, a11] = softmax2(dot01, m11);
    for (int p = 0; p < 4; ++p) {
        const double want0 = a00 * x.v[static_cast<std::size_t>(p)] +
                             a01 * x.v[static_cast<std::size_t>(4 + p)];
        const double want1 = a10 * x.v[static_cast<std::size_t>(p)] +
                             a11 * x.v[static_cast<std::size_t>(4 + p)];
        CHECK(out->val.v[static_cast<std::size_t>(p)] ==
              doctest::Approx(want0).epsilon(1e-12));
        CHECK(out->val.v[static_cast<std::size_t>(4 + p)] ==
              doctest::Approx(want1).epsilon(1e-12));
    }
}

TEST_CASE("ufuser forward: shape, determinism, output range") {
    FuserArch arch{2, 8, BlockVariant::both};
    ParamSet fp = make_fuser_params(arch);
    init_params(fp, 3);
    Rng rng(33);
    const Image i = random_image(rng, 64, 64);
    const Image v = random_image(rng, 64, 64);
    const Image f1 = ufuser_infer(fp, arch, i, v);
    const Image f2 = ufuser_infer(fp, arch, i, v);
    CHECK(f1.height == 64);
    CHECK(f1.width == 64);
    CHECK(f1.data == f2.data);  // bitwise determinism
    for (double x : f1.data) {
        CHECK(x > 0.0);
        CHECK(x < 1.0);
    }
}

TEST_CASE("ufuser rejects mismatched or non-square inputs") {
    FuserArch arch{2, 4, BlockVariant::both};
    ParamSet fp = make_fuser_params(arch);
    init_params(fp, 3);
    Rng rng(34);
    const Image i = random_image(rng, 16, 16);
    CHECK_THROWS_AS(ufuser_infer(fp, arch, i, random_image(rng, 32, 32)), ShapeError);
    CHECK_THROWS_AS(
        [&] {
            Graph g;
            BoundParams b = bind_params(g, fp, false);
            Tensor bad({1, 16, 32});
            ufuser_forward(g, b, arch, g.input(bad), g.input(bad));
        }(),
        ShapeError);
}

TEST_CASE("sensor forward: shape contract and divisibility error") {
    SensorArch arch{3, 8};
    ParamSet sp = make_sensor_params(arch);
    init_params(sp, 4);
    Rng rng(35);
    const Image f = random_image(rng, 32, 32);
    const Image out1 = sensor_infer(sp, arch, f);
    const Image out2 = sensor_infer(sp, arch, f);
    CHECK(out1.height == 32);
    CHECK(out1.width == 32);
    CHECK(out1.data == out2.data);
    CHECK_THROWS_AS(sensor_infer(sp, arch, random_image(rng, 34, 34)), ShapeError);
}

TEST_CASE("init: same seed gives identical bytes, different seed differs") {
    FuserArch arch{2, 4, BlockVariant::both};
    ParamSet a = make_fuser_params(arch);
    ParamSet b = make_fuser_params(arch);
    ParamSet c = make_fuser_params(arch);
    init_params(a, 9);
    init_params(b, 9);
    init_params(c, 10);
    CHECK(a.flat_values() == b.flat_values());
    CHECK(a.flat_values() != c.flat_values());
}

TEST_CASE("initial fuser output mean is near 0.5") {
    FuserArch arch{2, 8, BlockVariant::both};
    ParamSet fp = make_fuser_params(arch);
    init_params(fp, 0);
    Rng rng(36);
    const Image i = random_image(rng, 32, 32);
    const Image v = random_image(rng, 32, 32);
    const Image f = ufuser_infer(fp, arch, i, v);
    double mean = 0.0;
    for (double x : f.data) mean += x;
    mean /= static_cast<double>(f.data.size());
    CHECK(mean > 0.4);
    CHECK(mean < 0.6);
}

TEST_CASE("parameter counts match the documented closed form") {
    // Closed form per block (see docs/ARCHITECTURE.md):
    //   block(cin, c) = 9*cin*c + 39c^2 + 15c + 1
    // evaluated over extractors/fusion/reconstruction plus down/up convs and
    // the head. For S=2, C0=4 the fuser total is 14464.
    FuserArch arch{2, 4, BlockVariant::both};
    CHECK(fuser_param_count(arch) == 14464);
    CHECK(make_fuser_params(arch).parameter_count() == fuser_param_count(arch));

    FuserArch arch2{2, 8, BlockVariant::both};
    CHECK(make_fuser_params(arch2).parameter_count() == fuser_param_count(arch2));
    FuserArch arch3{3, 4, BlockVariant::global_only};
    CHECK(make_fuser_params(arch3).parameter_count() == fuser_param_count(arch3));
    FuserArch arch4{2, 4, BlockVariant::local_only};
    CHECK(make_fuser_params(arch4).parameter_count() == fuser_param_count(arch4));

    SensorArch sarch{3, 8};
    CHECK(make_sensor_params(sarch).parameter_count() == sensor_param_count(sarch));
    SensorArch sarch2{5, 16};
    CHECK(make_sensor_params(sarch2).parameter_count() == sensor_param_count(sarch2));
}

TEST_CASE("single-branch variants hold parameter count within 25% of both") {
    FuserArch both{2, 8, BlockVariant::both};
    FuserArch glob{2, 8, BlockVariant::global_only};
    FuserArch loc{2, 8, BlockVariant::local_only};
    const double base = static_cast<double>(fuser_param_count(both));
    CHECK(std::abs(static_cast<double>(fuser_param_count(glob)) - base) / base < 0.25);
    CHECK(std::abs(static_cast<double>(fuser_param_count(loc)) - base) / base < 0.25);
}

TEST_CASE("ufuser analytic gradients match finite differences (S=2, C0=4, 16x16)") {
    FuserArch arch{2, 4, BlockVariant::both};
    ParamSet fp = make_fuser_params(arch);
    init_params(fp, 21);
    Rng rng(37);
    const Image i = random_image(rng, 16, 16);
    const Image v = random_image(rng, 16, 16);
    const Image target = random_image(rng, 16, 16);

    auto loss_of = [&](const ParamSet& p) {
        Graph g;
        BoundParams bound = bind_params(g, p, false);
        NodePtr f = ufuser_forward(g, bound, arch, g.input(image_to_tensor(i)),
                                   g.input(image_to_tensor(v)));
        Graph g2;  // plain MSE via the same tape machinery, no grads
        return g.mean_sq_diff(f, g.input(image_to_tensor(target)))->val.v[0];
    };
    auto compute = [&](ParamSet& p) {
        Graph g;
        BoundParams bound = bind_params(g, p, true);
        NodePtr f = ufuser_forward(g, bound, arch, g.input(image_to_tensor(i)),
                                   g.input(image_to_tensor(v)));
        NodePtr loss = g.mean_sq_diff(f, g.input(image_to_tensor(target)));
        g.backward(loss);
        accumulate_grads(bound, p);
    };
    spot_check_gradients(fp, loss_of, compute, 1e-4, 3);
}

TEST_CASE("sensor analytic gradients match finite differences (D=3, 16x16)") {
    SensorArch arch{3, 4};
    ParamSet sp = make_sensor_params(arch);
    init_params(sp, 22);
    Rng rng(38);
    const Image f = random_image(rng, 16, 16);
    const Image target = random_image(rng, 16, 16);

    auto loss_of = [&](const ParamSet& p) {
        Graph g;
        BoundParams bound = bind_params(g, p, false);
        NodePtr out = sensor_forward(g, bound, arch, g.input(image_to_tensor(f)));
        return g.mean_sq_diff(out, g.input(image_to_tensor(target)))->val.v[0];
    };
    auto compute = [&](ParamSet& p) {
        Graph g;
        BoundParams bound = bind_params(g, p, true);
        NodePtr out = sensor_forward(g, bound, arch, g.input(image_to_tensor(f)));
        g.backward(g.mean_sq_diff(out, g.input(image_to_tensor(target))));
        accumulate_grads(bound, p);
    };
    spot_check_gradients(sp, loss_of, compute, 1e-4, 3);
}

TEST_CASE("checkpoint round-trip restores float32-quantized parameters") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "emma_ckpt_test";
    fs::remove_all(dir);
    SensorArch arch{3, 4};
    ParamSet sp = make_sensor_params(arch);
    init_params(sp, 40);
    CheckpointMeta meta;
    meta.kind = "sensor";
    meta.arch_json = arch.to_json();
    meta.seed = 40;
    meta.step = 12;
    save_checkpoint(sp, meta, dir.string());

    ParamSet back = make_sensor_params(arch);
    const CheckpointMeta got = load_checkpoint(back, dir.string());
    CHECK(got.kind == "sensor");
    CHECK(got.seed == 40);
    CHECK(got.step == 12);
    CHECK(SensorArch::from_json(got.arch_json).depth == 3);
    for (std::size_t t = 0; t < sp.tensors().size(); ++t) {
        for (std::size_t k = 0; k < sp.tensors()[t].values.numel(); ++k) {
            const double orig = sp.tensors()[t].values.v[k];
            const double loaded = back.tensors()[t].values.v[k];
            CHECK(loaded == static_cast<double>(static_cast<float>(orig)));
        }
    }
}
