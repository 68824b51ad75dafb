#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "emma/losses.hpp"
#include "emma/nn/graph.hpp"
#include "emma/nn/networks.hpp"
#include "emma/transform.hpp"

using namespace emma;

namespace {

Image random_image(Rng& rng, int h, int w) {
    Image img(h, w);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

// Independent sliding-window correlation with explicit mirror handling,
// duplicated here on purpose as the oracle for the production sobel.
int mirror(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}

std::pair<Image, Image> sobel_bruteforce(const Image& x) {
    const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    Image gx(x.height, x.width), gy(x.height, x.width);
    for (int y = 0; y < x.height; ++y) {
        for (int c = 0; c < x.width; ++c) {
            double ax = 0.0, ay = 0.0;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const double v = x.at(mirror(y + dy, x.height), mirror(c + dx, x.width));
                    ax += kx[dy + 1][dx + 1] * v;
                    ay += kx[dx + 1][dy + 1] * v;  // transpose kernel
                }
            }
            gx.at(y, c) = ax;
            gy.at(y, c) = ay;
        }
    }
    return {gx, gy};
}

}  // namespace

TEST_CASE("sobel of a constant image is zero everywhere") {
    Image x(7, 9, 1, 0.37);
    const auto [gx, gy] = sobel(x);
    for (double v : gx.data) CHECK(v == 0.0);
    for (double v : gy.data) CHECK(v == 0.0);
}

TEST_CASE("sobel of a vertical step edge concentrates in gx") {
    const int h = 8, w = 8, edge = 4;
    Image x(h, w);
    for (int y = 0; y < h; ++y) {
        for (int c = edge; c < w; ++c) x.at(y, c) = 1.0;
    }
    const auto [gx, gy] = sobel(x);
    for (int y = 0; y < h; ++y) {
        CHECK(std::abs(gx.at(y, edge - 1)) == 4.0);
        CHECK(std::abs(gx.at(y, edge)) == 4.0);
        CHECK(std::abs(gx.at(y, 1)) == 0.0);
        CHECK(gy.at(y, 1) == 0.0);  // no vertical structure anywhere
        CHECK(gy.at(y, edge) == 0.0);
    }
}

TEST_CASE("sobel matches the brute-force correlation oracle") {
    Rng rng(50);
    for (int trial = 0; trial < 20; ++trial) {
        const Image x = random_image(rng, 5, 5);
        const auto [gx, gy] = sobel(x);
        const auto [rx, ry] = sobel_bruteforce(x);
        for (std::size_t k = 0; k < x.data.size(); ++k) {
            REQUIRE(gx.data[k] == doctest::Approx(rx.data[k]).epsilon(1e-12));
            REQUIRE(gy.data[k] == doctest::Approx(ry.data[k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("sobel commutes with horizontal flips up to sign, exactly") {
    Rng rng(51);
    const Image x = random_image(rng, 9, 9);
    TransformSpec flip;
    flip.flip_h = true;
    const auto [gx_f, gy_f] = sobel(apply_transform(flip, x));
    const auto [gx, gy] = sobel(x);
    const Image flipped_gx = apply_transform(flip, gx);
    const Image flipped_gy = apply_transform(flip, gy);
    for (std::size_t k = 0; k < x.data.size(); ++k) {
        REQUIRE(gx_f.data[k] == doctest::Approx(-flipped_gx.data[k]).epsilon(1e-12));
        REQUIRE(gy_f.data[k] == doctest::Approx(flipped_gy.data[k]).epsilon(1e-12));
    }
}

TEST_CASE("composite distance: identity, flat images, reference loop") {
    Rng rng(52);
    const Image x = random_image(rng, 8, 8);
    CHECK(composite_distance(x, x) == 0.0);

    Image zeros(6, 6, 1, 0.0), ones(6, 6, 1, 1.0);
    CHECK(composite_distance(zeros, ones) == doctest::Approx(1.0).epsilon(1e-12));

    const Image a = random_image(rng, 8, 8);
    const Image b = random_image(rng, 8, 8);
    // reference: explicit loops at float64
    double pix = 0.0;
    for (std::size_t k = 0; k < a.data.size(); ++k) pix += std::abs(a.data[k] - b.data[k]);
    pix /= static_cast<double>(a.data.size());
    const auto [gax, gay] = sobel_bruteforce(a);
    const auto [gbx, gby] = sobel_bruteforce(b);
    double grad = 0.0;
    for (std::size_t k = 0; k < a.data.size(); ++k) {
        grad += std::abs(gax.data[k] - gbx.data[k]) + std::abs(gay.data[k] - gby.data[k]);
    }
    grad /= static_cast<double>(2 * a.data.size());
    CHECK(composite_distance(a, b) == doctest::Approx(pix + grad).epsilon(1e-12));

    CHECK_THROWS_AS(composite_distance(a, Image(4, 4)), ShapeError);
}

TEST_CASE("composite distance is positive for distinct images") {
    Rng rng(53);
    for (int t = 0; t < 30; ++t) {
        const Image a = random_image(rng, 6, 6);
        Image b = a;
        b.data[static_cast<std::size_t>(rng.uniform_int(0, 35))] += 0.25;
        CHECK(composite_distance(a, b) > 0.0);
    }
}

TEST_CASE("sensing reconstruction loss is plain MSE") {
    Image zeros(4, 4, 1, 0.0), ones(4, 4, 1, 1.0);
    CHECK(sensing_reconstruction_loss(zeros, zeros) == 0.0);
    CHECK(sensing_reconstruction_loss(zeros, ones) == doctest::Approx(1.0));
    Rng rng(54);
    const Image a = random_image(rng, 8, 8);
    const Image b = random_image(rng, 8, 8);
    double ref = 0.0;
    for (std::size_t k = 0; k < a.data.size(); ++k) {
        ref += (a.data[k] - b.data[k]) * (a.data[k] - b.data[k]);
    }
    ref /= static_cast<double>(a.data.size());
    CHECK(sensing_reconstruction_loss(a, b) == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("traditional fusion loss matches its loop oracle") {
    Rng rng(55);
    const Image f = random_image(rng, 8, 8);
    CHECK(traditional_fusion_loss(f, f, f) == 0.0);
    Image zeros(4, 4, 1, 0.0), ones(4, 4, 1, 1.0);
    CHECK(traditional_fusion_loss(zeros, ones, ones) == doctest::Approx(2.0));
    const Image i = random_image(rng, 8, 8);
    const Image v = random_image(rng, 8, 8);
    double ref = 0.0;
    for (std::size_t k = 0; k < f.data.size(); ++k) {
        ref += std::abs(f.data[k] - i.data[k]) + std::abs(f.data[k] - v.data[k]);
    }
    ref /= static_cast<double>(f.data.size());
    CHECK(traditional_fusion_loss(f, i, v) == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("emma total loss: identity, term nullification, term-wise oracle") {
    Rng rng(56);
    const Image x = random_image(rng, 8, 8);
    const LossWeights w{1.0, 0.1};
    const LossBreakdown zero = emma_total_loss(x, x, x, x, x, x, x, w);
    CHECK(zero.total == 0.0);

    const Image f = random_image(rng, 8, 8);
    const Image f_t = random_image(rng, 8, 8);
    const Image f_hat = random_image(rng, 8, 8);
    const Image i = random_image(rng, 8, 8);
    const Image v = random_image(rng, 8, 8);
    const Image si = random_image(rng, 8, 8);
    const Image sv = random_image(rng, 8, 8);

    // alpha2 = 0: total independent of the transformed pair
    const LossBreakdown l0 = emma_total_loss(f, f_t, f_hat, i, v, si, sv, {1.0, 0.0});
    const LossBreakdown l1 = emma_total_loss(f, f, f, i, v, si, sv, {1.0, 0.0});
    CHECK(l0.total == doctest::Approx(l1.total).epsilon(1e-15));

    // term-wise oracle
    const LossBreakdown got = emma_total_loss(f, f_t, f_hat, i, v, si, sv, w);
    CHECK(got.sensing_i == doctest::Approx(composite_distance(si, i)).epsilon(1e-15));
    CHECK(got.sensing_v == doctest::Approx(composite_distance(sv, v)).epsilon(1e-15));
    CHECK(got.equivariance ==
          doctest::Approx(composite_distance(f_t, f_hat)).epsilon(1e-15));
    CHECK(got.total == doctest::Approx(got.sensing_i + 1.0 * got.sensing_v +
                                       0.1 * got.equivariance)
                           .epsilon(1e-15));

    CHECK_THROWS_AS(emma_total_loss(f, f_t, f_hat, i, v, si, sv, {-1.0, 0.1}),
                    InputError);
}

TEST_CASE("emma total loss is linear in alpha1 and alpha2") {
    Rng rng(57);
    const Image f = random_image(rng, 8, 8);
    const Image f_t = random_image(rng, 8, 8);
    const Image f_hat = random_image(rng, 8, 8);
    const Image i = random_image(rng, 8, 8);
    const Image v = random_image(rng, 8, 8);
    const Image si = random_image(rng, 8, 8);
    const Image sv = random_image(rng, 8, 8);
    auto total = [&](double a1, double a2) {
        return emma_total_loss(f, f_t, f_hat, i, v, si, sv, {a1, a2}).total;
    };
    // Evaluate at three alpha1 settings: increments must match slope exactly.
    const double t0 = total(0.0, 0.5), t1 = total(1.0, 0.5), t2 = total(2.0, 0.5);
    CHECK(t2 - t1 == doctest::Approx(t1 - t0).epsilon(1e-12));
    const double u0 = total(0.7, 0.0), u1 = total(0.7, 1.0), u2 = total(0.7, 2.0);
    CHECK(u2 - u1 == doctest::Approx(u1 - u0).epsilon(1e-12));
}

TEST_CASE("tape-built composite loss equals the image-level composite") {
    Rng rng(58);
    const Image a = random_image(rng, 12, 12);
    const Image b = random_image(rng, 12, 12);
    nn::Graph g;
    nn::NodePtr an = g.input(nn::image_to_tensor(a));
    nn::NodePtr bn = g.input(nn::image_to_tensor(b));
    nn::NodePtr pix = g.mean_abs_diff(an, bn);
    nn::NodePtr grad = g.mean_abs_diff(g.sobel_pair(an), g.sobel_pair(bn));
    nn::NodePtr total = g.weighted_sum({pix, grad}, {1.0, 1.0});
    CHECK(total->val.v[0] == doctest::Approx(composite_distance(a, b)).epsilon(1e-14));
}
