#include "emma/losses.hpp"

#include <cmath>

namespace emma {

namespace {

constexpr int kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr int kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

void require_same_shape(const Image& a, const Image& b, const char* who) {
    if (!a.same_shape(b)) throw ShapeError(std::string(who) + ": shape mismatch");
}

}  // namespace

std::pair<Image, Image> sobel(const Image& x) {
    if (x.channels != 1) throw ShapeError("sobel: single-channel only");
    const int h = x.height, w = x.width;
    Image gx(h, w), gy(h, w);
    for (int y = 0; y < h; ++y) {
        const int ym = reflect_index(y - 1, h), yp = reflect_index(y + 1, h);
        for (int xx = 0; xx < w; ++xx) {
            const int xm = reflect_index(xx - 1, w), xp = reflect_index(xx + 1, w);
            // Difference of two symmetric 1-2-1 sums; identical rounding on
            // both sides makes flat regions cancel exactly.
            gx.at(y, xx) = (x.at(ym, xp) + 2.0 * x.at(y, xp) + x.at(yp, xp)) -
                           (x.at(ym, xm) + 2.0 * x.at(y, xm) + x.at(yp, xm));
            gy.at(y, xx) = (x.at(yp, xm) + 2.0 * x.at(yp, xx) + x.at(yp, xp)) -
                           (x.at(ym, xm) + 2.0 * x.at(ym, xx) + x.at(ym, xp));
        }
    }
    return {gx, gy};
}

double mean_abs_diff(const Image& a, const Image& b) {
    require_same_shape(a, b, "mean_abs_diff");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        acc += std::abs(a.data[i] - b.data[i]);
    }
    return acc / static_cast<double>(a.data.size());
}

double composite_distance(const Image& x, const Image& xhat) {
    require_same_shape(x, xhat, "composite_distance");
    const auto [gx, gy] = sobel(x);
    const auto [hx, hy] = sobel(xhat);
    const double grad_term = 0.5 * (mean_abs_diff(gx, hx) + mean_abs_diff(gy, hy));
    return mean_abs_diff(x, xhat) + grad_term;
}

double sensing_reconstruction_loss(const Image& sensor_out, const Image& source) {
    require_same_shape(sensor_out, source, "sensing_reconstruction_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < source.data.size(); ++i) {
        const double d = sensor_out.data[i] - source.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(source.data.size());
}

double traditional_fusion_loss(const Image& f, const Image& i, const Image& v) {
    require_same_shape(f, i, "traditional_fusion_loss");
    require_same_shape(f, v, "traditional_fusion_loss");
    return mean_abs_diff(f, i) + mean_abs_diff(f, v);
}

LossBreakdown emma_total_loss(const Image& f, const Image& f_t,
                              const Image& f_hat_t, const Image& i,
                              const Image& v, const Image& sensed_i,
                              const Image& sensed_v, const LossWeights& w) {
    require_same_shape(f, i, "emma_total_loss");
    require_same_shape(f, v, "emma_total_loss");
    require_same_shape(f, sensed_i, "emma_total_loss");
    require_same_shape(f, sensed_v, "emma_total_loss");
    require_same_shape(f_t, f_hat_t, "emma_total_loss");
    if (w.alpha1 < 0.0 || w.alpha2 < 0.0) {
        throw InputError("emma_total_loss: negative weights");
    }
    LossBreakdown out;
    out.sensing_i = composite_distance(sensed_i, i);
    out.sensing_v = composite_distance(sensed_v, v);
    out.equivariance = composite_distance(f_t, f_hat_t);
    out.total = out.sensing_i + w.alpha1 * out.sensing_v + w.alpha2 * out.equivariance;
    return out;
}

}  // namespace emma
