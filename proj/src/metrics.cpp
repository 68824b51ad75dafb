#include "emma/metrics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <vector>

#include <nlohmann/json.hpp>

namespace emma {

namespace {

void require_gray(const Image& f, const char* who) {
    if (f.channels != 1) throw ShapeError(std::string(who) + ": single-channel only");
}

void require_same(const Image& a, const Image& b, const char* who) {
    if (!a.same_shape(b)) throw ShapeError(std::string(who) + ": shape mismatch");
}

std::vector<double> to_255(const Image& f) {
    std::vector<double> out(f.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f.data[i] * 255.0;
    return out;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// Separable Gaussian window convolution with reflect borders on a raw plane.
std::vector<double> gauss_same(const std::vector<double>& img, int h, int w,
                               double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;
    std::vector<double> tmp(img.size()), out(img.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                acc += kernel[i + radius] *
                       img[static_cast<std::size_t>(y) * w + reflect_index(x + i, w)];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                acc += kernel[i + radius] *
                       tmp[static_cast<std::size_t>(reflect_index(y + i, h)) * w + x];
            }
            out[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
    return out;
}

// One-source VIF accumulators under the Gaussian scale-mixture model.
void vif_accumulate(const std::vector<double>& ref, const std::vector<double>& dis,
                    int h, int w, double& num, double& den) {
    constexpr double kSigmaN = 2.0;   // sensor noise variance, 0-255 scale
    constexpr double kEps = 1e-10;
    const std::size_t n = ref.size();
    for (int scale = 0; scale < 4; ++scale) {
        const double sigma = 2.0 * (1 << scale);  // 2, 4, 8, 16
        std::vector<double> mu_r = gauss_same(ref, h, w, sigma);
        std::vector<double> mu_d = gauss_same(dis, h, w, sigma);
        std::vector<double> rr(n), dd(n), rd(n);
        for (std::size_t i = 0; i < n; ++i) {
            rr[i] = ref[i] * ref[i];
            dd[i] = dis[i] * dis[i];
            rd[i] = ref[i] * dis[i];
        }
        rr = gauss_same(rr, h, w, sigma);
        dd = gauss_same(dd, h, w, sigma);
        rd = gauss_same(rd, h, w, sigma);
        for (std::size_t i = 0; i < n; ++i) {
            double var_r = rr[i] - mu_r[i] * mu_r[i];
            double var_d = dd[i] - mu_d[i] * mu_d[i];
            const double cov = rd[i] - mu_r[i] * mu_d[i];
            if (var_r < 0.0) var_r = 0.0;
            if (var_d < 0.0) var_d = 0.0;
            double g = cov / (var_r + kEps);
            double sv = var_d - g * cov;
            if (var_r < kEps) {
                g = 0.0;
                sv = var_d;
                var_r = 0.0;
            }
            if (var_d < kEps) {
                g = 0.0;
                sv = 0.0;
            }
            if (g < 0.0) {
                sv = var_d;
                g = 0.0;
            }
            if (sv < kEps) sv = kEps;
            num += std::log10(1.0 + g * g * var_r / (sv + kSigmaN));
            den += std::log10(1.0 + var_r / kSigmaN);
        }
    }
}

}  // namespace

double metric_en(const Image& f) {
    require_gray(f, "metric_en");
    std::array<std::size_t, 256> hist{};
    for (double v : f.data) {
        int q = static_cast<int>(std::lround(clamp01(v) * 255.0));
        hist[static_cast<std::size_t>(q)] += 1;
    }
    const double n = static_cast<double>(f.data.size());
    double h = 0.0;
    for (std::size_t c : hist) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log2(p);
    }
    return h;
}

double metric_sd(const Image& f) {
    require_gray(f, "metric_sd");
    std::vector<double> v = to_255(f);
    // Sorted accumulation makes the sum order canonical, so the metric is
    // bit-exact under every pixel permutation in G.
    std::sort(v.begin(), v.end());
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mu) * (x - mu);
    return std::sqrt(var / static_cast<double>(v.size()));
}

double metric_sf(const Image& f) {
    require_gray(f, "metric_sf");
    const std::vector<double> v = to_255(f);
    const int h = f.height, w = f.width;
    double rf = 0.0, cf = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 1; x < w; ++x) {
            const double d = v[static_cast<std::size_t>(y) * w + x] -
                             v[static_cast<std::size_t>(y) * w + x - 1];
            rf += d * d;
        }
    }
    for (int y = 1; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double d = v[static_cast<std::size_t>(y) * w + x] -
                             v[static_cast<std::size_t>(y - 1) * w + x];
            cf += d * d;
        }
    }
    const double n = static_cast<double>(f.data.size());
    return std::sqrt(rf / n + cf / n);
}

double metric_ag(const Image& f) {
    require_gray(f, "metric_ag");
    const std::vector<double> v = to_255(f);
    const int h = f.height, w = f.width;
    if (h < 2 || w < 2) return 0.0;
    double acc = 0.0;
    for (int y = 0; y + 1 < h; ++y) {
        for (int x = 0; x + 1 < w; ++x) {
            const double dx = v[static_cast<std::size_t>(y) * w + x + 1] -
                              v[static_cast<std::size_t>(y) * w + x];
            const double dy = v[static_cast<std::size_t>(y + 1) * w + x] -
                              v[static_cast<std::size_t>(y) * w + x];
            acc += std::sqrt(0.5 * (dx * dx + dy * dy));
        }
    }
    return acc / (static_cast<double>(h - 1) * (w - 1));
}

double metric_scd(const Image& f, const Image& i, const Image& v) {
    require_gray(f, "metric_scd");
    require_same(f, i, "metric_scd");
    require_same(f, v, "metric_scd");
    const std::size_t n = f.data.size();
    std::vector<double> fi(n), fv(n), iv(n), vv(n);
    for (std::size_t k = 0; k < n; ++k) {
        fi[k] = f.data[k] - i.data[k];
        fv[k] = f.data[k] - v.data[k];
        iv[k] = i.data[k];
        vv[k] = v.data[k];
    }
    return correlation(fi, vv) + correlation(fv, iv);
}

double metric_vif(const Image& f, const Image& i, const Image& v) {
    require_gray(f, "metric_vif");
    require_same(f, i, "metric_vif");
    require_same(f, v, "metric_vif");
    const std::vector<double> fd = to_255(f);
    double total = 0.0;
    for (const Image* src : {&i, &v}) {
        double num = 0.0, den = 0.0;
        vif_accumulate(to_255(*src), fd, f.height, f.width, num, den);
        // A reference with no local structure carries no information to lose.
        total += (den > 1e-12) ? num / den : 1.0;
    }
    return total / 2.0;
}

double truth_correlation(const Image& f, const Image& truth) {
    require_gray(f, "truth_correlation");
    require_same(f, truth, "truth_correlation");
    return correlation(f.data, truth.data);
}

MetricReport evaluate_fusion(const Image& f, const Image& i, const Image& v,
                             const Image* truth) {
    MetricReport r;
    r.en = metric_en(f);
    r.sd = metric_sd(f);
    r.sf = metric_sf(f);
    r.ag = metric_ag(f);
    r.scd = metric_scd(f, i, v);
    r.vif = metric_vif(f, i, v);
    if (truth) r.truth_correlation = truth_correlation(f, *truth);
    return r;
}

std::string MetricReport::to_json() const {
    nlohmann::json j = {{"en", en},   {"sd", sd},   {"sf", sf},
                        {"ag", ag},   {"scd", scd}, {"vif", vif}};
    if (equivariance_error) j["equivariance_error"] = *equivariance_error;
    if (truth_correlation) j["truth_correlation"] = *truth_correlation;
    return j.dump(2);
}

std::string MetricReport::to_table() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%8s %8s %8s %8s %8s %8s\n%8.3f %8.3f %8.3f %8.3f %8.3f %8.3f\n",
                  "EN", "SD", "SF", "AG", "SCD", "VIF", en, sd, sf, ag, scd, vif);
    return buf;
}

}  // namespace emma
