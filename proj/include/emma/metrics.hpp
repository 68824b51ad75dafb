#pragma once

#include <optional>
#include <string>

#include "emma/image.hpp"

namespace emma {

// Fusion-quality metrics. All are computed on the 0-255 intensity scale so
// magnitudes are comparable with the published tables. Correlations with a
// zero-variance argument are defined as 0.
struct MetricReport {
    double en = 0.0;   // Shannon entropy of the 8-bit histogram, bits
    double sd = 0.0;   // population standard deviation
    double sf = 0.0;   // spatial frequency
    double ag = 0.0;   // average gradient
    double scd = 0.0;  // sum of difference correlations, in [-2, 2]
    double vif = 0.0;  // pixel-domain visual information fidelity
    std::optional<double> equivariance_error;
    std::optional<double> truth_correlation;

    std::string to_json() const;
    std::string to_table() const;  // aligned plain-text, Table-1 column order
};

double metric_en(const Image& f);
double metric_sd(const Image& f);
double metric_sf(const Image& f);
double metric_ag(const Image& f);
double metric_scd(const Image& f, const Image& i, const Image& v);

// Pixel-domain VIF over 4 Gaussian scales (sigma = 2, doubling per scale),
// reflect-padded windows, GSM noise variance 2 on the 0-255 scale; the final
// value is the mean over the two sources. Degenerate (zero-information)
// references score 1 by convention.
double metric_vif(const Image& f, const Image& i, const Image& v);

double truth_correlation(const Image& f, const Image& truth);

MetricReport evaluate_fusion(const Image& f, const Image& i, const Image& v,
                             const Image* truth = nullptr);

}  // namespace emma
