#pragma once

#include <utility>

#include "emma/image.hpp"

namespace emma {

struct LossWeights {
    double alpha1 = 1.0;
    double alpha2 = 0.1;
};

// Standard 3x3 Sobel responses with reflect borders; returns (gx, gy), each
// the size of the input. Reflect padding keeps the flip-commutation property
// exact including borders.
std::pair<Image, Image> sobel(const Image& x);

// L(x, xhat) = l1(x, xhat) + l1(sobel x, sobel xhat), all reductions means.
double composite_distance(const Image& x, const Image& xhat);

// Stage-1 objective: plain mean squared error.
double sensing_reconstruction_loss(const Image& sensor_out, const Image& source);

// l1(f,i) + l1(f,v); ablation configurations only.
double traditional_fusion_loss(const Image& f, const Image& i, const Image& v);

struct LossBreakdown {
    double total = 0.0;
    double sensing_i = 0.0;
    double sensing_v = 0.0;
    double equivariance = 0.0;
};

// Combines the three loss terms; the caller supplies every tensor, including
// sensed_i = A_i(f), sensed_v = A_v(f), f_t = T_g f and the re-fusion.
LossBreakdown emma_total_loss(const Image& f, const Image& f_t,
                              const Image& f_hat_t, const Image& i,
                              const Image& v, const Image& sensed_i,
                              const Image& sensed_v, const LossWeights& w);

double mean_abs_diff(const Image& a, const Image& b);

}  // namespace emma
