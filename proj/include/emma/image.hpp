#pragma once

#include <string>
#include <vector>

#include "emma/common.hpp"

namespace emma {

// H x W (x C) grid of normalized intensities, row-major, channel-interleaved.
// Everything that leaves image-core satisfies data in [0, 1]; intermediate
// network activations are exempt and use nn::Tensor instead.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c = 1, double fill = 0.0)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    double& at(int y, int x, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::size_t pixel_count() const {
        return static_cast<std::size_t>(height) * width;
    }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

// One synthetic scene: the latent ground truth plus the two derived
// measurements. Regenerating from the same seed reproduces identical bytes.
struct ScenePair {
    Image truth;
    Image modality_a;  // tone-mapped low-pass view (infrared-like)
    Image modality_b;  // high-pass preserving view (visible-like)
    long long seed = 0;
};

struct Dataset {
    std::vector<ScenePair> pairs;
    int patch_size = 0;
};

// --- synthetic data -------------------------------------------------------

ScenePair generate_scene_pair(long long seed, int height, int width);

// Derivation of the two measurements from a given truth image; exposed so
// tests can feed degenerate truths. Pure function of (truth, seed).
void derive_modalities(const Image& truth, long long seed, Image& modality_a,
                       Image& modality_b);

ScenePair crop_random_patch(const ScenePair& pair, int patch_size, Rng& rng);

// Separable Gaussian blur with mirror borders; radius = ceil(3*sigma).
Image gaussian_blur(const Image& img, double sigma);

double pearson_correlation(const Image& a, const Image& b);

// --- file I/O --------------------------------------------------------------

// Binary PGM (P5) for 1 channel, binary PPM (P6) for 3, maxval always 255.
Image load_image(const std::string& path);
void save_image(const Image& img, const std::string& path);

// Dataset manifest: JSON listing pair seeds and dimensions.
void save_dataset_manifest(const Dataset& ds, const std::string& path);
Dataset load_dataset_manifest(const std::string& path);

}  // namespace emma
