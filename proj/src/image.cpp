#include "emma/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace emma {

namespace {

void check_range_invariant(const Image& img, const char* who) {
    for (double v : img.data) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw NumericError(std::string(who) + ": pixel outside [0,1]");
        }
    }
}

// Smooth gradient background plus a band-limited sinusoidal texture field.
Image scene_background(int h, int w, Rng& rng) {
    Image bg(h, w);
    const double base = rng.uniform(0.35, 0.55);
    const double gx = rng.uniform(-0.25, 0.25);
    const double gy = rng.uniform(-0.25, 0.25);
    struct Wave {
        double fy, fx, phase, amp;
    };
    std::vector<Wave> waves;
    const int n_waves = 4;
    for (int k = 0; k < n_waves; ++k) {
        Wave wv;
        wv.fy = static_cast<double>(rng.uniform_int(1, 7));
        wv.fx = static_cast<double>(rng.uniform_int(1, 7));
        wv.phase = rng.uniform(0.0, 6.283185307179586);
        wv.amp = rng.uniform(0.01, 0.035);
        waves.push_back(wv);
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double u = static_cast<double>(x) / w;
            const double v = static_cast<double>(y) / h;
            double val = base + gx * (u - 0.5) + gy * (v - 0.5);
            for (const Wave& wv : waves) {
                val += wv.amp *
                       std::sin(6.283185307179586 * (wv.fy * v + wv.fx * u) +
                                wv.phase);
            }
            bg.at(y, x) = clamp01(val);
        }
    }
    return bg;
}

void paint_primitives(Image& img, Rng& rng) {
    const int n = static_cast<int>(rng.uniform_int(3, 6));
    // Distinct intensities spread over [0.1, 0.95].
    std::vector<double> levels(n);
    for (int k = 0; k < n; ++k) {
        levels[k] = 0.1 + 0.85 * (k + rng.uniform(0.1, 0.9)) / n;
    }
    // Deterministic shuffle so level order is not tied to size order.
    for (int k = n - 1; k > 0; --k) {
        std::swap(levels[k], levels[rng.uniform_int(0, k)]);
    }
    const int h = img.height, w = img.width;
    for (int k = 0; k < n; ++k) {
        const bool disk = rng.uniform_int(0, 1) == 1;
        const int cy = static_cast<int>(rng.uniform_int(h / 6, h - 1 - h / 6));
        const int cx = static_cast<int>(rng.uniform_int(w / 6, w - 1 - w / 6));
        const int ry = static_cast<int>(rng.uniform_int(h / 12, h / 4));
        const int rx = static_cast<int>(rng.uniform_int(w / 12, w / 4));
        for (int y = std::max(0, cy - ry); y <= std::min(h - 1, cy + ry); ++y) {
            for (int x = std::max(0, cx - rx); x <= std::min(w - 1, cx + rx);
                 ++x) {
                if (disk) {
                    const double dy = (y - cy) / static_cast<double>(ry);
                    const double dx = (x - cx) / static_cast<double>(rx);
                    if (dy * dy + dx * dx > 1.0) continue;
                }
                img.at(y, x) = levels[k];
            }
        }
    }
}

}  // namespace

Image gaussian_blur(const Image& img, double sigma) {
    if (img.channels != 1) throw ShapeError("gaussian_blur: single-channel only");
    if (sigma <= 0.0) return img;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;

    const int h = img.height, w = img.width;
    Image tmp(h, w), out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                acc += kernel[i + radius] * img.at(y, reflect_index(x + i, w));
            }
            tmp.at(y, x) = acc;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                acc += kernel[i + radius] * tmp.at(reflect_index(y + i, h), x);
            }
            out.at(y, x) = acc;
        }
    }
    return out;
}

void derive_modalities(const Image& truth, long long seed, Image& modality_a,
                       Image& modality_b) {
    // Both derivations are pure functions of (truth, seed); the seed only
    // perturbs the tone-map parameters within narrow bands.
    Rng rng(static_cast<std::uint64_t>(seed) * 0x9e3779b97f4a7c15ULL +
            0x2545f4914f6cdd1dULL);
    const double sigma_a = rng.uniform(1.5, 2.5);
    const double contrast = rng.uniform(5.0, 8.0);
    const double pivot = rng.uniform(0.5, 0.6);
    const double sigma_low = rng.uniform(5.0, 7.0);
    const double sigma_tex = rng.uniform(0.8, 1.2);
    const double tex_gain = rng.uniform(0.6, 0.9);

    // Modality A: blur then sigmoid contrast -- emphasizes bright regions,
    // discards fine texture.
    Image smooth = gaussian_blur(truth, sigma_a);
    modality_a = Image(truth.height, truth.width);
    for (std::size_t p = 0; p < smooth.data.size(); ++p) {
        const double z = contrast * (smooth.data[p] - pivot);
        modality_a.data[p] = clamp01(1.0 / (1.0 + std::exp(-z)));
    }

    // Modality B: truth minus its low-frequency bias, plus the truth's own
    // high-pass texture, recentered -- keeps edges, flattens layout.
    Image low = gaussian_blur(truth, sigma_low);
    Image fine = gaussian_blur(truth, sigma_tex);
    modality_b = Image(truth.height, truth.width);
    for (std::size_t p = 0; p < low.data.size(); ++p) {
        const double highpass = truth.data[p] - low.data[p];
        const double texture = truth.data[p] - fine.data[p];
        modality_b.data[p] = clamp01(0.45 + highpass + tex_gain * texture);
    }
}

ScenePair generate_scene_pair(long long seed, int height, int width) {
    if (height < 32 || width < 32) {
        throw InputError("generate_scene_pair: dimensions must be >= 32");
    }
    Rng rng(static_cast<std::uint64_t>(seed) ^ 0xa02bdbf7bb3c0a7ULL);
    ScenePair pair;
    pair.seed = seed;
    pair.truth = scene_background(height, width, rng);
    paint_primitives(pair.truth, rng);
    derive_modalities(pair.truth, seed, pair.modality_a, pair.modality_b);
    check_range_invariant(pair.truth, "generate_scene_pair(truth)");
    check_range_invariant(pair.modality_a, "generate_scene_pair(a)");
    check_range_invariant(pair.modality_b, "generate_scene_pair(b)");
    return pair;
}

ScenePair crop_random_patch(const ScenePair& pair, int patch_size, Rng& rng) {
    const int h = pair.truth.height, w = pair.truth.width;
    if (patch_size > h || patch_size > w) {
        throw InputError("crop_random_patch: patch larger than image");
    }
    const int y0 = static_cast<int>(rng.uniform_int(0, h - patch_size));
    const int x0 = static_cast<int>(rng.uniform_int(0, w - patch_size));
    auto cut = [&](const Image& src) {
        Image out(patch_size, patch_size, src.channels);
        for (int y = 0; y < patch_size; ++y) {
            for (int x = 0; x < patch_size; ++x) {
                for (int c = 0; c < src.channels; ++c) {
                    out.at(y, x, c) = src.at(y0 + y, x0 + x, c);
                }
            }
        }
        return out;
    };
    ScenePair out;
    out.seed = pair.seed;
    out.truth = cut(pair.truth);
    out.modality_a = cut(pair.modality_a);
    out.modality_b = cut(pair.modality_b);
    return out;
}

double pearson_correlation(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ShapeError("pearson_correlation: shape mismatch");
    const std::size_t n = a.data.size();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a.data[i];
        mb += b.data[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a.data[i] - ma;
        const double db = b.data[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    // Zero-variance convention: correlation is 0, never NaN.
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// --- PGM / PPM -------------------------------------------------------------

namespace {

int read_pnm_token(std::istream& in, const char* field) {
    // Skips whitespace and '#' comments, then reads one decimal token.
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) {
        throw FormatError(std::string("image header: bad ") + field);
    }
    long value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        if (value > 1 << 30) throw FormatError(std::string("image header: ") +
                                               field + " out of range");
        c = in.get();
    }
    if (c != EOF) in.unget();
    return static_cast<int>(value);
}

}  // namespace

Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_image: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    int channels = 0;
    if (m0 == 'P' && m1 == '5') {
        channels = 1;
    } else if (m0 == 'P' && m1 == '6') {
        channels = 3;
    } else {
        throw FormatError("image header: bad magic (want P5 or P6)");
    }
    const int w = read_pnm_token(in, "width");
    const int h = read_pnm_token(in, "height");
    const int maxval = read_pnm_token(in, "maxval");
    if (w <= 0) throw FormatError("image header: bad width");
    if (h <= 0) throw FormatError("image header: bad height");
    if (maxval != 255) throw FormatError("image header: maxval must be 255");
    int sep = in.get();
    if (sep == EOF || !std::isspace(sep)) {
        throw FormatError("image header: missing separator before payload");
    }
    const std::size_t count = static_cast<std::size_t>(w) * h * channels;
    std::vector<unsigned char> bytes(count);
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) {
        throw FormatError("image payload: truncated");
    }
    Image img(h, w, channels);
    for (std::size_t i = 0; i < count; ++i) {
        img.data[i] = bytes[i] / 255.0;
    }
    return img;
}

void save_image(const Image& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3) {
        throw ShapeError("save_image: channels must be 1 or 3");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_image: cannot open " + path);
    out << (img.channels == 1 ? "P5" : "P6") << "\n"
        << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const double v = clamp01(img.data[i]);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("save_image: write failed for " + path);
}

// --- dataset manifest ------------------------------------------------------

void save_dataset_manifest(const Dataset& ds, const std::string& path) {
    nlohmann::json j;
    j["schema"] = 1;
    j["patch_size"] = ds.patch_size;
    nlohmann::json pairs = nlohmann::json::array();
    for (const ScenePair& p : ds.pairs) {
        pairs.push_back({{"seed", p.seed},
                         {"height", p.truth.height},
                         {"width", p.truth.width}});
    }
    j["pairs"] = pairs;
    std::ofstream out(path);
    if (!out) throw IoError("save_dataset_manifest: cannot open " + path);
    out << j.dump(2) << "\n";
}

Dataset load_dataset_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset_manifest: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    if (!j.contains("schema") || j["schema"] != 1) {
        throw FormatError("dataset manifest: unsupported schema");
    }
    Dataset ds;
    ds.patch_size = j.at("patch_size").get<int>();
    if (ds.patch_size <= 0 || ds.patch_size % 2 != 0) {
        throw FormatError("dataset manifest: patch_size must be positive and even");
    }
    for (const auto& pj : j.at("pairs")) {
        const long long seed = pj.at("seed").get<long long>();
        const int h = pj.at("height").get<int>();
        const int w = pj.at("width").get<int>();
        if (ds.patch_size > std::min(h, w)) {
            throw FormatError("dataset manifest: patch_size exceeds pair size");
        }
        ds.pairs.push_back(generate_scene_pair(seed, h, w));
    }
    return ds;
}

}  // namespace emma
