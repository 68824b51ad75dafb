#include "emma/transform.hpp"

#include <nlohmann/json.hpp>

namespace emma {

namespace {

constexpr D4Matrix kIdentity = {{{1, 0}, {0, 1}}};
constexpr D4Matrix kFlipH = {{{1, 0}, {0, -1}}};
constexpr D4Matrix kFlipV = {{{-1, 0}, {0, 1}}};
constexpr D4Matrix kRot1 = {{{0, -1}, {1, 0}}};  // 90 deg CCW on (y, x)

D4Matrix mat_mul(const D4Matrix& a, const D4Matrix& b) {
    D4Matrix r{};
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    return r;
}

D4Matrix mat_transpose(const D4Matrix& a) {
    return {{{a[0][0], a[1][0]}, {a[0][1], a[1][1]}}};
}

std::array<int, 2> mat_apply(const D4Matrix& a, int y, int x) {
    return {a[0][0] * y + a[0][1] * x, a[1][0] * y + a[1][1] * x};
}

int mod(int v, int n) {
    const int m = v % n;
    return m < 0 ? m + n : m;
}

// Canonical representatives: all eight D4 elements as (flip_h, rot_quarter).
struct CanonicalEntry {
    D4Matrix mat;
    bool flip_h;
    int rot;
};

const std::array<CanonicalEntry, 8>& canonical_table() {
    static const std::array<CanonicalEntry, 8> table = [] {
        std::array<CanonicalEntry, 8> t{};
        int idx = 0;
        for (int fh = 0; fh < 2; ++fh) {
            D4Matrix m = fh ? kFlipH : kIdentity;  // rot1^rot * flip^fh
            for (int rot = 0; rot < 4; ++rot) {
                t[idx++] = {m, fh == 1, rot};
                m = mat_mul(kRot1, m);
            }
        }
        return t;
    }();
    return table;
}

CanonicalEntry canonical_for(const D4Matrix& a) {
    for (const CanonicalEntry& e : canonical_table()) {
        if (e.mat == a) return e;
    }
    throw Error("transform: matrix not in D4 (internal)");
}

// Coordinate map of the pure (flip, rotation) part on an h x w grid;
// the full map is sigma(p) = pure(p) + shift (mod dims).
std::array<int, 2> pure_map(const TransformSpec& g, int y, int x, int h, int w) {
    if (g.flip_h) x = w - 1 - x;
    if (g.flip_v) y = h - 1 - y;
    for (int r = 0; r < (g.rot_quarter & 3); ++r) {
        const int ny = h - 1 - x;  // square (h == w) enforced by callers
        const int nx = y;
        y = ny;
        x = nx;
    }
    return {y, x};
}

void require_rotatable(const TransformSpec& g, int h, int w, const char* who) {
    if ((g.rot_quarter & 1) != 0 && h != w) {
        throw ShapeError(std::string(who) + ": odd rotation on non-square image");
    }
}

}  // namespace

D4Matrix d4_matrix(const TransformSpec& g) {
    D4Matrix m = kIdentity;
    if (g.flip_h) m = mat_mul(kFlipH, m);
    if (g.flip_v) m = mat_mul(kFlipV, m);
    for (int r = 0; r < (g.rot_quarter & 3); ++r) m = mat_mul(kRot1, m);
    return m;
}

bool is_identity_action(const TransformSpec& g) {
    return d4_matrix(g) == kIdentity && g.shift_y == 0 && g.shift_x == 0;
}

TransformSpec identity_transform() { return TransformSpec{}; }

std::vector<int> transform_index_map(const TransformSpec& g, int height, int width) {
    require_rotatable(g, height, width, "transform_index_map");
    std::vector<int> map(static_cast<std::size_t>(height) * width);
    const int sy = mod(g.shift_y, height);
    const int sx = mod(g.shift_x, width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const auto p = pure_map(g, y, x, height, width);
            map[static_cast<std::size_t>(y) * width + x] =
                mod(p[0] + sy, height) * width + mod(p[1] + sx, width);
        }
    }
    return map;
}

Image apply_transform(const TransformSpec& g, const Image& x) {
    const std::vector<int> map = transform_index_map(g, x.height, x.width);
    Image out(x.height, x.width, x.channels);
    for (std::size_t p = 0; p < map.size(); ++p) {
        for (int c = 0; c < x.channels; ++c) {
            out.data[static_cast<std::size_t>(map[p]) * x.channels + c] =
                x.data[p * x.channels + c];
        }
    }
    return out;
}

TransformSpec inverse_transform(const TransformSpec& g) {
    const D4Matrix a_inv = mat_transpose(d4_matrix(g));  // orthogonal, det +-1
    const CanonicalEntry e = canonical_for(a_inv);
    // sigma(p) = A p + b_pure + s  =>  sigma^{-1}(p) = A^T p - A^T b_pure - A^T s,
    // and -A^T b_pure is exactly the pure offset of the inverse element, so the
    // residual shift is -A^T s regardless of image size.
    const auto s = mat_apply(a_inv, g.shift_y, g.shift_x);
    TransformSpec inv;
    inv.flip_h = e.flip_h;
    inv.flip_v = false;
    inv.rot_quarter = e.rot;
    inv.shift_y = -s[0];
    inv.shift_x = -s[1];
    return inv;
}

TransformSpec compose_transforms(const TransformSpec& g1, const TransformSpec& g2,
                                 int height, int width) {
    require_rotatable(g1, height, width, "compose_transforms");
    require_rotatable(g2, height, width, "compose_transforms");
    if (((g1.rot_quarter | g2.rot_quarter) & 1) != 0 && height != width) {
        throw ShapeError("compose_transforms: odd rotation on non-square image");
    }
    const D4Matrix a1 = d4_matrix(g1);
    const D4Matrix a2 = d4_matrix(g2);
    const D4Matrix a12 = mat_mul(a1, a2);
    const CanonicalEntry e = canonical_for(a12);

    // Total offset: A1*(b2_pure + s2) + b1_pure + s1, with b_pure read off by
    // mapping the origin through the pure part.
    const auto b2 = pure_map(TransformSpec{0, 0, g2.rot_quarter, g2.flip_h, g2.flip_v},
                             0, 0, height, width);
    const auto b1 = pure_map(TransformSpec{0, 0, g1.rot_quarter, g1.flip_h, g1.flip_v},
                             0, 0, height, width);
    const auto a1b2 = mat_apply(a1, b2[0] + g2.shift_y, b2[1] + g2.shift_x);
    const int total_y = a1b2[0] + b1[0] + g1.shift_y;
    const int total_x = a1b2[1] + b1[1] + g1.shift_x;

    TransformSpec out;
    out.flip_h = e.flip_h;
    out.flip_v = false;
    out.rot_quarter = e.rot;
    const auto b12 = pure_map(TransformSpec{0, 0, out.rot_quarter, out.flip_h, false},
                              0, 0, height, width);
    out.shift_y = mod(total_y - b12[0], height);
    out.shift_x = mod(total_x - b12[1], width);
    return out;
}

bool permutation_matrix_check(const TransformSpec& g, int n) {
    if (n < 1 || n > 8) throw InputError("permutation_matrix_check: n must be in [1,8]");
    const int dim = n * n;
    std::vector<int> mat(static_cast<std::size_t>(dim) * dim, 0);
    const int sy = mod(g.shift_y, n);
    const int sx = mod(g.shift_x, n);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const auto p = pure_map(g, y, x, n, n);
            const int row = mod(p[0] + sy, n) * n + mod(p[1] + sx, n);
            const int col = y * n + x;
            mat[static_cast<std::size_t>(row) * dim + col] = 1;
        }
    }
    for (int i = 0; i < dim; ++i) {
        for (int j = 0; j < dim; ++j) {
            int acc = 0;
            for (int k = 0; k < dim; ++k) {
                acc += mat[static_cast<std::size_t>(k) * dim + i] *
                       mat[static_cast<std::size_t>(k) * dim + j];
            }
            if (acc != (i == j ? 1 : 0)) return false;
        }
    }
    return true;
}

TransformSpec sample_transform(Rng& rng, const GroupConfig& config) {
    if (!config.enable_shifts && !config.enable_rotations && !config.enable_flips) {
        throw ConfigError("sample_transform: empty transformation set");
    }
    for (int attempt = 0; attempt < 1000; ++attempt) {
        TransformSpec g;
        if (config.enable_flips) {
            g.flip_h = rng.uniform_int(0, 1) == 1;
            g.flip_v = rng.uniform_int(0, 1) == 1;
        }
        if (config.enable_rotations) {
            g.rot_quarter = static_cast<int>(rng.uniform_int(0, 3));
        }
        if (config.enable_shifts) {
            g.shift_y = static_cast<int>(
                rng.uniform_int(-config.max_shift_y, config.max_shift_y));
            g.shift_x = static_cast<int>(
                rng.uniform_int(-config.max_shift_x, config.max_shift_x));
        }
        if (config.require_nontrivial && is_identity_action(g)) continue;
        return g;
    }
    throw ConfigError("sample_transform: could not draw a nontrivial transform");
}

std::string transform_to_json(const TransformSpec& g) {
    nlohmann::json j = {{"shift_y", g.shift_y},
                        {"shift_x", g.shift_x},
                        {"rot_quarter", g.rot_quarter},
                        {"flip_h", g.flip_h},
                        {"flip_v", g.flip_v}};
    return j.dump();
}

TransformSpec transform_from_json(const std::string& text) {
    TransformSpec g;
    try {
        const nlohmann::json j = nlohmann::json::parse(text);
        g.shift_y = j.at("shift_y").get<int>();
        g.shift_x = j.at("shift_x").get<int>();
        g.rot_quarter = j.at("rot_quarter").get<int>();
        g.flip_h = j.at("flip_h").get<bool>();
        g.flip_v = j.at("flip_v").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("transform json: ") + e.what());
    }
    if (g.rot_quarter < 0 || g.rot_quarter > 3) {
        throw FormatError("transform json: rot_quarter out of range");
    }
    return g;
}

}  // namespace emma
