#pragma once

#include <array>
#include <string>

#include "emma/common.hpp"
#include "emma/image.hpp"

namespace emma {

// One element of the transformation set G: an exact pixel permutation built
// from axis flips, quarter-turn rotations and cyclic shifts, applied in the
// fixed order flip -> rotate -> shift. Shifts are stored unreduced and taken
// mod H/W when applied.
struct TransformSpec {
    int shift_y = 0;
    int shift_x = 0;
    int rot_quarter = 0;  // multiples of 90 degrees counterclockwise, 0..3
    bool flip_h = false;  // mirror columns
    bool flip_v = false;  // mirror rows

    bool operator==(const TransformSpec&) const = default;
};

// 2x2 integer matrix of the flip/rotation part (the D4 component).
using D4Matrix = std::array<std::array<int, 2>, 2>;

D4Matrix d4_matrix(const TransformSpec& g);
bool is_identity_action(const TransformSpec& g);

TransformSpec identity_transform();

// apply: out[sigma(p)] = in[p]; a permutation, so the pixel multiset is
// preserved exactly. Odd rotations require a square image.
Image apply_transform(const TransformSpec& g, const Image& x);

// The permutation as an index map: dst[map[p]] = src[p] for row-major pixel
// index p on an h x w grid.
std::vector<int> transform_index_map(const TransformSpec& g, int height, int width);

// Exact inverse: apply(inverse(g), apply(g, x)) == x for every x.
TransformSpec inverse_transform(const TransformSpec& g);

// Composition on h x w images: apply(compose(g1,g2), x) == apply(g1, apply(g2, x)).
TransformSpec compose_transforms(const TransformSpec& g1, const TransformSpec& g2,
                                 int height, int width);

// Materializes T_g as an n^2 x n^2 permutation matrix and verifies T^T T = I.
bool permutation_matrix_check(const TransformSpec& g, int n);

struct GroupConfig {
    bool enable_shifts = false;
    int max_shift_y = 0;  // shifts drawn uniformly from [-max, max]
    int max_shift_x = 0;
    bool enable_rotations = false;
    bool enable_flips = false;
    bool require_nontrivial = true;
};

// Uniform draw over the enabled finite set; redraws identity actions when the
// config demands a nontrivial transform.
TransformSpec sample_transform(Rng& rng, const GroupConfig& config);

std::string transform_to_json(const TransformSpec& g);
TransformSpec transform_from_json(const std::string& text);

}  // namespace emma
