#pragma once

#include <cstddef>
#include <vector>

#include "emma/common.hpp"

namespace emma::nn {

// Dense double-precision tensor, row-major. Shapes are small vectors like
// {C,H,W} for feature maps, {Co,Ci,Kh,Kw} for conv kernels, {1} for scalars.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(numel_of(shape), 0.0);
    }
    Tensor(std::vector<int> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != numel_of(shape)) throw ShapeError("Tensor: size mismatch");
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("Tensor: nonpositive dim");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t numel() const { return v.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace emma::nn
