#include "emma/nn/graph.hpp"

#include <algorithm>
#include <cmath>

namespace emma::nn {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void ensure_grad(const NodePtr& n) {
    if (n->needs_grad && n->grad.v.empty()) n->grad = Tensor(n->val.shape);
}

int rows_of(const Tensor& t) { return t.shape.empty() ? 1 : t.shape[0]; }
int cols_of(const Tensor& t) {
    return static_cast<int>(t.numel()) / rows_of(t);
}

// Valid output range for one kernel tap: indices where in = out*stride + kk - p
// stays inside [0, in_dim).
void conv_bounds(int kk, int p, int stride, int in_dim, int out_dim, int& lo,
                 int& hi) {
    const int off = kk - p;
    lo = 0;
    while (lo < out_dim && lo * stride + off < 0) ++lo;
    hi = out_dim - 1;
    while (hi >= 0 && hi * stride + off >= in_dim) --hi;
}

}  // namespace

NodePtr Graph::emit(Tensor val, bool needs_grad, std::function<void()> bw) {
    auto node = std::make_shared<Node>();
    node->val = std::move(val);
    node->needs_grad = needs_grad;
    ensure_grad(node);
    tape_.push_back({node, needs_grad ? std::move(bw) : std::function<void()>{}});
    return node;
}

NodePtr Graph::leaf(Tensor t, bool needs_grad) {
    return emit(std::move(t), needs_grad, {});
}
NodePtr Graph::input(Tensor t) { return leaf(std::move(t), false); }
NodePtr Graph::param(Tensor t) { return leaf(std::move(t), true); }

void Graph::backward(const NodePtr& root) {
    if (root->val.numel() != 1) throw ShapeError("backward: root must be scalar");
    if (!root->needs_grad) return;
    root->grad.v[0] += 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
        if (it->backward) it->backward();
    }
}

// --- convolution -----------------------------------------------------------

NodePtr Graph::conv2d(NodePtr x, NodePtr w, NodePtr b, int stride) {
    const auto& xs = x->val.shape;
    const auto& ws = w->val.shape;
    if (xs.size() != 3 || ws.size() != 4) throw ShapeError("conv2d: rank");
    const int ci = xs[0], h = xs[1], wd = xs[2];
    const int co = ws[0], k = ws[2];
    if (ws[1] != ci || ws[3] != k || k % 2 == 0) {
        throw ShapeError("conv2d: kernel incompatible with input");
    }
    if (b && (b->val.shape.size() != 1 || b->val.shape[0] != co)) {
        throw ShapeError("conv2d: bias shape");
    }
    if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
    const int p = k / 2;
    const int ho = (h + 2 * p - k) / stride + 1;
    const int wo = (wd + 2 * p - k) / stride + 1;

    Tensor out({co, ho, wo});
    const double* xv = x->val.v.data();
    const double* wv = w->val.v.data();
    double* ov = out.v.data();

    for (int c = 0; c < co; ++c) {
        double* plane = ov + static_cast<std::size_t>(c) * ho * wo;
        const double bias = b ? b->val.v[c] : 0.0;
        std::fill(plane, plane + static_cast<std::size_t>(ho) * wo, bias);
        for (int ic = 0; ic < ci; ++ic) {
            const double* xplane = xv + static_cast<std::size_t>(ic) * h * wd;
            const double* wk =
                wv + ((static_cast<std::size_t>(c) * ci + ic) * k) * k;
            for (int ky = 0; ky < k; ++ky) {
                int ylo, yhi;
                conv_bounds(ky, p, stride, h, ho, ylo, yhi);
                for (int kx = 0; kx < k; ++kx) {
                    const double wt = wk[ky * k + kx];
                    if (wt == 0.0) continue;
                    int xlo, xhi;
                    conv_bounds(kx, p, stride, wd, wo, xlo, xhi);
                    for (int yo = ylo; yo <= yhi; ++yo) {
                        const double* row =
                            xplane + static_cast<std::size_t>(yo * stride + ky - p) * wd +
                            (kx - p);
                        double* orow = plane + static_cast<std::size_t>(yo) * wo;
                        if (stride == 1) {
                            for (int xo = xlo; xo <= xhi; ++xo) {
                                orow[xo] += wt * row[xo];
                            }
                        } else {
                            for (int xo = xlo; xo <= xhi; ++xo) {
                                orow[xo] += wt * row[2 * xo];
                            }
                        }
                    }
                }
            }
        }
    }

    const bool ng = x->needs_grad || w->needs_grad || (b && b->needs_grad);
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;

    Node* self = outn.get();
    tape_.back().backward = [self, x, w, b, stride, ci, h, wd, co, k, p, ho, wo]() {
        const double* g = self->grad.v.data();
        const double* xv = x->val.v.data();
        const double* wv = w->val.v.data();
        if (b && b->needs_grad) {
            for (int c = 0; c < co; ++c) {
                const double* plane = g + static_cast<std::size_t>(c) * ho * wo;
                double acc = 0.0;
                for (std::size_t i = 0; i < static_cast<std::size_t>(ho) * wo; ++i) {
                    acc += plane[i];
                }
                b->grad.v[c] += acc;
            }
        }
        for (int c = 0; c < co; ++c) {
            const double* gplane = g + static_cast<std::size_t>(c) * ho * wo;
            for (int ic = 0; ic < ci; ++ic) {
                const double* xplane = xv + static_cast<std::size_t>(ic) * h * wd;
                double* gxplane =
                    x->needs_grad ? x->grad.v.data() + static_cast<std::size_t>(ic) * h * wd
                                  : nullptr;
                const std::size_t wbase = (static_cast<std::size_t>(c) * ci + ic) *
                                          static_cast<std::size_t>(k) * k;
                for (int ky = 0; ky < k; ++ky) {
                    int ylo, yhi;
                    conv_bounds(ky, p, stride, h, ho, ylo, yhi);
                    for (int kx = 0; kx < k; ++kx) {
                        const double wt = wv[wbase + ky * k + kx];
                        int xlo, xhi;
                        conv_bounds(kx, p, stride, wd, wo, xlo, xhi);
                        double wacc = 0.0;
                        for (int yo = ylo; yo <= yhi; ++yo) {
                            const std::size_t in_off =
                                static_cast<std::size_t>(yo * stride + ky - p) * wd +
                                (kx - p);
                            const double* grow =
                                gplane + static_cast<std::size_t>(yo) * wo;
                            if (gxplane) {
                                double* gxrow = gxplane + in_off;
                                if (stride == 1) {
                                    for (int xo = xlo; xo <= xhi; ++xo) {
                                        gxrow[xo] += wt * grow[xo];
                                    }
                                } else {
                                    for (int xo = xlo; xo <= xhi; ++xo) {
                                        gxrow[2 * xo] += wt * grow[xo];
                                    }
                                }
                            }
                            if (w->needs_grad) {
                                const double* xrow = xplane + in_off;
                                if (stride == 1) {
                                    for (int xo = xlo; xo <= xhi; ++xo) {
                                        wacc += xrow[xo] * grow[xo];
                                    }
                                } else {
                                    for (int xo = xlo; xo <= xhi; ++xo) {
                                        wacc += xrow[2 * xo] * grow[xo];
                                    }
                                }
                            }
                        }
                        if (w->needs_grad) w->grad.v[wbase + ky * k + kx] += wacc;
                    }
                }
            }
        }
    };
    return outn;
}

// --- elementwise -----------------------------------------------------------

NodePtr Graph::add(NodePtr a, NodePtr b) {
    if (!a->val.same_shape(b->val)) throw ShapeError("add: shape mismatch");
    Tensor out(a->val.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.v[i] = a->val.v[i] + b->val.v[i];
    }
    const bool ng = a->needs_grad || b->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, a, b]() {
        const std::size_t n = self->grad.numel();
        if (a->needs_grad) {
            for (std::size_t i = 0; i < n; ++i) a->grad.v[i] += self->grad.v[i];
        }
        if (b->needs_grad) {
            for (std::size_t i = 0; i < n; ++i) b->grad.v[i] += self->grad.v[i];
        }
    };
    return outn;
}

NodePtr Graph::sub(NodePtr a, NodePtr b) {
    if (!a->val.same_shape(b->val)) throw ShapeError("sub: shape mismatch");
    Tensor out(a->val.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.v[i] = a->val.v[i] - b->val.v[i];
    }
    const bool ng = a->needs_grad || b->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, a, b]() {
        const std::size_t n = self->grad.numel();
        if (a->needs_grad) {
            for (std::size_t i = 0; i < n; ++i) a->grad.v[i] += self->grad.v[i];
        }
        if (b->needs_grad) {
            for (std::size_t i = 0; i < n; ++i) b->grad.v[i] -= self->grad.v[i];
        }
    };
    return outn;
}

NodePtr Graph::mul(NodePtr a, NodePtr b) {
    if (!a->val.same_shape(b->val)) throw ShapeError("mul: shape mismatch");
    Tensor out(a->val.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.v[i] = a->val.v[i] * b->val.v[i];
    }
    const bool ng = a->needs_grad || b->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, a, b]() {
        const std::size_t n = self->grad.numel();
        if (a->needs_grad) {
            for (std::size_t i = 0; i < n; ++i) {
                a->grad.v[i] += self->grad.v[i] * b->val.v[i];
            }
        }
        if (b->needs_grad) {
            for (std::size_t i = 0; i < n; ++i) {
                b->grad.v[i] += self->grad.v[i] * a->val.v[i];
            }
        }
    };
    return outn;
}

NodePtr Graph::scale(NodePtr x, double c) {
    Tensor out(x->val.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] = c * x->val.v[i];
    NodePtr outn = emit(std::move(out), x->needs_grad, {});
    if (!x->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x, c]() {
        for (std::size_t i = 0; i < self->grad.numel(); ++i) {
            x->grad.v[i] += c * self->grad.v[i];
        }
    };
    return outn;
}

NodePtr Graph::relu(NodePtr x) {
    Tensor out(x->val.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.v[i] = x->val.v[i] > 0.0 ? x->val.v[i] : 0.0;
    }
    NodePtr outn = emit(std::move(out), x->needs_grad, {});
    if (!x->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x]() {
        for (std::size_t i = 0; i < self->grad.numel(); ++i) {
            if (x->val.v[i] > 0.0) x->grad.v[i] += self->grad.v[i];
        }
    };
    return outn;
}

NodePtr Graph::gelu(NodePtr x) {
    Tensor out(x->val.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double v = x->val.v[i];
        out.v[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    NodePtr outn = emit(std::move(out), x->needs_grad, {});
    if (!x->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x]() {
        for (std::size_t i = 0; i < self->grad.numel(); ++i) {
            const double v = x->val.v[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            x->grad.v[i] += self->grad.v[i] * (cdf + v * pdf);
        }
    };
    return outn;
}

NodePtr Graph::sigmoid(NodePtr x) {
    Tensor out(x->val.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.v[i] = 1.0 / (1.0 + std::exp(-x->val.v[i]));
    }
    NodePtr outn = emit(std::move(out), x->needs_grad, {});
    if (!x->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x]() {
        for (std::size_t i = 0; i < self->grad.numel(); ++i) {
            const double s = self->val.v[i];
            x->grad.v[i] += self->grad.v[i] * s * (1.0 - s);
        }
    };
    return outn;
}

// --- normalization ---------------------------------------------------------

NodePtr Graph::layer_norm_channels(NodePtr x, NodePtr gain, NodePtr bias,
                                   double eps) {
    const auto& s = x->val.shape;
    if (s.size() != 3) throw ShapeError("layer_norm_channels: rank");
    const int c = s[0], h = s[1], w = s[2];
    if (gain->val.numel() != static_cast<std::size_t>(c) ||
        bias->val.numel() != static_cast<std::size_t>(c)) {
        throw ShapeError("layer_norm_channels: gain/bias shape");
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor out(s);
    // Cache the per-pixel inverse stddev and normalized values for backward.
    auto inv_std = std::make_shared<std::vector<double>>(plane);
    auto xhat = std::make_shared<std::vector<double>>(x->val.numel());
    for (std::size_t p = 0; p < plane; ++p) {
        double mu = 0.0;
        for (int ch = 0; ch < c; ++ch) mu += x->val.v[ch * plane + p];
        mu /= c;
        double var = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            const double d = x->val.v[ch * plane + p] - mu;
            var += d * d;
        }
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[p] = is;
        for (int ch = 0; ch < c; ++ch) {
            const double xh = (x->val.v[ch * plane + p] - mu) * is;
            (*xhat)[ch * plane + p] = xh;
            out.v[ch * plane + p] = gain->val.v[ch] * xh + bias->val.v[ch];
        }
    }
    const bool ng = x->needs_grad || gain->needs_grad || bias->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x, gain, bias, c, plane, inv_std, xhat]() {
        for (std::size_t p = 0; p < plane; ++p) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                const double go = self->grad.v[ch * plane + p];
                const double xh = (*xhat)[ch * plane + p];
                if (gain->needs_grad) gain->grad.v[ch] += go * xh;
                if (bias->needs_grad) bias->grad.v[ch] += go;
                const double dxh = go * gain->val.v[ch];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh;
            }
            if (x->needs_grad) {
                const double is = (*inv_std)[p];
                for (int ch = 0; ch < c; ++ch) {
                    const double go = self->grad.v[ch * plane + p];
                    const double dxh = go * gain->val.v[ch];
                    const double xh = (*xhat)[ch * plane + p];
                    x->grad.v[ch * plane + p] +=
                        is * (dxh - (sum_dxhat + xh * sum_dxhat_xhat) / c);
                }
            }
        }
    };
    return outn;
}

// --- shape ops --------------------------------------------------------------

NodePtr Graph::concat_channels(NodePtr a, NodePtr b) {
    const auto& sa = a->val.shape;
    const auto& sb = b->val.shape;
    if (sa.size() != 3 || sb.size() != 3 || sa[1] != sb[1] || sa[2] != sb[2]) {
        throw ShapeError("concat_channels: spatial mismatch");
    }
    Tensor out({sa[0] + sb[0], sa[1], sa[2]});
    std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(),
              out.v.begin() + static_cast<std::ptrdiff_t>(a->val.numel()));
    const bool ng = a->needs_grad || b->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, a, b]() {
        const std::size_t na = a->val.numel();
        if (a->needs_grad) {
            for (std::size_t i = 0; i < na; ++i) a->grad.v[i] += self->grad.v[i];
        }
        if (b->needs_grad) {
            for (std::size_t i = 0; i < b->val.numel(); ++i) {
                b->grad.v[i] += self->grad.v[na + i];
            }
        }
    };
    return outn;
}

NodePtr Graph::upsample_nearest2x(NodePtr x) {
    const auto& s = x->val.shape;
    if (s.size() != 3) throw ShapeError("upsample_nearest2x: rank");
    const int c = s[0], h = s[1], w = s[2];
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch) {
        const double* in = x->val.v.data() + static_cast<std::size_t>(ch) * h * w;
        double* o = out.v.data() + static_cast<std::size_t>(ch) * 4 * h * w;
        for (int y = 0; y < 2 * h; ++y) {
            const double* irow = in + static_cast<std::size_t>(y / 2) * w;
            double* orow = o + static_cast<std::size_t>(y) * 2 * w;
            for (int xx = 0; xx < 2 * w; ++xx) orow[xx] = irow[xx / 2];
        }
    }
    NodePtr outn = emit(std::move(out), x->needs_grad, {});
    if (!x->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x, c, h, w]() {
        for (int ch = 0; ch < c; ++ch) {
            double* gi = x->grad.v.data() + static_cast<std::size_t>(ch) * h * w;
            const double* go =
                self->grad.v.data() + static_cast<std::size_t>(ch) * 4 * h * w;
            for (int y = 0; y < 2 * h; ++y) {
                const double* grow = go + static_cast<std::size_t>(y) * 2 * w;
                double* girow = gi + static_cast<std::size_t>(y / 2) * w;
                for (int xx = 0; xx < 2 * w; ++xx) girow[xx / 2] += grow[xx];
            }
        }
    };
    return outn;
}

// --- attention pieces -------------------------------------------------------

NodePtr Graph::row_l2_normalize(NodePtr x, double eps) {
    const int r = rows_of(x->val);
    const int k = cols_of(x->val);
    Tensor out(x->val.shape);
    auto inv_norm = std::make_shared<std::vector<double>>(r);
    for (int i = 0; i < r; ++i) {
        const double* row = x->val.v.data() + static_cast<std::size_t>(i) * k;
        double ss = 0.0;
        for (int j = 0; j < k; ++j) ss += row[j] * row[j];
        const double inv = 1.0 / std::sqrt(ss + eps);
        (*inv_norm)[i] = inv;
        double* orow = out.v.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) orow[j] = row[j] * inv;
    }
    NodePtr outn = emit(std::move(out), x->needs_grad, {});
    if (!x->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x, r, k, inv_norm]() {
        for (int i = 0; i < r; ++i) {
            const double inv = (*inv_norm)[i];
            const double* xrow = x->val.v.data() + static_cast<std::size_t>(i) * k;
            const double* grow = self->grad.v.data() + static_cast<std::size_t>(i) * k;
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += grow[j] * xrow[j];
            const double inv3 = inv * inv * inv;
            double* gxrow = x->grad.v.data() + static_cast<std::size_t>(i) * k;
            for (int j = 0; j < k; ++j) {
                gxrow[j] += grow[j] * inv - xrow[j] * dot * inv3;
            }
        }
    };
    return outn;
}

NodePtr Graph::matmul_nt(NodePtr a, NodePtr b) {
    const int r = rows_of(a->val), ka = cols_of(a->val);
    const int s = rows_of(b->val), kb = cols_of(b->val);
    if (ka != kb) throw ShapeError("matmul_nt: inner dim mismatch");
    Tensor out({r, s});
    for (int i = 0; i < r; ++i) {
        const double* arow = a->val.v.data() + static_cast<std::size_t>(i) * ka;
        for (int j = 0; j < s; ++j) {
            const double* brow = b->val.v.data() + static_cast<std::size_t>(j) * ka;
            double acc = 0.0;
            for (int t = 0; t < ka; ++t) acc += arow[t] * brow[t];
            out.v[static_cast<std::size_t>(i) * s + j] = acc;
        }
    }
    const bool ng = a->needs_grad || b->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, a, b, r, s, ka]() {
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < s; ++j) {
                const double g = self->grad.v[static_cast<std::size_t>(i) * s + j];
                if (g == 0.0) continue;
                const double* brow = b->val.v.data() + static_cast<std::size_t>(j) * ka;
                const double* arow = a->val.v.data() + static_cast<std::size_t>(i) * ka;
                if (a->needs_grad) {
                    double* garow = a->grad.v.data() + static_cast<std::size_t>(i) * ka;
                    for (int t = 0; t < ka; ++t) garow[t] += g * brow[t];
                }
                if (b->needs_grad) {
                    double* gbrow = b->grad.v.data() + static_cast<std::size_t>(j) * ka;
                    for (int t = 0; t < ka; ++t) gbrow[t] += g * arow[t];
                }
            }
        }
    };
    return outn;
}

NodePtr Graph::matmul(NodePtr a, NodePtr b) {
    const int r = rows_of(a->val), s = cols_of(a->val);
    const int rb = rows_of(b->val), k = cols_of(b->val);
    if (s != rb) throw ShapeError("matmul: inner dim mismatch");
    Tensor out(b->val.shape);
    out.shape[0] = r;
    out.v.assign(static_cast<std::size_t>(r) * k, 0.0);
    for (int i = 0; i < r; ++i) {
        double* orow = out.v.data() + static_cast<std::size_t>(i) * k;
        const double* arow = a->val.v.data() + static_cast<std::size_t>(i) * s;
        for (int j = 0; j < s; ++j) {
            const double av = arow[j];
            if (av == 0.0) continue;
            const double* brow = b->val.v.data() + static_cast<std::size_t>(j) * k;
            for (int t = 0; t < k; ++t) orow[t] += av * brow[t];
        }
    }
    const bool ng = a->needs_grad || b->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, a, b, r, s, k]() {
        for (int i = 0; i < r; ++i) {
            const double* grow = self->grad.v.data() + static_cast<std::size_t>(i) * k;
            const double* arow = a->val.v.data() + static_cast<std::size_t>(i) * s;
            double* garow =
                a->needs_grad ? a->grad.v.data() + static_cast<std::size_t>(i) * s
                              : nullptr;
            for (int j = 0; j < s; ++j) {
                const double* brow = b->val.v.data() + static_cast<std::size_t>(j) * k;
                if (garow) {
                    double acc = 0.0;
                    for (int t = 0; t < k; ++t) acc += grow[t] * brow[t];
                    garow[j] += acc;
                }
                if (b->needs_grad) {
                    const double av = arow[j];
                    double* gbrow = b->grad.v.data() + static_cast<std::size_t>(j) * k;
                    for (int t = 0; t < k; ++t) gbrow[t] += av * grow[t];
                }
            }
        }
    };
    return outn;
}

NodePtr Graph::softmax_rows(NodePtr m) {
    const int r = rows_of(m->val), k = cols_of(m->val);
    Tensor out(m->val.shape);
    for (int i = 0; i < r; ++i) {
        const double* row = m->val.v.data() + static_cast<std::size_t>(i) * k;
        double* orow = out.v.data() + static_cast<std::size_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < k; ++j) orow[j] /= sum;
    }
    NodePtr outn = emit(std::move(out), m->needs_grad, {});
    if (!m->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, m, r, k]() {
        for (int i = 0; i < r; ++i) {
            const double* y = self->val.v.data() + static_cast<std::size_t>(i) * k;
            const double* gy = self->grad.v.data() + static_cast<std::size_t>(i) * k;
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += gy[j] * y[j];
            double* gm = m->grad.v.data() + static_cast<std::size_t>(i) * k;
            for (int j = 0; j < k; ++j) gm[j] += y[j] * (gy[j] - dot);
        }
    };
    return outn;
}

NodePtr Graph::scale_by_exp_neg(NodePtr x, NodePtr log_scale) {
    if (log_scale->val.numel() != 1) throw ShapeError("scale_by_exp_neg: scalar");
    const double factor = std::exp(-log_scale->val.v[0]);
    Tensor out(x->val.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] = factor * x->val.v[i];
    const bool ng = x->needs_grad || log_scale->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x, log_scale, factor]() {
        if (x->needs_grad) {
            for (std::size_t i = 0; i < self->grad.numel(); ++i) {
                x->grad.v[i] += factor * self->grad.v[i];
            }
        }
        if (log_scale->needs_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self->grad.numel(); ++i) {
                acc += self->grad.v[i] * self->val.v[i];
            }
            log_scale->grad.v[0] -= acc;  // d(exp(-s))/ds = -exp(-s)
        }
    };
    return outn;
}

// --- structured ops ---------------------------------------------------------

NodePtr Graph::permute_pixels(NodePtr x,
                              std::shared_ptr<const std::vector<int>> perm) {
    const auto& s = x->val.shape;
    if (s.size() != 3) throw ShapeError("permute_pixels: rank");
    const int c = s[0];
    const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
    if (perm->size() != plane) throw ShapeError("permute_pixels: size mismatch");
    Tensor out(s);
    for (int ch = 0; ch < c; ++ch) {
        const double* in = x->val.v.data() + ch * plane;
        double* o = out.v.data() + ch * plane;
        for (std::size_t p = 0; p < plane; ++p) o[(*perm)[p]] = in[p];
    }
    NodePtr outn = emit(std::move(out), x->needs_grad, {});
    if (!x->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x, perm, c, plane]() {
        for (int ch = 0; ch < c; ++ch) {
            double* gi = x->grad.v.data() + ch * plane;
            const double* go = self->grad.v.data() + ch * plane;
            for (std::size_t p = 0; p < plane; ++p) gi[p] += go[(*perm)[p]];
        }
    };
    return outn;
}

namespace {
constexpr int kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr int kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
}  // namespace

NodePtr Graph::sobel_pair(NodePtr x) {
    const auto& s = x->val.shape;
    if (s.size() != 3 || s[0] != 1) throw ShapeError("sobel_pair: expect [1,H,W]");
    const int h = s[1], w = s[2];
    Tensor out({2, h, w});
    const double* in = x->val.v.data();
    auto px = [&](int yy, int xx2) {
        return in[static_cast<std::size_t>(yy) * w + xx2];
    };
    for (int y = 0; y < h; ++y) {
        const int ym = reflect_index(y - 1, h), yp = reflect_index(y + 1, h);
        for (int xx = 0; xx < w; ++xx) {
            const int xm = reflect_index(xx - 1, w), xp2 = reflect_index(xx + 1, w);
            // Same symmetric-difference form as losses::sobel so flat regions
            // cancel exactly and the two paths agree bitwise.
            const double gx = (px(ym, xp2) + 2.0 * px(y, xp2) + px(yp, xp2)) -
                              (px(ym, xm) + 2.0 * px(y, xm) + px(yp, xm));
            const double gy = (px(yp, xm) + 2.0 * px(yp, xx) + px(yp, xp2)) -
                              (px(ym, xm) + 2.0 * px(ym, xx) + px(ym, xp2));
            out.v[static_cast<std::size_t>(y) * w + xx] = gx;
            out.v[static_cast<std::size_t>(h) * w + static_cast<std::size_t>(y) * w + xx] = gy;
        }
    }
    NodePtr outn = emit(std::move(out), x->needs_grad, {});
    if (!x->needs_grad) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, x, h, w]() {
        const double* ggx = self->grad.v.data();
        const double* ggy = self->grad.v.data() + static_cast<std::size_t>(h) * w;
        double* gi = x->grad.v.data();
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const double gx = ggx[static_cast<std::size_t>(y) * w + xx];
                const double gy = ggy[static_cast<std::size_t>(y) * w + xx];
                if (gx == 0.0 && gy == 0.0) continue;
                for (int dy = 0; dy < 3; ++dy) {
                    const int yy = reflect_index(y + dy - 1, h);
                    for (int dx = 0; dx < 3; ++dx) {
                        const int xi = reflect_index(xx + dx - 1, w);
                        gi[static_cast<std::size_t>(yy) * w + xi] +=
                            kSobelX[dy][dx] * gx + kSobelY[dy][dx] * gy;
                    }
                }
            }
        }
    };
    return outn;
}

// --- reductions -------------------------------------------------------------

NodePtr Graph::mean_abs_diff(NodePtr a, NodePtr b) {
    if (!a->val.same_shape(b->val)) throw ShapeError("mean_abs_diff: shape");
    const std::size_t n = a->val.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(a->val.v[i] - b->val.v[i]);
    Tensor out({1});
    out.v[0] = acc / static_cast<double>(n);
    const bool ng = a->needs_grad || b->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, a, b, n]() {
        const double g = self->grad.v[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = a->val.v[i] - b->val.v[i];
            const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            if (a->needs_grad) a->grad.v[i] += g * s;
            if (b->needs_grad) b->grad.v[i] -= g * s;
        }
    };
    return outn;
}

NodePtr Graph::mean_sq_diff(NodePtr a, NodePtr b) {
    if (!a->val.same_shape(b->val)) throw ShapeError("mean_sq_diff: shape");
    const std::size_t n = a->val.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a->val.v[i] - b->val.v[i];
        acc += d * d;
    }
    Tensor out({1});
    out.v[0] = acc / static_cast<double>(n);
    const bool ng = a->needs_grad || b->needs_grad;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    tape_.back().backward = [self, a, b, n]() {
        const double g = 2.0 * self->grad.v[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = a->val.v[i] - b->val.v[i];
            if (a->needs_grad) a->grad.v[i] += g * d;
            if (b->needs_grad) b->grad.v[i] -= g * d;
        }
    };
    return outn;
}

NodePtr Graph::weighted_sum(const std::vector<NodePtr>& terms,
                            const std::vector<double>& weights) {
    if (terms.size() != weights.size() || terms.empty()) {
        throw ShapeError("weighted_sum: arity mismatch");
    }
    double acc = 0.0;
    bool ng = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i]->val.numel() != 1) throw ShapeError("weighted_sum: scalar terms");
        acc += weights[i] * terms[i]->val.v[0];
        ng = ng || terms[i]->needs_grad;
    }
    Tensor out({1});
    out.v[0] = acc;
    NodePtr outn = emit(std::move(out), ng, {});
    if (!ng) return outn;
    Node* self = outn.get();
    auto terms_copy = terms;
    auto weights_copy = weights;
    tape_.back().backward = [self, terms_copy, weights_copy]() {
        for (std::size_t i = 0; i < terms_copy.size(); ++i) {
            if (terms_copy[i]->needs_grad) {
                terms_copy[i]->grad.v[0] += weights_copy[i] * self->grad.v[0];
            }
        }
    };
    return outn;
}

}  // namespace emma::nn
