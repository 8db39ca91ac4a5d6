#pragma once

// Differentiable kernels for the convolutional trunk. Every op takes the
// graph it records into and returns the handle of its output node.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duflow/error.hpp"
#include "duflow/gemm.hpp"
#include "duflow/graph.hpp"
#include "duflow/tensor.hpp"

namespace duflow {

struct ConvSpec {
    int stride = 1;
    int dilation = 1;
    int padding = 0;

    /// Padding that keeps resolution at stride 1: dilation * (kernel - 1) / 2.
    static ConvSpec same(int kernel, int dilation = 1, int stride = 1) {
        return ConvSpec{stride, dilation, dilation * (kernel - 1) / 2};
    }
};

inline int conv_output_size(int in, int kernel, const ConvSpec &spec) {
    const int span = spec.dilation * (kernel - 1) + 1;
    const int num = in + 2 * spec.padding - span;
    if (num < 0) return 0;
    return num / spec.stride + 1;
}

namespace detail {

struct ConvGeometry {
    int batch, in_c, in_h, in_w;
    int kh, kw;
    int out_h, out_w;
    ConvSpec spec;

    int rows() const { return in_c * kh * kw; }
    int cols() const { return batch * out_h * out_w; }
};

// col is rows() x cols(), column index = n * P + (oy * out_w + ox).
template <typename T>
void im2col(const T *x, const ConvGeometry &g, T *col) {
    const int P = g.out_h * g.out_w;
    const int cols = g.cols();
    for (int c = 0; c < g.in_c; ++c)
        for (int ki = 0; ki < g.kh; ++ki)
            for (int kj = 0; kj < g.kw; ++kj) {
                T *row = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * cols;
                for (int n = 0; n < g.batch; ++n) {
                    const T *src = x + (static_cast<std::size_t>(n) * g.in_c + c) * g.in_h * g.in_w;
                    T *dst = row + static_cast<std::size_t>(n) * P;
                    for (int oy = 0; oy < g.out_h; ++oy) {
                        const int iy = oy * g.spec.stride - g.spec.padding + ki * g.spec.dilation;
                        T *d = dst + oy * g.out_w;
                        if (iy < 0 || iy >= g.in_h) {
                            std::fill(d, d + g.out_w, T(0));
                            continue;
                        }
                        const T *s = src + static_cast<std::size_t>(iy) * g.in_w;
                        for (int ox = 0; ox < g.out_w; ++ox) {
                            const int ix = ox * g.spec.stride - g.spec.padding + kj * g.spec.dilation;
                            d[ox] = (ix >= 0 && ix < g.in_w) ? s[ix] : T(0);
                        }
                    }
                }
            }
}

template <typename T>
void col2im_add(const T *col, const ConvGeometry &g, T *dx) {
    const int P = g.out_h * g.out_w;
    const int cols = g.cols();
    for (int c = 0; c < g.in_c; ++c)
        for (int ki = 0; ki < g.kh; ++ki)
            for (int kj = 0; kj < g.kw; ++kj) {
                const T *row = col + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * cols;
                for (int n = 0; n < g.batch; ++n) {
                    T *dst = dx + (static_cast<std::size_t>(n) * g.in_c + c) * g.in_h * g.in_w;
                    const T *src = row + static_cast<std::size_t>(n) * P;
                    for (int oy = 0; oy < g.out_h; ++oy) {
                        const int iy = oy * g.spec.stride - g.spec.padding + ki * g.spec.dilation;
                        if (iy < 0 || iy >= g.in_h) continue;
                        T *d = dst + static_cast<std::size_t>(iy) * g.in_w;
                        const T *s = src + oy * g.out_w;
                        for (int ox = 0; ox < g.out_w; ++ox) {
                            const int ix = ox * g.spec.stride - g.spec.padding + kj * g.spec.dilation;
                            if (ix >= 0 && ix < g.in_w) d[ix] += s[ox];
                        }
                    }
                }
            }
}

/// Source taps for one axis of an align-corners-false bilinear resize:
/// src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
struct ResizeTap {
    int i0, i1;
    double w1;
};

inline std::vector<ResizeTap> resize_taps(int in, int out) {
    std::vector<ResizeTap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int d = 0; d < out; ++d) {
        double s = (d + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, in - 1);
        taps[static_cast<std::size_t>(d)] = ResizeTap{i0, i1, s - i0};
    }
    return taps;
}

}  // namespace detail

/// Dilated, strided 2-D cross-correlation with zero padding.
/// x: (N, I, H, W), w: (O, I, kh, kw), bias: (1, O, 1, 1) or an invalid Var.
template <typename T>
Var conv2d(Graph<T> &g, Var x, Var w, Var bias, const ConvSpec &spec) {
    const Shape4 xs = g.shape(x);
    const Shape4 ws = g.shape(w);
    if (xs.c != ws.c)
        throw Error(ErrorCode::ShapeMismatch,
                    "conv2d input " + xs.str() + " does not match filters " + ws.str() + " (channels)");
    if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0)
        throw Error(ErrorCode::InvalidArgument, "conv2d: stride/dilation must be >= 1 and padding >= 0");
    if (bias.valid() && !(g.shape(bias) == Shape4{1, ws.n, 1, 1}))
        throw Error(ErrorCode::ShapeMismatch, "conv2d bias " + g.shape(bias).str() + " for filters " + ws.str());
    const int oh = conv_output_size(xs.h, ws.h, spec);
    const int ow = conv_output_size(xs.w, ws.w, spec);
    if (oh < 1 || ow < 1)
        throw Error(ErrorCode::InvalidShape, "conv2d output would be " + std::to_string(oh) + "x" +
                                                 std::to_string(ow) + " for input " + xs.str() + " and filters " +
                                                 ws.str());

    const detail::ConvGeometry geo{xs.n, xs.c, xs.h, xs.w, ws.h, ws.w, oh, ow, spec};
    const int K = geo.rows();
    const int cols = geo.cols();
    const int P = oh * ow;
    const int O = ws.n;

    std::vector<T> col(static_cast<std::size_t>(K) * cols);
    detail::im2col(g.value(x).data(), geo, col.data());
    std::vector<T> y(static_cast<std::size_t>(O) * cols);
    detail::gemm_nn(O, cols, K, g.value(w).data(), col.data(), y.data());

    Tensor4<T> out(Shape4{xs.n, O, oh, ow});
    const T *bv = bias.valid() ? g.value(bias).data() : nullptr;
    for (int n = 0; n < xs.n; ++n)
        for (int o = 0; o < O; ++o) {
            const T *src = y.data() + static_cast<std::size_t>(o) * cols + static_cast<std::size_t>(n) * P;
            T *dst = out.plane(n, o);
            const T b = bv ? bv[o] : T(0);
            for (int p = 0; p < P; ++p) dst[p] = src[p] + b;
        }

    auto backward = [x, w, bias, geo](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        const int K = geo.rows();
        const int cols = geo.cols();
        const int P = geo.out_h * geo.out_w;
        const int O = gr.shape(w).n;
        std::vector<T> dy(static_cast<std::size_t>(O) * cols);
        for (int n = 0; n < geo.batch; ++n)
            for (int o = 0; o < O; ++o) {
                const T *src = gout.plane(n, o);
                std::copy(src, src + P, dy.data() + static_cast<std::size_t>(o) * cols + static_cast<std::size_t>(n) * P);
            }
        if (bias.valid() && gr.requires_grad(bias)) {
            auto &gb = gr.grad_buffer(bias);
            for (int o = 0; o < O; ++o) {
                T acc = T(0);
                const T *row = dy.data() + static_cast<std::size_t>(o) * cols;
                for (int i = 0; i < cols; ++i) acc += row[i];
                gb[static_cast<std::size_t>(o)] += acc;
            }
        }
        const bool need_w = gr.requires_grad(w);
        const bool need_x = gr.requires_grad(x);
        if (need_w) {
            std::vector<T> col(static_cast<std::size_t>(K) * cols);
            detail::im2col(gr.value(x).data(), geo, col.data());
            detail::gemm_nt(O, K, cols, dy.data(), col.data(), gr.grad_buffer(w).data(), true);
        }
        if (need_x) {
            std::vector<T> dcol(static_cast<std::size_t>(K) * cols);
            detail::gemm_tn(K, cols, O, gr.value(w).data(), dy.data(), dcol.data());
            detail::col2im_add(dcol.data(), geo, gr.grad_buffer(x).data());
        }
    };
    if (bias.valid()) return g.record(std::move(out), {x, w, bias}, backward);
    return g.record(std::move(out), {x, w}, backward);
}

/// x if x >= 0 else slope * x.
template <typename T>
Var leaky_relu(Graph<T> &g, Var x, T slope) {
    if (!(slope > T(0) && slope < T(1))) throw Error(ErrorCode::InvalidArgument, "leaky_relu slope must be in (0,1)");
    const auto &xv = g.value(x);
    Tensor4<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] >= T(0) ? xv[i] : slope * xv[i];
    return g.record(std::move(out), {x}, [x, slope](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        const auto &xv = gr.value(x);
        auto &gx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += xv[i] >= T(0) ? gout[i] : slope * gout[i];
    });
}

/// Concatenates along channels; batch and spatial dims must agree.
template <typename T>
Var concat_channels(Graph<T> &g, std::span<const Var> inputs) {
    if (inputs.empty()) throw Error(ErrorCode::InvalidArgument, "concat_channels of nothing");
    const Shape4 first = g.shape(inputs[0]);
    int channels = 0;
    for (Var v : inputs) {
        const Shape4 s = g.shape(v);
        if (s.n != first.n || s.h != first.h || s.w != first.w)
            throw Error(ErrorCode::ShapeMismatch,
                        "concat_channels spatial mismatch " + first.str() + " vs " + s.str() + "; resize first");
        channels += s.c;
    }
    Tensor4<T> out(Shape4{first.n, channels, first.h, first.w});
    const std::size_t plane = first.plane();
    for (int n = 0; n < first.n; ++n) {
        int c0 = 0;
        for (Var v : inputs) {
            const auto &t = g.value(v);
            std::copy_n(t.plane(n, 0), plane * t.c(), out.plane(n, c0));
            c0 += t.c();
        }
    }
    std::vector<Var> ins(inputs.begin(), inputs.end());
    return g.record(std::move(out), ins, [ins](Graph<T> &gr, const Tensor4<T> &value, const Tensor4<T> &gout) {
        const Shape4 s = value.shape();
        const std::size_t plane = s.plane();
        int c0 = 0;
        for (Var v : ins) {
            const int c = gr.shape(v).c;
            if (gr.requires_grad(v)) {
                auto &gv = gr.grad_buffer(v);
                for (int n = 0; n < s.n; ++n) {
                    const T *src = gout.plane(n, c0);
                    T *dst = gv.plane(n, 0);
                    for (std::size_t i = 0; i < plane * c; ++i) dst[i] += src[i];
                }
            }
            c0 += c;
        }
    });
}

template <typename T>
Var concat_channels(Graph<T> &g, std::initializer_list<Var> inputs) {
    return concat_channels(g, std::span<const Var>(inputs.begin(), inputs.size()));
}

/// Bilinear resize, align-corners-false: a destination pixel d samples the
/// source at (d + 0.5) * in / out - 0.5, clamped to the image.
template <typename T>
Tensor4<T> resize_bilinear_values(const Tensor4<T> &x, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw Error(ErrorCode::InvalidArgument, "resize_bilinear to non-positive size");
    const Shape4 s = x.shape();
    const auto ty = detail::resize_taps(s.h, out_h);
    const auto tx = detail::resize_taps(s.w, out_w);
    Tensor4<T> out(Shape4{s.n, s.c, out_h, out_w});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const T *src = x.plane(n, c);
            T *dst = out.plane(n, c);
            for (int y = 0; y < out_h; ++y) {
                const auto &a = ty[static_cast<std::size_t>(y)];
                const T wy = static_cast<T>(a.w1);
                const T *r0 = src + static_cast<std::size_t>(a.i0) * s.w;
                const T *r1 = src + static_cast<std::size_t>(a.i1) * s.w;
                for (int xo = 0; xo < out_w; ++xo) {
                    const auto &b = tx[static_cast<std::size_t>(xo)];
                    const T wx = static_cast<T>(b.w1);
                    const T top = (T(1) - wx) * r0[b.i0] + wx * r0[b.i1];
                    const T bot = (T(1) - wx) * r1[b.i0] + wx * r1[b.i1];
                    dst[static_cast<std::size_t>(y) * out_w + xo] = (T(1) - wy) * top + wy * bot;
                }
            }
        }
    return out;
}

template <typename T>
Var resize_bilinear(Graph<T> &g, Var x, int out_h, int out_w) {
    const Shape4 s = g.shape(x);
    if (s.h == out_h && s.w == out_w) return x;
    Tensor4<T> out = resize_bilinear_values(g.value(x), out_h, out_w);
    return g.record(std::move(out), {x}, [x, out_h, out_w](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        const Shape4 s = gr.shape(x);
        const auto ty = detail::resize_taps(s.h, out_h);
        const auto tx = detail::resize_taps(s.w, out_w);
        auto &gx = gr.grad_buffer(x);
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
                T *dst = gx.plane(n, c);
                const T *src = gout.plane(n, c);
                for (int y = 0; y < out_h; ++y) {
                    const auto &a = ty[static_cast<std::size_t>(y)];
                    const T wy = static_cast<T>(a.w1);
                    T *r0 = dst + static_cast<std::size_t>(a.i0) * s.w;
                    T *r1 = dst + static_cast<std::size_t>(a.i1) * s.w;
                    for (int xo = 0; xo < out_w; ++xo) {
                        const auto &b = tx[static_cast<std::size_t>(xo)];
                        const T wx = static_cast<T>(b.w1);
                        const T gv = src[static_cast<std::size_t>(y) * out_w + xo];
                        r0[b.i0] += (T(1) - wy) * (T(1) - wx) * gv;
                        r0[b.i1] += (T(1) - wy) * wx * gv;
                        r1[b.i0] += wy * (T(1) - wx) * gv;
                        r1[b.i1] += wy * wx * gv;
                    }
                }
            }
    });
}

/// Mean of all elements, as a (1,1,1,1) node.
template <typename T>
Var reduce_mean(Graph<T> &g, Var x) {
    const auto &xv = g.value(x);
    T acc = T(0);
    for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
    const T inv = T(1) / static_cast<T>(xv.size());
    return g.record(Tensor4<T>::scalar(acc * inv), {x}, [x, inv](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        auto &gx = gr.grad_buffer(x);
        const T d = gout[0] * inv;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d;
    });
}

/// Σ(x·m) / Σm for a constant {0,1} mask. Throws MaskEmpty when Σm = 0.
template <typename T>
Var reduce_mean(Graph<T> &g, Var x, const Tensor4<T> &mask) {
    const auto &xv = g.value(x);
    require_same_shape(xv.shape(), mask.shape(), "reduce_mean mask");
    T msum = T(0);
    T acc = T(0);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        msum += mask[i];
        acc += xv[i] * mask[i];
    }
    if (!(msum > T(0))) throw Error(ErrorCode::MaskEmpty, "reduce_mean with an all-zero mask");
    const T inv = T(1) / msum;
    return g.record(Tensor4<T>::scalar(acc * inv), {x},
                    [x, inv, mask](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
                        auto &gx = gr.grad_buffer(x);
                        const T d = gout[0] * inv;
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d * mask[i];
                    });
}

/// Sum of all elements.
template <typename T>
Var reduce_sum(Graph<T> &g, Var x) {
    const auto &xv = g.value(x);
    T acc = T(0);
    for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
    return g.record(Tensor4<T>::scalar(acc), {x}, [x](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        auto &gx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[0];
    });
}

template <typename T>
Var add(Graph<T> &g, Var a, Var b) {
    const auto &av = g.value(a);
    const auto &bv = g.value(b);
    require_same_shape(av.shape(), bv.shape(), "add");
    Tensor4<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        for (Var v : {a, b}) {
            if (!gr.requires_grad(v)) continue;
            auto &gv = gr.grad_buffer(v);
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += gout[i];
        }
    });
}

template <typename T>
Var sub(Graph<T> &g, Var a, Var b) {
    const auto &av = g.value(a);
    const auto &bv = g.value(b);
    require_same_shape(av.shape(), bv.shape(), "sub");
    Tensor4<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        if (gr.requires_grad(a)) {
            auto &ga = gr.grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i];
        }
        if (gr.requires_grad(b)) {
            auto &gb = gr.grad_buffer(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gout[i];
        }
    });
}

/// Elementwise product of two differentiable tensors.
template <typename T>
Var mul(Graph<T> &g, Var a, Var b) {
    const auto &av = g.value(a);
    const auto &bv = g.value(b);
    require_same_shape(av.shape(), bv.shape(), "mul");
    Tensor4<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        const auto &av = gr.value(a);
        const auto &bv = gr.value(b);
        if (gr.requires_grad(a)) {
            auto &ga = gr.grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * bv[i];
        }
        if (gr.requires_grad(b)) {
            auto &gb = gr.grad_buffer(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i] * av[i];
        }
    });
}

/// a * x + b elementwise with constant scalars.
template <typename T>
Var affine(Graph<T> &g, Var x, T a, T b = T(0)) {
    const auto &xv = g.value(x);
    Tensor4<T> out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * xv[i] + b;
    return g.record(std::move(out), {x}, [x, a](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        auto &gx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += a * gout[i];
    });
}

/// Cuts the gradient path: the result is a constant copy of x.
template <typename T>
Var stop_gradient(Graph<T> &g, Var x) {
    return g.constant(g.value(x));
}

/// Copies batch items [first, first + count) into a new node.
template <typename T>
Var slice_batch(Graph<T> &g, Var x, int first, int count) {
    const Shape4 s = g.shape(x);
    if (first < 0 || count < 1 || first + count > s.n)
        throw Error(ErrorCode::InvalidArgument, "slice_batch out of range for " + s.str());
    Tensor4<T> out(Shape4{count, s.c, s.h, s.w});
    const auto &xv = g.value(x);
    std::copy_n(xv.plane(first, 0), out.size(), out.data());
    return g.record(std::move(out), {x}, [x, first](Graph<T> &gr, const Tensor4<T> &value, const Tensor4<T> &gout) {
        auto &gx = gr.grad_buffer(x);
        T *dst = gx.plane(first, 0);
        for (std::size_t i = 0; i < value.size(); ++i) dst[i] += gout[i];
    });
}

/// Selects channels [first, first + count).
template <typename T>
Var slice_channels(Graph<T> &g, Var x, int first, int count) {
    const Shape4 s = g.shape(x);
    if (first < 0 || count < 1 || first + count > s.c)
        throw Error(ErrorCode::InvalidArgument, "slice_channels out of range for " + s.str());
    Tensor4<T> out(Shape4{s.n, count, s.h, s.w});
    const auto &xv = g.value(x);
    for (int n = 0; n < s.n; ++n) std::copy_n(xv.plane(n, first), s.plane() * count, out.plane(n, 0));
    return g.record(std::move(out), {x}, [x, first, count](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        auto &gx = gr.grad_buffer(x);
        const Shape4 s = gx.shape();
        for (int n = 0; n < s.n; ++n) {
            const T *src = gout.plane(n, 0);
            T *dst = gx.plane(n, first);
            for (std::size_t i = 0; i < s.plane() * count; ++i) dst[i] += src[i];
        }
    });
}

}  // namespace duflow
