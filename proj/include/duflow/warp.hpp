#pragma once

// Differentiable inverse warping: out(y, x) = bilinear sample of the target at
// (x + u(y, x), y + v(y, x)).
//
// Border policy: the sampling coordinate is clamped to [0, W-1] x [0, H-1];
// pixels whose unclamped coordinate falls outside are flagged invalid and get
// zero gradient w.r.t. the flow along the clamped axis.
//
// Cell choice: a coordinate c is interpolated inside [ceil(c) - 1, ceil(c)]
// (clamped at 0), so an exact integer k > 0 uses the left/upper cell with
// weight 1 on k. Integer in-bounds flows therefore reproduce pixels exactly.

#include <algorithm>
#include <cmath>
#include <utility>

#include "duflow/error.hpp"
#include "duflow/graph.hpp"
#include "duflow/tensor.hpp"

namespace duflow {

namespace detail {

struct AxisTap {
    int i0;
    int i1;
    double w;      // weight of i1
    bool outside;  // unclamped coordinate left [0, size-1]
};

inline AxisTap axis_tap(double coord, int size) {
    const double hi = static_cast<double>(size - 1);
    AxisTap t{};
    t.outside = !(coord >= 0.0 && coord <= hi);
    const double c = std::clamp(coord, 0.0, hi);
    if (size == 1) return AxisTap{0, 0, 0.0, t.outside};
    t.i0 = std::max(static_cast<int>(std::ceil(c)) - 1, 0);
    t.i1 = t.i0 + 1;
    t.w = c - t.i0;
    return t;
}

}  // namespace detail

template <typename T>
struct WarpResult {
    Tensor4<T> warped;
    Tensor4<T> valid;  // (N, 1, H, W), 1 where the sample lies inside the image
};

/// Non-differentiable evaluation of the warp; used by the graph op and by
/// occlusion reasoning, which treats its inputs as constants.
template <typename T>
WarpResult<T> warp_values(const Tensor4<T> &target, const Tensor4<T> &flow) {
    const Shape4 ts = target.shape();
    const Shape4 fs = flow.shape();
    if (fs.c != 2 || fs.n != ts.n || fs.h != ts.h || fs.w != ts.w)
        throw Error(ErrorCode::ShapeMismatch, "warp target " + ts.str() + " vs flow " + fs.str());
    WarpResult<T> r{Tensor4<T>(ts), Tensor4<T>(Shape4{ts.n, 1, ts.h, ts.w})};
    for (int n = 0; n < ts.n; ++n) {
        const T *u = flow.plane(n, 0);
        const T *v = flow.plane(n, 1);
        T *valid = r.valid.plane(n, 0);
        for (int y = 0; y < ts.h; ++y)
            for (int x = 0; x < ts.w; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * ts.w + x;
                const auto tx = detail::axis_tap(x + static_cast<double>(u[p]), ts.w);
                const auto ty = detail::axis_tap(y + static_cast<double>(v[p]), ts.h);
                valid[p] = (tx.outside || ty.outside) ? T(0) : T(1);
                const T wx = static_cast<T>(tx.w);
                const T wy = static_cast<T>(ty.w);
                for (int c = 0; c < ts.c; ++c) {
                    const T *img = target.plane(n, c);
                    const T *r0 = img + static_cast<std::size_t>(ty.i0) * ts.w;
                    const T *r1 = img + static_cast<std::size_t>(ty.i1) * ts.w;
                    const T top = (T(1) - wx) * r0[tx.i0] + wx * r0[tx.i1];
                    const T bot = (T(1) - wx) * r1[tx.i0] + wx * r1[tx.i1];
                    r.warped.plane(n, c)[p] = (T(1) - wy) * top + wy * bot;
                }
            }
    }
    return r;
}

template <typename T>
struct WarpVar {
    Var warped;
    Tensor4<T> valid;
};

/// Inverse warp of `target` by `flow`, differentiable w.r.t. both.
template <typename T>
WarpVar<T> warp_image(Graph<T> &g, Var target, Var flow) {
    WarpResult<T> r = warp_values(g.value(target), g.value(flow));
    Var out = g.record(std::move(r.warped), {target, flow},
                       [target, flow](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
                           const auto &img = gr.value(target);
                           const auto &fl = gr.value(flow);
                           const Shape4 s = img.shape();
                           const bool need_img = gr.requires_grad(target);
                           const bool need_flow = gr.requires_grad(flow);
                           Tensor4<T> *gimg = need_img ? &gr.grad_buffer(target) : nullptr;
                           Tensor4<T> *gfl = need_flow ? &gr.grad_buffer(flow) : nullptr;
                           for (int n = 0; n < s.n; ++n) {
                               const T *u = fl.plane(n, 0);
                               const T *v = fl.plane(n, 1);
                               for (int y = 0; y < s.h; ++y)
                                   for (int x = 0; x < s.w; ++x) {
                                       const std::size_t p = static_cast<std::size_t>(y) * s.w + x;
                                       const auto tx = detail::axis_tap(x + static_cast<double>(u[p]), s.w);
                                       const auto ty = detail::axis_tap(y + static_cast<double>(v[p]), s.h);
                                       const T wx = static_cast<T>(tx.w);
                                       const T wy = static_cast<T>(ty.w);
                                       const std::size_t i00 = static_cast<std::size_t>(ty.i0) * s.w + tx.i0;
                                       const std::size_t i01 = static_cast<std::size_t>(ty.i0) * s.w + tx.i1;
                                       const std::size_t i10 = static_cast<std::size_t>(ty.i1) * s.w + tx.i0;
                                       const std::size_t i11 = static_cast<std::size_t>(ty.i1) * s.w + tx.i1;
                                       T du = T(0);
                                       T dv = T(0);
                                       for (int c = 0; c < s.c; ++c) {
                                           const T go = gout.plane(n, c)[p];
                                           if (go == T(0)) continue;
                                           if (gimg) {
                                               T *gi = gimg->plane(n, c);
                                               gi[i00] += (T(1) - wy) * (T(1) - wx) * go;
                                               gi[i01] += (T(1) - wy) * wx * go;
                                               gi[i10] += wy * (T(1) - wx) * go;
                                               gi[i11] += wy * wx * go;
                                           }
                                           if (gfl) {
                                               const T *im = img.plane(n, c);
                                               if (!tx.outside)
                                                   du += go * ((T(1) - wy) * (im[i01] - im[i00]) +
                                                               wy * (im[i11] - im[i10]));
                                               if (!ty.outside)
                                                   dv += go * ((T(1) - wx) * (im[i10] - im[i00]) +
                                                               wx * (im[i11] - im[i01]));
                                           }
                                       }
                                       if (gfl) {
                                           gfl->plane(n, 0)[p] += du;
                                           gfl->plane(n, 1)[p] += dv;
                                       }
                                   }
                           }
                       });
    return WarpVar<T>{out, std::move(r.valid)};
}

/// M^b sampled at p + M^f(p): the backward flow looked up where the forward
/// flow lands. Differentiable w.r.t. both fields.
template <typename T>
WarpVar<T> sample_flow_at_flow(Graph<T> &g, Var backward_flow, Var forward_flow) {
    if (g.shape(backward_flow).c != 2)
        throw Error(ErrorCode::ShapeMismatch, "sample_flow_at_flow expects a 2-channel field, got " +
                                                  g.shape(backward_flow).str());
    return warp_image(g, backward_flow, forward_flow);
}

template <typename T>
Tensor4<T> sample_flow_at_flow_values(const Tensor4<T> &backward_flow, const Tensor4<T> &forward_flow) {
    if (backward_flow.c() != 2)
        throw Error(ErrorCode::ShapeMismatch, "sample_flow_at_flow expects a 2-channel field, got " +
                                                  backward_flow.shape().str());
    return warp_values(backward_flow, forward_flow).warped;
}

}  // namespace duflow
