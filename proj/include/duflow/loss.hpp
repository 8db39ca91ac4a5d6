#pragma once

// Training objectives: soft ternary census photometric cost under a
// generalized Charbonnier penalty, forward-backward occlusion flags,
// occlusion-aware reconstruction, second-order smoothness and the
// forward-backward consistency penalty.

#include <cmath>
#include <string>
#include <vector>

#include "duflow/error.hpp"
#include "duflow/graph.hpp"
#include "duflow/ops.hpp"
#include "duflow/tensor.hpp"
#include "duflow/warp.hpp"

namespace duflow {

struct CharbonnierParams {
    double alpha = 0.45;
    double eps = 1e-3;
};

struct CensusParams {
    int patch_radius = 3;
    double soft_sigma = 0.81;
    double dist_eps = 0.1;
};

struct OcclusionParams {
    double alpha1 = 0.01;
    double alpha2 = 0.5;
};

struct LossWeights {
    double data = 1.0;
    double smooth = 3.0;
    double fb = 0.2;
};

struct LossParams {
    CharbonnierParams charbonnier;
    CensusParams census;
    OcclusionParams occlusion;
};

struct LossReport {
    double total = 0.0;
    double data_f = 0.0;
    double data_b = 0.0;
    double smooth = 0.0;
    double fb = 0.0;
    double occluded_fraction_f = 0.0;
    double occluded_fraction_b = 0.0;
    bool empty_mask_warning = false;
};

/// o_f / o_b: 1 = occluded. Shapes (N, 1, H, W). Plain values, never on the tape.
template <typename T>
struct OcclusionMask {
    Tensor4<T> forward;
    Tensor4<T> backward;
};

inline void validate(const CharbonnierParams &p) {
    if (!(p.alpha > 0.0 && p.alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "charbonnier alpha must be in (0,1]");
    if (!(p.eps >= 0.0)) throw Error(ErrorCode::InvalidArgument, "charbonnier eps must be >= 0");
}

inline void validate(const CensusParams &p) {
    if (p.patch_radius < 1) throw Error(ErrorCode::InvalidArgument, "census patch_radius must be >= 1");
    if (!(p.soft_sigma > 0.0) || !(p.dist_eps > 0.0))
        throw Error(ErrorCode::InvalidArgument, "census soft_sigma and dist_eps must be > 0");
}

inline void validate(const OcclusionParams &p) {
    if (!(p.alpha1 > 0.0) || !(p.alpha2 > 0.0))
        throw Error(ErrorCode::InvalidArgument, "occlusion alpha1 and alpha2 must be > 0");
}

inline void validate(const LossWeights &w) {
    if (w.data < 0.0 || w.smooth < 0.0 || w.fb < 0.0)
        throw Error(ErrorCode::InvalidArgument, "loss weights must be >= 0");
}

/// rho(x) = (x^2 + eps^2)^alpha
inline double charbonnier_value(double x, const CharbonnierParams &p) {
    return std::pow(x * x + p.eps * p.eps, p.alpha);
}

template <typename T>
Var charbonnier(Graph<T> &g, Var x, const CharbonnierParams &p) {
    validate(p);
    const auto &xv = g.value(x);
    const T a = static_cast<T>(p.alpha);
    const T e2 = static_cast<T>(p.eps * p.eps);
    Tensor4<T> out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(xv[i] * xv[i] + e2, a);
    return g.record(std::move(out), {x}, [x, a, e2](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        const auto &xv = gr.value(x);
        auto &gx = gr.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i)
            gx[i] += gout[i] * T(2) * a * xv[i] * std::pow(xv[i] * xv[i] + e2, a - T(1));
    });
}

/// rho applied to the per-pixel vector norm: (sum_c x_c^2 + eps^2)^alpha -> (N, 1, H, W).
template <typename T>
Var vector_charbonnier(Graph<T> &g, Var x, const CharbonnierParams &p) {
    validate(p);
    const auto &xv = g.value(x);
    const Shape4 s = xv.shape();
    const T a = static_cast<T>(p.alpha);
    const T e2 = static_cast<T>(p.eps * p.eps);
    Tensor4<T> out(Shape4{s.n, 1, s.h, s.w});
    for (int n = 0; n < s.n; ++n)
        for (std::size_t q = 0; q < s.plane(); ++q) {
            T sq = T(0);
            for (int c = 0; c < s.c; ++c) sq += xv.plane(n, c)[q] * xv.plane(n, c)[q];
            out.plane(n, 0)[q] = std::pow(sq + e2, a);
        }
    return g.record(std::move(out), {x}, [x, a, e2](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        const auto &xv = gr.value(x);
        const Shape4 s = xv.shape();
        auto &gx = gr.grad_buffer(x);
        for (int n = 0; n < s.n; ++n)
            for (std::size_t q = 0; q < s.plane(); ++q) {
                T sq = T(0);
                for (int c = 0; c < s.c; ++c) sq += xv.plane(n, c)[q] * xv.plane(n, c)[q];
                const T k = gout.plane(n, 0)[q] * T(2) * a * std::pow(sq + e2, a - T(1));
                for (int c = 0; c < s.c; ++c) gx.plane(n, c)[q] += k * xv.plane(n, c)[q];
            }
    });
}

/// Luma with fixed weights 0.299 / 0.587 / 0.114. Single-channel input passes through.
template <typename T>
Var rgb_to_gray(Graph<T> &g, Var rgb) {
    const Shape4 s = g.shape(rgb);
    if (s.c == 1) return rgb;
    if (s.c != 3) throw Error(ErrorCode::ShapeMismatch, "rgb_to_gray expects 1 or 3 channels, got " + s.str());
    static constexpr double kW[3] = {0.299, 0.587, 0.114};
    const auto &xv = g.value(rgb);
    Tensor4<T> out(Shape4{s.n, 1, s.h, s.w});
    for (int n = 0; n < s.n; ++n)
        for (std::size_t q = 0; q < s.plane(); ++q) {
            T acc = T(0);
            for (int c = 0; c < 3; ++c) acc += static_cast<T>(kW[c]) * xv.plane(n, c)[q];
            out.plane(n, 0)[q] = acc;
        }
    return g.record(std::move(out), {rgb}, [rgb](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        auto &gx = gr.grad_buffer(rgb);
        const Shape4 s = gx.shape();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < 3; ++c) {
                T *dst = gx.plane(n, c);
                const T *src = gout.plane(n, 0);
                for (std::size_t q = 0; q < s.plane(); ++q) dst[q] += static_cast<T>(kW[c]) * src[q];
            }
    });
}

/// Soft ternary census. For every neighbor offset k of the (2r+1)^2 patch
/// (row-major, center included), e_k(p) = d / sqrt(sigma^2 + d^2) with
/// d = I(p + k) - I(p); neighbors outside the image are read clamped.
/// Input (N, 1, H, W) intensity, output (N, (2r+1)^2, H, W).
template <typename T>
Var census_descriptor(Graph<T> &g, Var gray, const CensusParams &p) {
    validate(p);
    const Shape4 s = g.shape(gray);
    if (s.c != 1) throw Error(ErrorCode::ShapeMismatch, "census_descriptor expects one channel, got " + s.str());
    const int r = p.patch_radius;
    const int side = 2 * r + 1;
    const T s2 = static_cast<T>(p.soft_sigma * p.soft_sigma);
    const auto &img = g.value(gray);
    Tensor4<T> out(Shape4{s.n, side * side, s.h, s.w});
    for (int n = 0; n < s.n; ++n) {
        const T *src = img.plane(n, 0);
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                T *dst = out.plane(n, (dy + r) * side + (dx + r));
                for (int y = 0; y < s.h; ++y) {
                    const int yy = std::clamp(y + dy, 0, s.h - 1);
                    for (int x = 0; x < s.w; ++x) {
                        const int xx = std::clamp(x + dx, 0, s.w - 1);
                        const T d = src[static_cast<std::size_t>(yy) * s.w + xx] - src[static_cast<std::size_t>(y) * s.w + x];
                        dst[static_cast<std::size_t>(y) * s.w + x] = d / std::sqrt(s2 + d * d);
                    }
                }
            }
    }
    return g.record(std::move(out), {gray}, [gray, r, side, s2](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
        const auto &img = gr.value(gray);
        const Shape4 s = img.shape();
        auto &gx = gr.grad_buffer(gray);
        for (int n = 0; n < s.n; ++n) {
            const T *src = img.plane(n, 0);
            T *gi = gx.plane(n, 0);
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    const T *go = gout.plane(n, (dy + r) * side + (dx + r));
                    for (int y = 0; y < s.h; ++y) {
                        const int yy = std::clamp(y + dy, 0, s.h - 1);
                        for (int x = 0; x < s.w; ++x) {
                            const int xx = std::clamp(x + dx, 0, s.w - 1);
                            const std::size_t pc = static_cast<std::size_t>(y) * s.w + x;
                            const std::size_t pn = static_cast<std::size_t>(yy) * s.w + xx;
                            const T d = src[pn] - src[pc];
                            const T q = s2 + d * d;
                            const T de = go[pc] * s2 / (q * std::sqrt(q));
                            gi[pn] += de;
                            gi[pc] -= de;
                        }
                    }
                }
        }
    });
}

/// cost(p) = sum_k q^2 / (dist_eps + q^2) with q = e1_k(p) - e2_k(p); (N, 1, H, W).
template <typename T>
Var census_cost(Graph<T> &g, Var desc1, Var desc2, const CensusParams &p) {
    validate(p);
    require_same_shape(g.shape(desc1), g.shape(desc2), "census_cost descriptors");
    const Shape4 s = g.shape(desc1);
    const T eps = static_cast<T>(p.dist_eps);
    const auto &a = g.value(desc1);
    const auto &b = g.value(desc2);
    Tensor4<T> out(Shape4{s.n, 1, s.h, s.w});
    for (int n = 0; n < s.n; ++n) {
        T *dst = out.plane(n, 0);
        for (int k = 0; k < s.c; ++k) {
            const T *pa = a.plane(n, k);
            const T *pb = b.plane(n, k);
            for (std::size_t q = 0; q < s.plane(); ++q) {
                const T d = pa[q] - pb[q];
                dst[q] += d * d / (eps + d * d);
            }
        }
    }
    return g.record(std::move(out), {desc1, desc2},
                    [desc1, desc2, eps](Graph<T> &gr, const Tensor4<T> &, const Tensor4<T> &gout) {
                        const auto &a = gr.value(desc1);
                        const auto &b = gr.value(desc2);
                        const Shape4 s = a.shape();
                        Tensor4<T> *ga = gr.requires_grad(desc1) ? &gr.grad_buffer(desc1) : nullptr;
                        Tensor4<T> *gb = gr.requires_grad(desc2) ? &gr.grad_buffer(desc2) : nullptr;
                        for (int n = 0; n < s.n; ++n) {
                            const T *go = gout.plane(n, 0);
                            for (int k = 0; k < s.c; ++k) {
                                const T *pa = a.plane(n, k);
                                const T *pb = b.plane(n, k);
                                for (std::size_t q = 0; q < s.plane(); ++q) {
                                    const T d = pa[q] - pb[q];
                                    const T den = eps + d * d;
                                    const T dd = go[q] * T(2) * d * eps / (den * den);
                                    if (ga) ga->plane(n, k)[q] += dd;
                                    if (gb) gb->plane(n, k)[q] -= dd;
                                }
                            }
                        }
                    });
}

/// Second differences f(p-1) - 2 f(p) + f(p+1) along x (axis 1) or y (axis 0)
/// at interior positions only.
template <typename T>
Var second_difference(Graph<T> &g, Var f, int axis) {
    const Shape4 s = g.shape(f);
    const bool along_x = axis == 1;
    if ((along_x && s.w < 3) || (!along_x && s.h < 3))
        throw Error(ErrorCode::InvalidShape, "second_difference needs >= 3 samples along the axis, got " + s.str());
    const Shape4 os = along_x ? Shape4{s.n, s.c, s.h, s.w - 2} : Shape4{s.n, s.c, s.h - 2, s.w};
    const auto &fv = g.value(f);
    Tensor4<T> out(os);
    const std::size_t step = along_x ? 1 : static_cast<std::size_t>(s.w);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < os.h; ++y)
                for (int x = 0; x < os.w; ++x) {
                    const std::size_t center = along_x ? fv.index(n, c, y, x + 1) : fv.index(n, c, y + 1, x);
                    out.at(n, c, y, x) = fv[center - step] - T(2) * fv[center] + fv[center + step];
                }
    return g.record(std::move(out), {f}, [f, along_x, step](Graph<T> &gr, const Tensor4<T> &value, const Tensor4<T> &gout) {
        const Shape4 os = value.shape();
        auto &gf = gr.grad_buffer(f);
        for (int n = 0; n < os.n; ++n)
            for (int c = 0; c < os.c; ++c)
                for (int y = 0; y < os.h; ++y)
                    for (int x = 0; x < os.w; ++x) {
                        const std::size_t center = along_x ? gf.index(n, c, y, x + 1) : gf.index(n, c, y + 1, x);
                        const T go = gout.at(n, c, y, x);
                        gf[center - step] += go;
                        gf[center] -= T(2) * go;
                        gf[center + step] += go;
                    }
    });
}

template <typename T>
struct MaskedLoss {
    Var loss;
    bool empty = false;  // include mask was all zero; loss is the constant 0
};

/// Mean over included pixels of rho(census_cost(I1, I1_warped)).
/// Returns a constant 0 with `empty` set when nothing is included.
template <typename T>
MaskedLoss<T> reconstruction_loss(Graph<T> &g, Var frame1, Var frame1_warped, const Tensor4<T> &include_mask,
                                  const CharbonnierParams &charb, const CensusParams &census) {
    require_same_shape(g.shape(frame1), g.shape(frame1_warped), "reconstruction_loss frames");
    const Shape4 s = g.shape(frame1);
    require_same_shape(include_mask.shape(), Shape4{s.n, 1, s.h, s.w}, "reconstruction_loss mask");
    double msum = 0.0;
    for (std::size_t i = 0; i < include_mask.size(); ++i) msum += include_mask[i];
    if (msum <= 0.0) return MaskedLoss<T>{g.constant(Tensor4<T>::scalar(T(0))), true};
    Var d1 = census_descriptor(g, rgb_to_gray(g, frame1), census);
    Var d2 = census_descriptor(g, rgb_to_gray(g, frame1_warped), census);
    Var rho = charbonnier(g, census_cost(g, d1, d2, census), charb);
    return MaskedLoss<T>{reduce_mean(g, rho, include_mask), false};
}

/// Forward-backward check: o_f(p) = 1 unless
/// |Mf + Mb(p + Mf)|^2 < alpha1 (|Mf|^2 + |Mb(p + Mf)|^2) + alpha2; o_b swaps roles.
template <typename T>
OcclusionMask<T> occlusion_masks(const Tensor4<T> &mf, const Tensor4<T> &mb, const OcclusionParams &p) {
    validate(p);
    require_same_shape(mf.shape(), mb.shape(), "occlusion_masks flows");
    if (mf.c() != 2) throw Error(ErrorCode::ShapeMismatch, "occlusion_masks expects 2-channel flows, got " + mf.shape().str());
    auto flags = [&p](const Tensor4<T> &a, const Tensor4<T> &b) {
        const Tensor4<T> bs = sample_flow_at_flow_values(b, a);
        const Shape4 s = a.shape();
        Tensor4<T> o(Shape4{s.n, 1, s.h, s.w});
        for (int n = 0; n < s.n; ++n)
            for (std::size_t q = 0; q < s.plane(); ++q) {
                const double au = a.plane(n, 0)[q], av = a.plane(n, 1)[q];
                const double bu = bs.plane(n, 0)[q], bv = bs.plane(n, 1)[q];
                const double lhs = (au + bu) * (au + bu) + (av + bv) * (av + bv);
                const double rhs = p.alpha1 * (au * au + av * av + bu * bu + bv * bv) + p.alpha2;
                o.plane(n, 0)[q] = lhs < rhs ? T(0) : T(1);
            }
        return o;
    };
    return OcclusionMask<T>{flags(mf, mb), flags(mb, mf)};
}

template <typename T>
OcclusionMask<T> no_occlusion(const Shape4 &flow_shape) {
    const Shape4 s{flow_shape.n, 1, flow_shape.h, flow_shape.w};
    return OcclusionMask<T>{Tensor4<T>(s), Tensor4<T>(s)};
}

template <typename T>
double mask_mean(const Tensor4<T> &m) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) acc += m[i];
    return acc / static_cast<double>(m.size());
}

template <typename T>
struct DataLoss {
    MaskedLoss<T> forward;
    MaskedLoss<T> backward;
};

/// data_f compares I1 with I2 warped by Mf over (1 - o_f) * valid_f; data_b
/// compares I2 with I1 warped by Mb over (1 - o_b) * valid_b.
template <typename T>
DataLoss<T> occlusion_aware_data_loss(Graph<T> &g, Var frame1, Var frame2, Var mf, Var mb,
                                      const OcclusionMask<T> &masks, const LossParams &params) {
    auto one_way = [&](Var first, Var second, Var flow, const Tensor4<T> &occ) {
        WarpVar<T> w = warp_image(g, second, flow);
        Tensor4<T> include(w.valid.shape());
        require_same_shape(occ.shape(), include.shape(), "occlusion mask");
        for (std::size_t i = 0; i < include.size(); ++i) include[i] = (T(1) - occ[i]) * w.valid[i];
        return reconstruction_loss(g, first, w.warped, include, params.charbonnier, params.census);
    };
    return DataLoss<T>{one_way(frame1, frame2, mf, masks.forward), one_way(frame2, frame1, mb, masks.backward)};
}

/// Mean of rho over all interior second differences, both axes and both components.
template <typename T>
Var smoothness_loss(Graph<T> &g, Var flow, const CharbonnierParams &charb) {
    const Shape4 s = g.shape(flow);
    if (s.h < 3 || s.w < 3) throw Error(ErrorCode::InvalidShape, "smoothness_loss needs H, W >= 3, got " + s.str());
    Var rx = charbonnier(g, second_difference(g, flow, 1), charb);
    Var ry = charbonnier(g, second_difference(g, flow, 0), charb);
    const double count = static_cast<double>(g.value(rx).size() + g.value(ry).size());
    return affine(g, add(g, reduce_sum(g, rx), reduce_sum(g, ry)), static_cast<T>(1.0 / count));
}

/// Half the sum of the two directional means of rho(|Mf + Mb(p + Mf)|) over
/// non-occluded pixels (and symmetrically for Mb), so exactly inverse fields
/// score rho(0). Gradients flow through both the sampled values and the
/// sampling coordinates.
template <typename T>
MaskedLoss<T> fb_consistency_loss(Graph<T> &g, Var mf, Var mb, const OcclusionMask<T> &masks,
                                  const CharbonnierParams &charb) {
    bool empty = false;
    auto one_way = [&](Var a, Var b, const Tensor4<T> &occ) {
        Tensor4<T> include(occ.shape());
        double msum = 0.0;
        for (std::size_t i = 0; i < include.size(); ++i) {
            include[i] = T(1) - occ[i];
            msum += include[i];
        }
        if (msum <= 0.0) {
            empty = true;
            return g.constant(Tensor4<T>::scalar(T(0)));
        }
        WarpVar<T> bs = sample_flow_at_flow(g, b, a);
        Var rho = vector_charbonnier(g, add(g, a, bs.warped), charb);
        return reduce_mean(g, rho, include);
    };
    Var f = one_way(mf, mb, masks.forward);
    Var b = one_way(mb, mf, masks.backward);
    return MaskedLoss<T>{affine(g, add(g, f, b), T(0.5)), empty};
}

template <typename T>
struct TotalLoss {
    Var total;
    LossReport report;
};

/// w_data (data_f + data_b) + w_smooth (smooth(Mf) + smooth(Mb)) / 2 + w_fb fb,
/// with the occlusion masks supplied by the caller.
template <typename T>
TotalLoss<T> total_loss_with_masks(Graph<T> &g, Var frame1, Var frame2, Var mf, Var mb, const OcclusionMask<T> &masks,
                                   const LossWeights &weights, const LossParams &params) {
    validate(weights);
    require_same_shape(g.shape(mf), g.shape(mb), "total_loss flows");
    DataLoss<T> data = occlusion_aware_data_loss(g, frame1, frame2, mf, mb, masks, params);
    Var smooth = affine(g, add(g, smoothness_loss(g, mf, params.charbonnier), smoothness_loss(g, mb, params.charbonnier)),
                        T(0.5));
    MaskedLoss<T> fb = fb_consistency_loss(g, mf, mb, masks, params.charbonnier);

    Var data_sum = affine(g, add(g, data.forward.loss, data.backward.loss), static_cast<T>(weights.data));
    Var total = add(g, add(g, data_sum, affine(g, smooth, static_cast<T>(weights.smooth))),
                    affine(g, fb.loss, static_cast<T>(weights.fb)));

    LossReport r;
    r.total = g.value(total).item();
    r.data_f = g.value(data.forward.loss).item();
    r.data_b = g.value(data.backward.loss).item();
    r.smooth = g.value(smooth).item();
    r.fb = g.value(fb.loss).item();
    r.occluded_fraction_f = mask_mean(masks.forward);
    r.occluded_fraction_b = mask_mean(masks.backward);
    r.empty_mask_warning = data.forward.empty || data.backward.empty || fb.empty;
    return TotalLoss<T>{total, r};
}

/// Masks from the forward-backward check on the current flows; with
/// occlusion disabled every pixel counts as visible.
template <typename T>
OcclusionMask<T> loss_masks(Graph<T> &g, Var mf, Var mb, const LossParams &params, bool occlusion_enabled) {
    validate(params.occlusion);
    require_same_shape(g.shape(mf), g.shape(mb), "total_loss flows");
    return occlusion_enabled ? occlusion_masks(g.value(mf), g.value(mb), params.occlusion)
                             : no_occlusion<T>(g.shape(mf));
}

template <typename T>
TotalLoss<T> total_loss(Graph<T> &g, Var frame1, Var frame2, Var mf, Var mb, const LossWeights &weights,
                        const LossParams &params, bool occlusion_enabled) {
    const OcclusionMask<T> masks = loss_masks(g, mf, mb, params, occlusion_enabled);
    return total_loss_with_masks(g, frame1, frame2, mf, mb, masks, weights, params);
}

}  // namespace duflow
