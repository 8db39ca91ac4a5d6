#pragma once

// Dilated, densely connected flow estimator. Two stride-2 layers bring the
// input to 1/4 resolution; every later group keeps that resolution and widens
// its view through dilation (2, 4, 2, 1) instead of pooling, and a single
// predictor emits the flow that is bilinearly upsampled back to full size.
// There are no deconvolutions and only one output scale.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "duflow/error.hpp"
#include "duflow/graph.hpp"
#include "duflow/ops.hpp"
#include "duflow/tensor.hpp"

namespace duflow {

struct LayerSpec {
    std::string name;
    int kernel = 3;
    int stride = 1;
    int dilation = 1;
    int out_channels = 1;
    bool takes_dense_input = false;  // input = every earlier feeds_dense output, resized
    bool takes_rgb_route = false;    // append the image pair resized to this resolution
    bool feeds_dense = false;        // output joins the dense pool
    bool activation = true;          // leaky rectifier after the conv
};

/// Channel counts are given at width 1.0 and scaled by `width_multiplier`
/// (rounded up, at least 1). The final layer is the flow predictor and is
/// never scaled.
struct NetworkConfig {
    double width_multiplier = 0.25;
    double leaky_slope = 0.1;
    bool zero_init_predictor = true;
    std::vector<LayerSpec> layers = default_layers();

    static std::vector<LayerSpec> default_layers() {
        return {
            {"conv1", 7, 2, 1, 64, false, false, true, true},
            {"conv2", 5, 2, 1, 128, false, false, true, true},
            {"conv3", 3, 1, 1, 256, true, true, false, true},
            {"conv3_1", 3, 1, 2, 256, false, false, true, true},
            {"conv4", 3, 1, 1, 512, true, true, false, true},
            {"conv4_1", 3, 1, 4, 512, false, false, true, true},
            {"conv5", 3, 1, 1, 512, true, true, false, true},
            {"conv5_1", 3, 1, 2, 512, false, false, true, true},
            {"conv6", 3, 1, 1, 512, true, true, false, true},
            {"conv6_1", 3, 1, 1, 256, false, false, true, true},
            {"predict_flow", 3, 1, 1, 2, true, true, false, false},
        };
    }
};

inline int scaled_channels(int channels, double multiplier) {
    const int c = static_cast<int>(std::ceil(channels * multiplier - 1e-9));
    return c < 1 ? 1 : c;
}

/// Name and shape of every learnable tensor; the single counter used for all
/// parameter-count comparisons.
struct ParameterShape {
    std::string name;
    Shape4 shape;
};

inline std::size_t count_parameters(std::span<const ParameterShape> registry) {
    std::size_t total = 0;
    for (const auto &p : registry) total += p.shape.size();
    return total;
}

template <typename T>
struct Layer {
    LayerSpec spec;
    int in_channels = 0;
    Parameter<T> weight;
    Parameter<T> bias;
};

template <typename T>
class FlowNetwork {
   public:
    FlowNetwork() = default;

    const NetworkConfig &config() const { return config_; }
    std::vector<Layer<T>> &layers() { return layers_; }
    const std::vector<Layer<T>> &layers() const { return layers_; }

    /// Product of all layer strides (4 for the default table).
    int total_stride() const {
        int s = 1;
        for (const auto &l : layers_) s *= l.spec.stride;
        return s;
    }

    std::vector<Parameter<T> *> parameters() {
        std::vector<Parameter<T> *> out;
        for (auto &l : layers_) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        return out;
    }
    std::vector<const Parameter<T> *> parameters() const {
        std::vector<const Parameter<T> *> out;
        for (const auto &l : layers_) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        return out;
    }

    std::vector<ParameterShape> registry() const {
        std::vector<ParameterShape> out;
        for (const auto *p : parameters()) out.push_back({p->name, p->value.shape()});
        return out;
    }

    std::size_t parameter_count() const {
        const auto reg = registry();
        return count_parameters(reg);
    }

    void zero_grad() {
        for (auto *p : parameters()) p->zero_grad();
    }

    template <typename U>
    FlowNetwork<U> cast() const {
        FlowNetwork<U> out;
        out.config_ = config_;
        for (const auto &l : layers_) {
            Layer<U> c;
            c.spec = l.spec;
            c.in_channels = l.in_channels;
            c.weight = Parameter<U>(l.weight.name, l.weight.value.template cast<U>());
            c.bias = Parameter<U>(l.bias.name, l.bias.value.template cast<U>());
            out.layers_.push_back(std::move(c));
        }
        return out;
    }

   private:
    template <typename>
    friend class FlowNetwork;
    template <typename U>
    friend FlowNetwork<U> build_network(const NetworkConfig &config, std::uint64_t seed);

    NetworkConfig config_;
    std::vector<Layer<T>> layers_;
};

namespace detail {

/// Uniform in [0, 1) from the top 53 bits; identical on every platform.
inline double unit_uniform(std::mt19937_64 &rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline void validate_layers(const std::vector<LayerSpec> &layers) {
    if (layers.empty()) throw Error(ErrorCode::InvalidArgument, "network needs at least one layer");
    for (const auto &l : layers) {
        if (l.kernel < 1 || l.kernel % 2 == 0)
            throw Error(ErrorCode::InvalidArgument, "layer " + l.name + ": kernel must be odd");
        if (l.stride < 1 || l.dilation < 1 || l.out_channels < 1)
            throw Error(ErrorCode::InvalidArgument, "layer " + l.name + ": stride, dilation, channels must be >= 1");
    }
    if (layers.back().out_channels != 2)
        throw Error(ErrorCode::InvalidArgument, "the last layer must predict 2 flow channels");
}

}  // namespace detail

/// Builds the network with fan-in scaled uniform weights (He bound for the
/// leaky slope), zero biases and, by default, a zero predictor.
template <typename T>
FlowNetwork<T> build_network(const NetworkConfig &config, std::uint64_t seed) {
    if (!(config.width_multiplier > 0.0 && config.width_multiplier <= 1.0))
        throw Error(ErrorCode::InvalidArgument, "width_multiplier must be in (0, 1]");
    detail::validate_layers(config.layers);
    FlowNetwork<T> net;
    net.config_ = config;
    std::mt19937_64 rng(seed);

    constexpr int kInputChannels = 6;
    int dense_pool = 0;
    int previous = kInputChannels;
    const std::size_t last = config.layers.size() - 1;
    for (std::size_t i = 0; i < config.layers.size(); ++i) {
        const LayerSpec &spec = config.layers[i];
        Layer<T> layer;
        layer.spec = spec;
        if (i != last) layer.spec.out_channels = scaled_channels(spec.out_channels, config.width_multiplier);
        int in = (spec.takes_dense_input && i > 0) ? dense_pool : previous;
        if (spec.takes_rgb_route && i > 0) in += kInputChannels;
        layer.in_channels = in;
        const int out = layer.spec.out_channels;
        Tensor4<T> w(Shape4{out, in, spec.kernel, spec.kernel});
        const bool zero = (i == last) && config.zero_init_predictor;
        const double fan_in = static_cast<double>(in) * spec.kernel * spec.kernel;
        const double bound = std::sqrt(6.0 / ((1.0 + config.leaky_slope * config.leaky_slope) * fan_in));
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double u = detail::unit_uniform(rng);
            w[k] = zero ? T(0) : static_cast<T>((2.0 * u - 1.0) * bound);
        }
        layer.weight = Parameter<T>(spec.name + ".weight", std::move(w));
        layer.bias = Parameter<T>(spec.name + ".bias", Tensor4<T>(Shape4{1, out, 1, 1}));
        if (spec.feeds_dense) dense_pool += out;
        previous = out;
        net.layers_.push_back(std::move(layer));
    }
    return net;
}

template <typename T>
struct FlowOutput {
    Var coarse;  // (N, 2, H/stride, W/stride), full-resolution pixel units
    Var flow;    // (N, 2, H, W)
};

/// Runs the estimator on stacked frames. Images are expected in [0, 1] and
/// are centered by subtracting 0.5 before the first layer.
template <typename T>
FlowOutput<T> forward(Graph<T> &g, FlowNetwork<T> &net, Var frame1, Var frame2) {
    require_same_shape(g.shape(frame1), g.shape(frame2), "forward frames");
    const Shape4 s = g.shape(frame1);
    if (s.c != 3) throw Error(ErrorCode::ShapeMismatch, "forward expects RGB frames, got " + s.str());
    const int stride = net.total_stride();
    if (s.h % stride != 0 || s.w % stride != 0)
        throw Error(ErrorCode::IndivisibleDims, "input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                                                    " is not divisible by " + std::to_string(stride) +
                                                    "; pad the frames to a multiple of " + std::to_string(stride));
    const T slope = static_cast<T>(net.config().leaky_slope);
    Var input = affine(g, concat_channels(g, {frame1, frame2}), T(1), T(-0.5));

    std::vector<Var> pool;
    Var previous = input;
    auto &layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto &layer = layers[i];
        const Shape4 ps = g.shape(previous);
        std::vector<Var> parts;
        if (layer.spec.takes_dense_input && i > 0) {
            for (Var v : pool) parts.push_back(resize_bilinear(g, v, ps.h, ps.w));
        } else {
            parts.push_back(previous);
        }
        if (layer.spec.takes_rgb_route && i > 0) parts.push_back(resize_bilinear(g, input, ps.h, ps.w));
        Var x = parts.size() == 1 ? parts.front() : concat_channels(g, std::span<const Var>(parts));
        Var y = conv2d(g, x, g.parameter(layer.weight), g.parameter(layer.bias),
                       ConvSpec::same(layer.spec.kernel, layer.spec.dilation, layer.spec.stride));
        if (layer.spec.activation) y = leaky_relu(g, y, slope);
        if (layer.spec.feeds_dense) pool.push_back(y);
        previous = y;
    }
    Var flow = resize_bilinear(g, previous, s.h, s.w);
    return FlowOutput<T>{previous, flow};
}

/// Support of one output unit: input pixels with nonzero gradient of the
/// coarse output at (out_y, out_x) when every weight is positive, so no path
/// can cancel another. Returns an (1, 1, H, W) 0/1 map.
template <typename T>
Tensor4<std::uint8_t> receptive_field_mask(const FlowNetwork<T> &net, int in_h, int in_w, int out_y, int out_x) {
    FlowNetwork<double> probe = net.template cast<double>();
    for (auto *p : probe.parameters()) {
        if (p->name.ends_with(".bias")) {
            p->value.fill(0.0);
        } else {
            const double k = 1.0 / static_cast<double>(p->value.size() / p->value.n());
            p->value.fill(k);
        }
    }
    Graph<double> g;
    Var f1 = g.variable(Tensor4<double>(Shape4{1, 3, in_h, in_w}, 1.0));
    Var f2 = g.variable(Tensor4<double>(Shape4{1, 3, in_h, in_w}, 1.0));
    FlowOutput<double> out = forward(g, probe, f1, f2);
    const Shape4 cs = g.shape(out.coarse);
    if (out_y < 0 || out_y >= cs.h || out_x < 0 || out_x >= cs.w)
        throw Error(ErrorCode::InvalidArgument, "receptive_field_mask: output pixel outside " + cs.str());
    Tensor4<double> pick(cs);
    pick.at(0, 0, out_y, out_x) = 1.0;
    Var picked = reduce_sum(g, mul(g, out.coarse, g.constant(pick)));
    g.backward(picked);
    Tensor4<std::uint8_t> mask(Shape4{1, 1, in_h, in_w});
    for (Var f : {f1, f2}) {
        const auto &gr = g.grad(f);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < in_h; ++y)
                for (int x = 0; x < in_w; ++x)
                    if (gr.at(0, c, y, x) != 0.0) mask.at(0, 0, y, x) = 1;
    }
    return mask;
}

/// Same probe for a plain chain of single-channel stride-1 convolutions with
/// the given dilations (same padding, no activation).
inline Tensor4<std::uint8_t> receptive_field_mask(std::span<const int> dilations, int kernel, int in_h, int in_w,
                                                  int out_y, int out_x) {
    Graph<double> g;
    Var x = g.variable(Tensor4<double>(Shape4{1, 1, in_h, in_w}, 1.0));
    Var y = x;
    for (int d : dilations) {
        Var w = g.constant(Tensor4<double>(Shape4{1, 1, kernel, kernel}, 1.0 / (kernel * kernel)));
        y = conv2d(g, y, w, Var{}, ConvSpec::same(kernel, d));
    }
    const Shape4 ys = g.shape(y);
    if (out_y < 0 || out_y >= ys.h || out_x < 0 || out_x >= ys.w)
        throw Error(ErrorCode::InvalidArgument, "receptive_field_mask: output pixel outside " + ys.str());
    Tensor4<double> pick(ys);
    pick.at(0, 0, out_y, out_x) = 1.0;
    g.backward(reduce_sum(g, mul(g, y, g.constant(pick))));
    Tensor4<std::uint8_t> mask(Shape4{1, 1, in_h, in_w});
    const auto &gr = g.grad(x);
    for (std::size_t i = 0; i < gr.size(); ++i) mask[i] = gr[i] != 0.0 ? 1 : 0;
    return mask;
}

/// Parameter registry of a FlowNetS-shaped network (encoder conv1..conv6_1,
/// four deconvolutions, five flow predictors and four flow upsamplers) at the
/// same width multiplier. Used only as the reference for size comparisons.
inline std::vector<ParameterShape> flownets_reference_registry(double width_multiplier) {
    auto c = [&](int ch) { return scaled_channels(ch, width_multiplier); };
    std::vector<ParameterShape> reg;
    auto conv = [&](const std::string &name, int in, int out, int k, bool bias = true) {
        reg.push_back({name + ".weight", Shape4{out, in, k, k}});
        if (bias) reg.push_back({name + ".bias", Shape4{1, out, 1, 1}});
    };
    conv("conv1", 6, c(64), 7);
    conv("conv2", c(64), c(128), 5);
    conv("conv3", c(128), c(256), 5);
    conv("conv3_1", c(256), c(256), 3);
    conv("conv4", c(256), c(512), 3);
    conv("conv4_1", c(512), c(512), 3);
    conv("conv5", c(512), c(512), 3);
    conv("conv5_1", c(512), c(512), 3);
    conv("conv6", c(512), c(1024), 3);
    conv("conv6_1", c(1024), c(1024), 3);
    conv("predict_flow6", c(1024), 2, 3);
    conv("deconv5", c(1024), c(512), 4);
    const int in5 = c(512) + c(512) + 2;
    conv("predict_flow5", in5, 2, 3);
    conv("upsample_flow5", 2, 2, 4, false);
    conv("deconv4", in5, c(256), 4);
    const int in4 = c(512) + c(256) + 2;
    conv("predict_flow4", in4, 2, 3);
    conv("upsample_flow4", 2, 2, 4, false);
    conv("deconv3", in4, c(128), 4);
    const int in3 = c(256) + c(128) + 2;
    conv("predict_flow3", in3, 2, 3);
    conv("upsample_flow3", 2, 2, 4, false);
    conv("deconv2", in3, c(64), 4);
    const int in2 = c(128) + c(64) + 2;
    conv("predict_flow2", in2, 2, 3);
    conv("upsample_flow2", 2, 2, 4, false);
    return reg;
}

}  // namespace duflow
