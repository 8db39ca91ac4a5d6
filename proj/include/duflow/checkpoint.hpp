#pragma once

// Checkpoint container: "DUF1", then little-endian u32 entry count and per
// entry u16 name length, name bytes, u8 rank, u32 dims[rank] and raw float32
// values. Network layout, weights and optimizer state are all stored as
// named entries.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "duflow/error.hpp"
#include "duflow/flow_io.hpp"
#include "duflow/network.hpp"
#include "duflow/tensor.hpp"

namespace duflow {

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    std::size_t count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

inline std::string encode_checkpoint(std::span<const NamedTensor> entries) {
    std::string out = "DUF1";
    detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto &e : entries) {
        if (e.name.size() > 0xFFFF) throw Error(ErrorCode::InvalidArgument, "checkpoint entry name too long");
        if (e.dims.size() > 0xFF) throw Error(ErrorCode::InvalidArgument, "checkpoint entry rank too large");
        if (e.count() != e.data.size())
            throw Error(ErrorCode::ShapeMismatch, "checkpoint entry " + e.name + " data does not match dims");
        detail::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
        out += e.name;
        out.push_back(static_cast<char>(e.dims.size()));
        for (auto d : e.dims) detail::put_u32(out, d);
        for (float v : e.data) detail::put_f32(out, v);
    }
    return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string &bytes, const std::string &what = "checkpoint") {
    if (bytes.size() < 4 || bytes.compare(0, 4, "DUF1") != 0)
        throw Error(ErrorCode::BadMagic, what + ": missing DUF1 magic");
    const std::string body = bytes.substr(4);
    detail::ByteReader r(body, what);
    const std::uint32_t count = r.u32();
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor e;
        e.name = r.str(r.u16());
        const std::uint8_t rank = r.u8();
        for (std::uint8_t k = 0; k < rank; ++k) e.dims.push_back(r.u32());
        const std::size_t n = e.count();
        if (r.remaining() / 4 < n) throw Error(ErrorCode::Truncated, what + ": entry " + e.name + " ends early");
        e.data.resize(n);
        for (std::size_t k = 0; k < n; ++k) e.data[k] = r.f32();
        out.push_back(std::move(e));
    }
    return out;
}

inline void save_checkpoint(const std::string &path, std::span<const NamedTensor> entries) {
    detail::write_file(path, encode_checkpoint(entries));
}

inline std::vector<NamedTensor> load_checkpoint(const std::string &path) {
    return decode_checkpoint(detail::read_file(path), path);
}

template <typename T>
NamedTensor to_named(const std::string &name, const Tensor4<T> &t) {
    NamedTensor e;
    e.name = name;
    const Shape4 s = t.shape();
    e.dims = {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
              static_cast<std::uint32_t>(s.w)};
    e.data.resize(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) e.data[i] = static_cast<float>(t[i]);
    return e;
}

template <typename T>
Tensor4<T> from_named(const NamedTensor &e) {
    if (e.dims.empty() || e.dims.size() > 4)
        throw Error(ErrorCode::BadDims, "entry " + e.name + " has rank " + std::to_string(e.dims.size()));
    int d[4] = {1, 1, 1, 1};
    for (std::size_t i = 0; i < e.dims.size(); ++i) d[4 - e.dims.size() + i] = static_cast<int>(e.dims[i]);
    Tensor4<T> t(Shape4{d[0], d[1], d[2], d[3]});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(e.data[i]);
    return t;
}

/// Layout entries ("meta/...") followed by every parameter tensor.
template <typename T>
std::vector<NamedTensor> network_entries(const FlowNetwork<T> &net) {
    std::vector<NamedTensor> out;
    const NetworkConfig &cfg = net.config();
    out.push_back({"meta/net",
                   {3},
                   {static_cast<float>(cfg.width_multiplier), static_cast<float>(cfg.leaky_slope),
                    cfg.zero_init_predictor ? 1.0f : 0.0f}});
    for (const auto &l : cfg.layers) {
        out.push_back({"meta/layer/" + l.name,
                       {8},
                       {static_cast<float>(l.kernel), static_cast<float>(l.stride), static_cast<float>(l.dilation),
                        static_cast<float>(l.out_channels), l.takes_dense_input ? 1.0f : 0.0f,
                        l.takes_rgb_route ? 1.0f : 0.0f, l.feeds_dense ? 1.0f : 0.0f, l.activation ? 1.0f : 0.0f}});
    }
    for (const auto *p : net.parameters()) out.push_back(to_named(p->name, p->value));
    return out;
}

/// Rebuilds a network from checkpoint entries; non-network entries are ignored.
template <typename T>
FlowNetwork<T> network_from_entries(std::span<const NamedTensor> entries) {
    NetworkConfig cfg;
    cfg.layers.clear();
    bool have_net = false;
    std::map<std::string, const NamedTensor *> by_name;
    for (const auto &e : entries) {
        by_name[e.name] = &e;
        if (e.name == "meta/net") {
            if (e.data.size() != 3) throw Error(ErrorCode::BadDims, "meta/net must hold 3 values");
            cfg.width_multiplier = e.data[0];
            cfg.leaky_slope = e.data[1];
            cfg.zero_init_predictor = e.data[2] != 0.0f;
            have_net = true;
        } else if (e.name.starts_with("meta/layer/")) {
            if (e.data.size() != 8) throw Error(ErrorCode::BadDims, e.name + " must hold 8 values");
            LayerSpec l;
            l.name = e.name.substr(std::string("meta/layer/").size());
            l.kernel = static_cast<int>(e.data[0]);
            l.stride = static_cast<int>(e.data[1]);
            l.dilation = static_cast<int>(e.data[2]);
            l.out_channels = static_cast<int>(e.data[3]);
            l.takes_dense_input = e.data[4] != 0.0f;
            l.takes_rgb_route = e.data[5] != 0.0f;
            l.feeds_dense = e.data[6] != 0.0f;
            l.activation = e.data[7] != 0.0f;
            cfg.layers.push_back(l);
        }
    }
    if (!have_net || cfg.layers.empty()) throw Error(ErrorCode::BadDims, "checkpoint has no network layout");
    FlowNetwork<T> net = build_network<T>(cfg, 0);
    for (auto *p : net.parameters()) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) throw Error(ErrorCode::BadDims, "checkpoint lacks parameter " + p->name);
        Tensor4<T> v = from_named<T>(*it->second);
        require_same_shape(v.shape(), p->value.shape(), ("checkpoint parameter " + p->name).c_str());
        p->value = std::move(v);
        p->zero_grad();
    }
    return net;
}

template <typename T>
void save_network(const FlowNetwork<T> &net, const std::string &path) {
    const auto entries = network_entries(net);
    save_checkpoint(path, entries);
}

template <typename T>
FlowNetwork<T> load_network(const std::string &path) {
    const auto entries = load_checkpoint(path);
    return network_from_entries<T>(entries);
}

}  // namespace duflow
