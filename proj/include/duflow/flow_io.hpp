#pragma once

// .flo files, PPM/PGM images, color-wheel rendering and flow metrics.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <cstring>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "duflow/error.hpp"
#include "duflow/tensor.hpp"

namespace duflow {

/// Per-pixel (u, v) displacement in pixels, stored as a (1, 2, H, W) tensor.
class FlowField {
   public:
    FlowField() = default;
    FlowField(int height, int width) : data_(Shape4{1, 2, height, width}) {}
    explicit FlowField(Tensor4<float> t) : data_(std::move(t)) {
        if (data_.n() != 1 || data_.c() != 2)
            throw Error(ErrorCode::ShapeMismatch, "FlowField needs a (1,2,H,W) tensor, got " + data_.shape().str());
    }

    int height() const { return data_.h(); }
    int width() const { return data_.w(); }
    float &u(int y, int x) { return data_.at(0, 0, y, x); }
    float &v(int y, int x) { return data_.at(0, 1, y, x); }
    float u(int y, int x) const { return data_.at(0, 0, y, x); }
    float v(int y, int x) const { return data_.at(0, 1, y, x); }

    const Tensor4<float> &tensor() const { return data_; }
    Tensor4<float> &tensor() { return data_; }

   private:
    Tensor4<float> data_;
};

// ---------------------------------------------------------------------------
// little-endian helpers

namespace detail {

inline void put_u32(std::string &out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_u16(std::string &out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFFu));
    out.push_back(static_cast<char>((v >> 8) & 0xFFu));
}
inline void put_f32(std::string &out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
   public:
    ByteReader(const std::string &bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint16_t u16() {
        need(2);
        const auto lo = static_cast<unsigned char>(bytes_[pos_]);
        const auto hi = static_cast<unsigned char>(bytes_[pos_ + 1]);
        pos_ += 2;
        return static_cast<std::uint16_t>(lo | (hi << 8));
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

   private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw Error(ErrorCode::Truncated, what_ + " ends early");
    }
    const std::string &bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string &path, const std::string &bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "short write to " + path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// .flo

inline constexpr float kFloMagic = 202021.25f;

inline std::string encode_flo(const FlowField &flow) {
    std::string out;
    out.reserve(12 + 8 * static_cast<std::size_t>(flow.width()) * flow.height());
    detail::put_f32(out, kFloMagic);
    detail::put_u32(out, static_cast<std::uint32_t>(flow.width()));
    detail::put_u32(out, static_cast<std::uint32_t>(flow.height()));
    for (int y = 0; y < flow.height(); ++y)
        for (int x = 0; x < flow.width(); ++x) {
            detail::put_f32(out, flow.u(y, x));
            detail::put_f32(out, flow.v(y, x));
        }
    return out;
}

inline FlowField decode_flo(const std::string &bytes, const std::string &what = ".flo data") {
    detail::ByteReader r(bytes, what);
    const float magic = r.f32();
    if (magic != kFloMagic) throw Error(ErrorCode::BadMagic, what + ": magic is not 202021.25");
    const auto w = static_cast<std::int32_t>(r.u32());
    const auto h = static_cast<std::int32_t>(r.u32());
    if (w <= 0 || h <= 0)
        throw Error(ErrorCode::BadDims, what + ": dims " + std::to_string(w) + "x" + std::to_string(h));
    if (r.remaining() < 8ull * static_cast<std::uint64_t>(w) * static_cast<std::uint64_t>(h))
        throw Error(ErrorCode::Truncated, what + ": payload shorter than 8*W*H bytes");
    FlowField f(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            f.u(y, x) = r.f32();
            f.v(y, x) = r.f32();
        }
    return f;
}

inline void write_flo(const FlowField &flow, const std::string &path) {
    if (!flow.tensor().all_finite()) throw Error(ErrorCode::NonFinite, "write_flo: flow has non-finite values");
    detail::write_file(path, encode_flo(flow));
}

inline FlowField read_flo(const std::string &path) { return decode_flo(detail::read_file(path), path); }

// ---------------------------------------------------------------------------
// binary PPM (P6) / PGM (P5), 8-bit

namespace detail {

inline std::string pnm_token(const std::string &bytes, std::size_t &pos) {
    for (;;) {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
}

inline std::uint8_t to_byte(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace detail

/// Reads P6 (3 channels) or P5 (1 channel) into a (1, C, H, W) tensor in [0, 1].
inline Tensor4<float> read_pnm(const std::string &path) {
    const std::string bytes = detail::read_file(path);
    std::size_t pos = 0;
    const std::string magic = detail::pnm_token(bytes, pos);
    int channels = 0;
    if (magic == "P6")
        channels = 3;
    else if (magic == "P5")
        channels = 1;
    else
        throw Error(ErrorCode::BadMagic, path + ": not a binary PPM/PGM");
    const std::string ws = detail::pnm_token(bytes, pos);
    const std::string hs = detail::pnm_token(bytes, pos);
    const std::string ms = detail::pnm_token(bytes, pos);
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(ws);
        h = std::stoi(hs);
        maxval = std::stoi(ms);
    } catch (const std::exception &) {
        throw Error(ErrorCode::BadDims, path + ": malformed header");
    }
    if (w <= 0 || h <= 0 || maxval != 255) throw Error(ErrorCode::BadDims, path + ": unsupported dims or maxval");
    ++pos;  // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(w) * h * channels;
    if (bytes.size() < pos + need) throw Error(ErrorCode::Truncated, path + ": pixel data ends early");
    Tensor4<float> img(Shape4{1, channels, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                const auto b = static_cast<unsigned char>(bytes[pos + (static_cast<std::size_t>(y) * w + x) * channels + c]);
                img.at(0, c, y, x) = static_cast<float>(b) / 255.0f;
            }
    return img;
}

/// Writes a (1, 3, H, W) tensor as P6 or a (1, 1, H, W) tensor as P5.
inline void write_pnm(const Tensor4<float> &img, const std::string &path) {
    if (img.n() != 1 || (img.c() != 1 && img.c() != 3))
        throw Error(ErrorCode::ShapeMismatch, "write_pnm expects (1,1|3,H,W), got " + img.shape().str());
    std::string out = (img.c() == 3 ? "P6\n" : "P5\n") + std::to_string(img.w()) + " " + std::to_string(img.h()) + "\n255\n";
    for (int y = 0; y < img.h(); ++y)
        for (int x = 0; x < img.w(); ++x)
            for (int c = 0; c < img.c(); ++c) out.push_back(static_cast<char>(detail::to_byte(img.at(0, c, y, x))));
    detail::write_file(path, out);
}

// ---------------------------------------------------------------------------
// visualization

/// HSV wheel: hue = atan2(v, u) with u > 0, v = 0 at 0 degrees (red);
/// saturation = |flow| / max_magnitude (capped at 1); vectors longer than
/// max_magnitude are drawn at value 0.75. Zero flow is white. When
/// max_magnitude is unset the 99th-percentile magnitude is used.
inline Tensor4<float> flow_to_color(const FlowField &flow, std::optional<double> max_magnitude = std::nullopt) {
    const int h = flow.height(), w = flow.width();
    double maxmag = 0.0;
    if (max_magnitude) {
        maxmag = *max_magnitude;
    } else {
        std::vector<double> mags;
        mags.reserve(static_cast<std::size_t>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) mags.push_back(std::hypot(flow.u(y, x), flow.v(y, x)));
        const std::size_t k = static_cast<std::size_t>(std::floor(0.99 * static_cast<double>(mags.size() - 1)));
        std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k), mags.end());
        maxmag = mags[k];
    }
    Tensor4<float> img(Shape4{1, 3, h, w}, 1.0f);
    if (!(maxmag > 0.0)) return img;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double u = flow.u(y, x), v = flow.v(y, x);
            const double mag = std::hypot(u, v);
            if (mag == 0.0) continue;
            double hue = std::atan2(v, u) * 180.0 / std::numbers::pi;
            if (hue < 0.0) hue += 360.0;
            const double ratio = mag / maxmag;
            const double s = std::min(ratio, 1.0);
            const double val = ratio > 1.0 ? 0.75 : 1.0;
            const double hp = hue / 60.0;
            const double chroma = val * s;
            const double xx = chroma * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
            double r = 0, g = 0, b = 0;
            switch (static_cast<int>(hp) % 6) {
                case 0: r = chroma; g = xx; break;
                case 1: r = xx; g = chroma; break;
                case 2: g = chroma; b = xx; break;
                case 3: g = xx; b = chroma; break;
                case 4: r = xx; b = chroma; break;
                default: r = chroma; b = xx; break;
            }
            const double m = val - chroma;
            img.at(0, 0, y, x) = static_cast<float>(r + m);
            img.at(0, 1, y, x) = static_cast<float>(g + m);
            img.at(0, 2, y, x) = static_cast<float>(b + m);
        }
    return img;
}

// ---------------------------------------------------------------------------
// metrics

struct MetricReport {
    double aee_all = 0.0;
    double aee_noc = 0.0;
    double f1_all = 0.0;
    std::optional<double> occl_iou;
};

namespace detail {

inline void require_same_field(const FlowField &a, const FlowField &b, const char *what) {
    if (a.height() != b.height() || a.width() != b.width())
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + a.tensor().shape().str() + " vs " +
                                                  b.tensor().shape().str());
}

inline double endpoint_error(const FlowField &a, const FlowField &b, int y, int x) {
    const double du = static_cast<double>(a.u(y, x)) - b.u(y, x);
    const double dv = static_cast<double>(a.v(y, x)) - b.v(y, x);
    return std::sqrt(du * du + dv * dv);
}

}  // namespace detail

/// Mean endpoint error over pixels where mask != 0 (all pixels when unset).
inline double aee(const FlowField &pred, const FlowField &gt, const Tensor4<float> *mask = nullptr) {
    detail::require_same_field(pred, gt, "aee");
    if (mask && !(mask->shape() == Shape4{1, 1, gt.height(), gt.width()}))
        throw Error(ErrorCode::ShapeMismatch, "aee mask " + mask->shape().str());
    double sum = 0.0;
    std::size_t count = 0;
    for (int y = 0; y < gt.height(); ++y)
        for (int x = 0; x < gt.width(); ++x) {
            if (mask && mask->at(0, 0, y, x) == 0.0f) continue;
            sum += detail::endpoint_error(pred, gt, y, x);
            ++count;
        }
    if (count == 0) throw Error(ErrorCode::MaskEmpty, "aee over an empty mask");
    return sum / static_cast<double>(count);
}

/// A pixel is an outlier when its endpoint error exceeds 3 px and 5% of |gt|.
inline bool f1_outlier(double epe, double gt_magnitude) { return epe > 3.0 && epe > 0.05 * gt_magnitude; }

/// Fraction of outlier pixels, in [0, 1].
inline double f1_all(const FlowField &pred, const FlowField &gt) {
    detail::require_same_field(pred, gt, "f1_all");
    std::size_t bad = 0;
    for (int y = 0; y < gt.height(); ++y)
        for (int x = 0; x < gt.width(); ++x) {
            const double mag = std::hypot(static_cast<double>(gt.u(y, x)), static_cast<double>(gt.v(y, x)));
            if (f1_outlier(detail::endpoint_error(pred, gt, y, x), mag)) ++bad;
        }
    return static_cast<double>(bad) / (static_cast<double>(gt.height()) * gt.width());
}

/// |pred ∩ gt| / |pred ∪ gt| over nonzero entries; 1 when both are empty.
template <typename T>
double occlusion_iou(const Tensor4<T> &pred, const Tensor4<T> &gt) {
    require_same_shape(pred.shape(), gt.shape(), "occlusion_iou");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] != T(0);
        const bool b = gt[i] != T(0);
        inter += (a && b) ? 1 : 0;
        uni += (a || b) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Pixel-weighted aggregation of metrics over many samples.
class MetricAccumulator {
   public:
    void add(const FlowField &pred, const FlowField &gt, const Tensor4<float> *occlusion = nullptr) {
        detail::require_same_field(pred, gt, "metrics");
        for (int y = 0; y < gt.height(); ++y)
            for (int x = 0; x < gt.width(); ++x) {
                const double epe = detail::endpoint_error(pred, gt, y, x);
                const double mag = std::hypot(static_cast<double>(gt.u(y, x)), static_cast<double>(gt.v(y, x)));
                sum_all_ += epe;
                ++n_all_;
                if (f1_outlier(epe, mag)) ++bad_;
                if (!occlusion || occlusion->at(0, 0, y, x) == 0.0f) {
                    sum_noc_ += epe;
                    ++n_noc_;
                }
            }
    }
    void add_iou(double iou) {
        iou_sum_ += iou;
        ++iou_count_;
    }

    MetricReport report() const {
        MetricReport r;
        if (n_all_ == 0) throw Error(ErrorCode::MaskEmpty, "no pixels accumulated");
        r.aee_all = sum_all_ / static_cast<double>(n_all_);
        r.aee_noc = n_noc_ ? sum_noc_ / static_cast<double>(n_noc_) : 0.0;
        r.f1_all = static_cast<double>(bad_) / static_cast<double>(n_all_);
        if (iou_count_) r.occl_iou = iou_sum_ / static_cast<double>(iou_count_);
        return r;
    }

   private:
    double sum_all_ = 0.0, sum_noc_ = 0.0, iou_sum_ = 0.0;
    std::size_t n_all_ = 0, n_noc_ = 0, bad_ = 0, iou_count_ = 0;
};

}  // namespace duflow
