#pragma once

// Synthetic two-frame scenes with exact ground truth. A scene is a stack of
// layers (a full-frame background plus textured sprites) that each translate
// rigidly; textures are continuous functions, so frame 2 is rendered exactly
// at subpixel offsets. Also holds the augmentation suite and the on-disk
// dataset layout.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "duflow/error.hpp"
#include "duflow/flow_io.hpp"
#include "duflow/tensor.hpp"

namespace duflow {

enum class Background { SmoothNoise, Checker, Gradient };
enum class SpriteShape { Rectangle, Disc };

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

struct Sprite {
    SpriteShape shape = SpriteShape::Rectangle;
    Vec2 center;       // frame-1 position, pixels
    Vec2 half_extent;  // rectangle half sizes; a disc uses half_extent.x as radius
    Vec2 motion;       // frame-1 -> frame-2 displacement
    std::uint64_t texture_seed = 0;
};

struct SceneSpec {
    int height = 64;
    int width = 64;
    Background background = Background::SmoothNoise;
    int n_sprites = 0;
    double max_displacement = 4.0;
    int sprite_min = 8;   // full extent, pixels
    int sprite_max = 20;
    std::uint64_t seed = 0;
    std::optional<Vec2> background_motion;  // random when unset
    std::vector<Sprite> sprites;            // drawn above the random ones
};

struct ImagePair {
    Tensor4<float> first;   // (1, 3, H, W) in [0, 1]
    Tensor4<float> second;
};

struct GroundTruth {
    FlowField flow;          // frame 1 -> frame 2
    Tensor4<float> occlusion;  // (1, 1, H, W), 1 = not visible in the other frame
};

struct Sample {
    ImagePair pair;
    GroundTruth gt;
    std::optional<GroundTruth> backward;  // frame 2 -> frame 1, when known
};

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Seed of sample `index` under base seed `base`; independent of generation order.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    return mix64(base ^ mix64(index + 0x632BE59BD9B4E019ull));
}

namespace detail {

class Rng {
   public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t bits() { return engine_(); }
    double normal() {
        // Box-Muller; consumes two draws
        const double u1 = std::max(uniform(), 1e-300);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    Vec2 in_disc(double radius) {
        const double r = radius * std::sqrt(uniform());
        const double a = 2.0 * std::numbers::pi * uniform();
        return Vec2{r * std::cos(a), r * std::sin(a)};
    }

   private:
    std::mt19937_64 engine_;
};

inline double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
    const std::uint64_t h = mix64(seed ^ mix64(static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ull +
                                               static_cast<std::uint64_t>(iy)));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

/// C2 value noise in [0, 1] with lattice spacing `cell`.
inline double value_noise(std::uint64_t seed, double x, double y, double cell) {
    const double gx = x / cell, gy = y / cell;
    const double fx = std::floor(gx), fy = std::floor(gy);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    const double tx = fade(gx - fx), ty = fade(gy - fy);
    const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
    const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
    return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
}

/// Continuous RGB texture of one layer, in that layer's frame-1 coordinates.
class Texture {
   public:
    Texture(Background kind, std::uint64_t seed) : kind_(kind), seed_(seed) {
        Rng rng(seed);
        for (auto &c : base_) c = rng.uniform(0.3, 0.7);
        for (auto &c : alt_) c = rng.uniform(0.2, 0.8);
        angle_ = rng.uniform(0.0, 2.0 * std::numbers::pi);
        phase_ = Vec2{rng.uniform(0.0, 16.0), rng.uniform(0.0, 16.0)};
    }

    std::array<double, 3> operator()(double x, double y) const {
        std::array<double, 3> out{};
        switch (kind_) {
            case Background::SmoothNoise: {
                const double g = 0.5 * value_noise(seed_, x, y, 16.0) + 0.3 * value_noise(seed_ + 1, x, y, 8.0) +
                                 0.2 * value_noise(seed_ + 2, x, y, 4.0);
                for (int c = 0; c < 3; ++c) {
                    const double tint = value_noise(seed_ + 10 + c, x, y, 12.0);
                    out[c] = base_[c] + 0.55 * (g - 0.5) + 0.2 * (tint - 0.5);
                }
                break;
            }
            case Background::Checker: {
                const double s = std::sin(std::numbers::pi * (x + phase_.x) / 8.0) *
                                 std::sin(std::numbers::pi * (y + phase_.y) / 8.0);
                const double t = 0.5 + 0.5 * std::clamp(2.0 * s, -1.0, 1.0);
                const double n = value_noise(seed_ + 3, x, y, 6.0) - 0.5;
                for (int c = 0; c < 3; ++c) out[c] = (1 - t) * base_[c] + t * alt_[c] + 0.1 * n;
                break;
            }
            case Background::Gradient: {
                const double r = (x * std::cos(angle_) + y * std::sin(angle_)) / 64.0;
                for (int c = 0; c < 3; ++c) out[c] = base_[c] + 0.25 * r;
                break;
            }
        }
        for (auto &c : out) c = std::clamp(c, 0.0, 1.0);
        return out;
    }

   private:
    Background kind_;
    std::uint64_t seed_;
    std::array<double, 3> base_{};
    std::array<double, 3> alt_{};
    double angle_ = 0.0;
    Vec2 phase_;
};

inline bool sprite_contains(const Sprite &s, double x, double y) {
    const double dx = x - s.center.x, dy = y - s.center.y;
    if (s.shape == SpriteShape::Disc) return dx * dx + dy * dy <= s.half_extent.x * s.half_extent.x;
    return std::abs(dx) <= s.half_extent.x && std::abs(dy) <= s.half_extent.y;
}

struct Scene {
    int height = 0, width = 0;
    Vec2 background_motion;
    Texture background{Background::SmoothNoise, 0};
    std::vector<Sprite> sprites;
    std::vector<Texture> sprite_textures;

    Vec2 motion(int layer) const { return layer == 0 ? background_motion : sprites[static_cast<std::size_t>(layer - 1)].motion; }

    /// Topmost layer covering (x, y) in frame 1 (0 = background).
    int top_frame1(double x, double y) const {
        for (std::size_t i = sprites.size(); i-- > 0;)
            if (sprite_contains(sprites[i], x, y)) return static_cast<int>(i) + 1;
        return 0;
    }
    /// Topmost layer covering (x, y) in frame 2.
    int top_frame2(double x, double y) const {
        for (std::size_t i = sprites.size(); i-- > 0;)
            if (sprite_contains(sprites[i], x - sprites[i].motion.x, y - sprites[i].motion.y)) return static_cast<int>(i) + 1;
        return 0;
    }
    std::array<double, 3> color(int layer, double x, double y) const {
        return layer == 0 ? background(x, y) : sprite_textures[static_cast<std::size_t>(layer - 1)](x, y);
    }
    bool inside(double x, double y) const { return x >= 0.0 && x <= width - 1.0 && y >= 0.0 && y <= height - 1.0; }
};

inline Scene make_scene(const SceneSpec &spec) {
    if (spec.height < 4 || spec.width < 4) throw Error(ErrorCode::InvalidArgument, "scene must be at least 4x4");
    if (spec.max_displacement < 0.0 || spec.max_displacement > std::min(spec.height, spec.width) / 8.0)
        throw Error(ErrorCode::InvalidArgument, "max_displacement must be in [0, min(H, W) / 8]");
    if (spec.n_sprites < 0) throw Error(ErrorCode::InvalidArgument, "n_sprites must be >= 0");
    if (spec.sprite_min < 1 || spec.sprite_max < spec.sprite_min)
        throw Error(ErrorCode::InvalidArgument, "sprite size range is empty");
    const int limit = std::min(spec.height, spec.width);
    if (spec.n_sprites > 0 && spec.sprite_max > limit)
        throw Error(ErrorCode::InvalidArgument, "sprite_max " + std::to_string(spec.sprite_max) +
                                                    " is larger than the image (" + std::to_string(limit) + ")");
    for (const auto &s : spec.sprites)
        if (2.0 * s.half_extent.x > spec.width || 2.0 * s.half_extent.y > spec.height)
            throw Error(ErrorCode::InvalidArgument, "explicit sprite is larger than the image");

    Rng rng(spec.seed);
    Scene scene;
    scene.height = spec.height;
    scene.width = spec.width;
    scene.background = Texture(spec.background, rng.bits());
    const Vec2 random_bg = rng.in_disc(spec.max_displacement);
    scene.background_motion = spec.background_motion.value_or(random_bg);
    for (int i = 0; i < spec.n_sprites; ++i) {
        Sprite s;
        s.shape = rng.uniform() < 0.5 ? SpriteShape::Rectangle : SpriteShape::Disc;
        const double ex = rng.uniform(spec.sprite_min, spec.sprite_max) / 2.0;
        const double ey = rng.uniform(spec.sprite_min, spec.sprite_max) / 2.0;
        s.half_extent = Vec2{ex, s.shape == SpriteShape::Disc ? ex : ey};
        s.center = Vec2{rng.uniform(0.0, spec.width - 1.0), rng.uniform(0.0, spec.height - 1.0)};
        s.motion = rng.in_disc(spec.max_displacement);
        s.texture_seed = rng.bits();
        scene.sprites.push_back(s);
    }
    for (const auto &s : spec.sprites) scene.sprites.push_back(s);
    for (const auto &s : scene.sprites) scene.sprite_textures.emplace_back(Background::SmoothNoise, s.texture_seed);
    return scene;
}

}  // namespace detail

/// Renders a pair with forward and backward ground truth. Deterministic in
/// spec.seed.
inline Sample generate_pair(const SceneSpec &spec) {
    const detail::Scene scene = detail::make_scene(spec);
    const int h = spec.height, w = spec.width;
    Sample s;
    s.pair.first = Tensor4<float>(Shape4{1, 3, h, w});
    s.pair.second = Tensor4<float>(Shape4{1, 3, h, w});
    s.gt.flow = FlowField(h, w);
    s.gt.occlusion = Tensor4<float>(Shape4{1, 1, h, w});
    GroundTruth back{FlowField(h, w), Tensor4<float>(Shape4{1, 1, h, w})};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int l1 = scene.top_frame1(x, y);
            const Vec2 d1 = scene.motion(l1);
            const auto c1 = scene.color(l1, x, y);
            const int l2 = scene.top_frame2(x, y);
            const Vec2 d2 = scene.motion(l2);
            const auto c2 = scene.color(l2, x - d2.x, y - d2.y);
            for (int c = 0; c < 3; ++c) {
                s.pair.first.at(0, c, y, x) = static_cast<float>(c1[static_cast<std::size_t>(c)]);
                s.pair.second.at(0, c, y, x) = static_cast<float>(c2[static_cast<std::size_t>(c)]);
            }
            s.gt.flow.u(y, x) = static_cast<float>(d1.x);
            s.gt.flow.v(y, x) = static_cast<float>(d1.y);
            const double fx = x + d1.x, fy = y + d1.y;
            const bool occ_f = !scene.inside(fx, fy) || scene.top_frame2(fx, fy) != l1;
            s.gt.occlusion.at(0, 0, y, x) = occ_f ? 1.0f : 0.0f;

            back.flow.u(y, x) = static_cast<float>(-d2.x);
            back.flow.v(y, x) = static_cast<float>(-d2.y);
            const double bx = x - d2.x, by = y - d2.y;
            const bool occ_b = !scene.inside(bx, by) || scene.top_frame1(bx, by) != l2;
            back.occlusion.at(0, 0, y, x) = occ_b ? 1.0f : 0.0f;
        }
    s.backward = std::move(back);
    return s;
}

// ---------------------------------------------------------------------------
// augmentation

struct AugmentParams {
    double scale_min = 0.9, scale_max = 1.1;
    double hflip_probability = 0.5;
    double vflip_probability = 0.0;
    double rotation_degrees = 5.0;  // uniform in [-r, r]
    double noise_sigma = 0.01;
    double brightness = 0.1;  // additive offset in [-b, b]
    double contrast_min = 0.8, contrast_max = 1.2;
    double gamma_min = 0.8, gamma_max = 1.2;
    double color_min = 0.9, color_max = 1.1;  // per-channel gain
    std::uint64_t seed = 0;
};

/// Concrete draw of the geometric part, exposed so tests can pin it.
struct GeometricTransform {
    double scale = 1.0;
    double rotation_radians = 0.0;  // image coordinates (y down): (1,0) -> (cos, sin)
    bool hflip = false;
    bool vflip = false;

    /// Linear part A applied to displacement vectors: rotate * scale * flip.
    std::array<double, 4> matrix() const {
        const double fx = hflip ? -1.0 : 1.0, fy = vflip ? -1.0 : 1.0;
        const double c = std::cos(rotation_radians) * scale, s = std::sin(rotation_radians) * scale;
        return {c * fx, -s * fy, s * fx, c * fy};
    }
};

struct PhotometricTransform {
    double brightness = 0.0;
    double contrast = 1.0;
    double gamma = 1.0;
    std::array<double, 3> color{1.0, 1.0, 1.0};
    double noise_sigma = 0.0;
    std::uint64_t noise_seed = 0;
};

namespace detail {

inline double bilinear_clamped(const Tensor4<float> &t, int c, double x, double y) {
    const double cx = std::clamp(x, 0.0, t.w() - 1.0), cy = std::clamp(y, 0.0, t.h() - 1.0);
    const int x0 = static_cast<int>(std::floor(cx)), y0 = static_cast<int>(std::floor(cy));
    const int x1 = std::min(x0 + 1, t.w() - 1), y1 = std::min(y0 + 1, t.h() - 1);
    const double wx = cx - x0, wy = cy - y0;
    return (1 - wy) * ((1 - wx) * t.at(0, c, y0, x0) + wx * t.at(0, c, y0, x1)) +
           wy * ((1 - wx) * t.at(0, c, y1, x0) + wx * t.at(0, c, y1, x1));
}

}  // namespace detail

/// Resamples both frames and the ground truth through the similarity A about
/// the image center: output p samples the input at A^-1 (p - c) + c and its
/// flow becomes A * flow. Pixels sampled from outside the input, or whose
/// transformed flow leaves the frame, are marked occluded.
inline void apply_geometric(Sample &sample, const GeometricTransform &g) {
    const int h = sample.pair.first.h(), w = sample.pair.first.w();
    const auto a = g.matrix();
    const double det = a[0] * a[3] - a[1] * a[2];
    const std::array<double, 4> inv{a[3] / det, -a[1] / det, -a[2] / det, a[0] / det};
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;

    auto resample_frame = [&](const Tensor4<float> &src) {
        Tensor4<float> out(src.shape());
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double sx = inv[0] * (x - cx) + inv[1] * (y - cy) + cx;
                const double sy = inv[2] * (x - cx) + inv[3] * (y - cy) + cy;
                for (int c = 0; c < src.c(); ++c) out.at(0, c, y, x) = static_cast<float>(detail::bilinear_clamped(src, c, sx, sy));
            }
        return out;
    };
    auto resample_truth = [&](const GroundTruth &gt) {
        GroundTruth out{FlowField(h, w), Tensor4<float>(Shape4{1, 1, h, w})};
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double sx = inv[0] * (x - cx) + inv[1] * (y - cy) + cx;
                const double sy = inv[2] * (x - cx) + inv[3] * (y - cy) + cy;
                const double fu = detail::bilinear_clamped(gt.flow.tensor(), 0, sx, sy);
                const double fv = detail::bilinear_clamped(gt.flow.tensor(), 1, sx, sy);
                const double nu = a[0] * fu + a[1] * fv;
                const double nv = a[2] * fu + a[3] * fv;
                out.flow.u(y, x) = static_cast<float>(nu);
                out.flow.v(y, x) = static_cast<float>(nv);
                const int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, w - 1);
                const int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, h - 1);
                const bool outside = sx < -0.5 || sx > w - 0.5 || sy < -0.5 || sy > h - 0.5;
                const bool lands_out = x + nu < 0.0 || x + nu > w - 1.0 || y + nv < 0.0 || y + nv > h - 1.0;
                const bool occ = gt.occlusion.at(0, 0, ny, nx) != 0.0f || outside || lands_out;
                out.occlusion.at(0, 0, y, x) = occ ? 1.0f : 0.0f;
            }
        return out;
    };
    sample.pair.first = resample_frame(sample.pair.first);
    sample.pair.second = resample_frame(sample.pair.second);
    sample.gt = resample_truth(sample.gt);
    if (sample.backward) sample.backward = resample_truth(*sample.backward);
}

/// Color gain, contrast about 0.5, brightness offset, gamma, then Gaussian
/// noise; the result is clipped to [0, 1].
inline void apply_photometric(Tensor4<float> &img, const PhotometricTransform &p) {
    detail::Rng noise(p.noise_seed);
    for (int c = 0; c < img.c(); ++c)
        for (int y = 0; y < img.h(); ++y)
            for (int x = 0; x < img.w(); ++x) {
                double v = img.at(0, c, y, x) * p.color[static_cast<std::size_t>(c % 3)];
                v = (v - 0.5) * p.contrast + 0.5 + p.brightness;
                v = std::pow(std::clamp(v, 0.0, 1.0), p.gamma);
                if (p.noise_sigma > 0.0) v += p.noise_sigma * noise.normal();
                img.at(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
}

inline GeometricTransform draw_geometric(const AugmentParams &p, detail::Rng &rng) {
    GeometricTransform g;
    g.scale = rng.uniform(p.scale_min, p.scale_max);
    g.rotation_radians = rng.uniform(-p.rotation_degrees, p.rotation_degrees) * std::numbers::pi / 180.0;
    g.hflip = rng.uniform() < p.hflip_probability;
    g.vflip = rng.uniform() < p.vflip_probability;
    return g;
}

inline PhotometricTransform draw_photometric(const AugmentParams &p, detail::Rng &rng) {
    PhotometricTransform t;
    t.brightness = rng.uniform(-p.brightness, p.brightness);
    t.contrast = rng.uniform(p.contrast_min, p.contrast_max);
    t.gamma = rng.uniform(p.gamma_min, p.gamma_max);
    for (auto &c : t.color) c = rng.uniform(p.color_min, p.color_max);
    t.noise_sigma = p.noise_sigma;
    t.noise_seed = rng.bits();
    return t;
}

/// One shared geometric draw for both frames and the ground truth; an
/// independent photometric draw per frame.
inline Sample augment(Sample sample, const AugmentParams &params) {
    detail::Rng rng(params.seed);
    apply_geometric(sample, draw_geometric(params, rng));
    apply_photometric(sample.pair.first, draw_photometric(params, rng));
    apply_photometric(sample.pair.second, draw_photometric(params, rng));
    return sample;
}

// ---------------------------------------------------------------------------
// dataset directory: NNNNN_img1.ppm, NNNNN_img2.ppm, NNNNN_flow.flo, NNNNN_occ.pgm

inline std::string sample_stem(const std::string &dir, std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05zu", index);
    return (std::filesystem::path(dir) / buf).string();
}

inline void write_sample(const std::string &dir, std::size_t index, const Sample &s) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    const std::string stem = sample_stem(dir, index);
    write_pnm(s.pair.first, stem + "_img1.ppm");
    write_pnm(s.pair.second, stem + "_img2.ppm");
    write_flo(s.gt.flow, stem + "_flow.flo");
    write_pnm(s.gt.occlusion, stem + "_occ.pgm");
}

struct DatasetEntry {
    std::string img1, img2;
    std::optional<std::string> flow, occlusion;
};

/// Lists `*_img1.ppm` files (sorted) with their partners; ground truth is optional.
inline std::vector<DatasetEntry> list_dataset(const std::string &dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw Error(ErrorCode::Io, "dataset directory " + dir + " is not readable");
    std::vector<std::string> stems;
    for (const auto &e : fs::directory_iterator(dir, ec)) {
        const std::string name = e.path().filename().string();
        const std::string suffix = "_img1.ppm";
        if (name.size() > suffix.size() && name.ends_with(suffix))
            stems.push_back((fs::path(dir) / name.substr(0, name.size() - suffix.size())).string());
    }
    if (ec) throw Error(ErrorCode::Io, "cannot list " + dir + ": " + ec.message());
    std::sort(stems.begin(), stems.end());
    std::vector<DatasetEntry> out;
    for (const auto &stem : stems) {
        DatasetEntry d{stem + "_img1.ppm", stem + "_img2.ppm", std::nullopt, std::nullopt};
        if (!fs::exists(d.img2)) throw Error(ErrorCode::Io, "missing partner frame " + d.img2);
        if (fs::exists(stem + "_flow.flo")) d.flow = stem + "_flow.flo";
        if (fs::exists(stem + "_occ.pgm")) d.occlusion = stem + "_occ.pgm";
        out.push_back(std::move(d));
    }
    if (out.empty()) throw Error(ErrorCode::Io, "no *_img1.ppm pairs in " + dir);
    return out;
}

struct LoadedSample {
    ImagePair pair;
    std::optional<FlowField> flow;
    std::optional<Tensor4<float>> occlusion;
};

inline LoadedSample load_sample(const DatasetEntry &e) {
    LoadedSample s;
    s.pair.first = read_pnm(e.img1);
    s.pair.second = read_pnm(e.img2);
    if (s.pair.first.c() != 3 || !(s.pair.first.shape() == s.pair.second.shape()))
        throw Error(ErrorCode::ShapeMismatch, "frames " + e.img1 + " and " + e.img2 + " must be RGB of equal size");
    if (e.flow) s.flow = read_flo(*e.flow);
    if (e.occlusion) {
        Tensor4<float> occ = read_pnm(*e.occlusion);
        for (std::size_t i = 0; i < occ.size(); ++i) occ[i] = occ[i] > 0.5f ? 1.0f : 0.0f;
        s.occlusion = std::move(occ);
    }
    return s;
}

inline std::vector<LoadedSample> load_dataset(const std::string &dir) {
    std::vector<LoadedSample> out;
    for (const auto &e : list_dataset(dir)) out.push_back(load_sample(e));
    return out;
}

}  // namespace duflow
