#include <gtest/gtest.h>

#include <filesystem>

#include "duflow/loss.hpp"
#include "duflow/scene.hpp"
#include "oracles.hpp"

using namespace duflow;
namespace fs = std::filesystem;

namespace {

SceneSpec translation_spec(double u, double v) {
    SceneSpec s;
    s.height = 32;
    s.width = 40;
    s.seed = 3;
    s.background_motion = Vec2{u, v};
    return s;
}

Sample uniform_flow_sample(int h, int w, float u, float v) {
    Sample s;
    s.pair.first = Tensor4<float>(Shape4{1, 3, h, w}, 0.5f);
    s.pair.second = Tensor4<float>(Shape4{1, 3, h, w}, 0.5f);
    s.gt.flow = FlowField(h, w);
    s.gt.occlusion = Tensor4<float>(Shape4{1, 1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            s.gt.flow.u(y, x) = u;
            s.gt.flow.v(y, x) = v;
        }
    return s;
}

AugmentParams geometric_only(std::uint64_t seed) {
    AugmentParams p;
    p.seed = seed;
    p.noise_sigma = 0.0;
    p.brightness = 0.0;
    p.contrast_min = p.contrast_max = 1.0;
    p.gamma_min = p.gamma_max = 1.0;
    p.color_min = p.color_max = 1.0;
    return p;
}

/// Mean |warp(I2, flow) - I1| over non-occluded pixels whose target stays in the image.
double warp_residual(const Sample &s) {
    Tensor4<double> warped, valid;
    oracle::warp(s.pair.second.cast<double>(), s.gt.flow.tensor().cast<double>(), warped, valid);
    double acc = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < warped.h(); ++y)
        for (int x = 0; x < warped.w(); ++x) {
            if (s.gt.occlusion.at(0, 0, y, x) != 0.0f || valid.at(0, 0, y, x) == 0.0) continue;
            for (int c = 0; c < 3; ++c) acc += std::abs(warped.at(0, c, y, x) - s.pair.first.at(0, c, y, x));
            n += 3;
        }
    EXPECT_GT(n, 0u);
    return acc / static_cast<double>(n);
}

}  // namespace

TEST(Scene, PureTranslationFlowAndBorders) {
    const Sample s = generate_pair(translation_spec(3, 2));
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 40; ++x) {
            ASSERT_EQ(s.gt.flow.u(y, x), 3.0f);
            ASSERT_EQ(s.gt.flow.v(y, x), 2.0f);
            const bool leaves = x + 3 > 39 || y + 2 > 31;
            ASSERT_EQ(s.gt.occlusion.at(0, 0, y, x), leaves ? 1.0f : 0.0f) << y << "," << x;
        }
    // integer motion: frame 2 is frame 1 shifted exactly
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 30; ++y)
            for (int x = 0; x < 37; ++x) ASSERT_EQ(s.pair.second.at(0, c, y + 2, x + 3), s.pair.first.at(0, c, y, x));
}

TEST(Scene, SpriteLeadingEdgeBandMatchesBruteForce) {
    SceneSpec spec;
    spec.height = 48;
    spec.width = 48;
    spec.seed = 4;
    spec.background_motion = Vec2{0, 0};
    Sprite sprite;
    sprite.center = Vec2{20, 20};
    sprite.half_extent = Vec2{5, 5};
    sprite.motion = Vec2{4, 0};
    sprite.texture_seed = 9;
    spec.sprites = {sprite};
    const Sample s = generate_pair(spec);

    auto in_sprite = [](double x, double y, double shift) { return std::abs(x - shift - 20) <= 5 && std::abs(y - 20) <= 5; };
    int occluded = 0;
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x) {
            // a frame-1 pixel is hidden when a different layer covers its destination in frame 2
            const bool sprite1 = in_sprite(x, y, 0);
            const double tx = sprite1 ? x + 4 : x;
            const bool sprite2_at_target = in_sprite(tx, y, 4);
            const bool expected = sprite1 != sprite2_at_target;
            ASSERT_EQ(s.gt.occlusion.at(0, 0, y, x) != 0.0f, expected) << y << "," << x;
            occluded += expected;
            if (expected) {
                EXPECT_GE(x, 26);
                EXPECT_LE(x, 29);
            }
        }
    EXPECT_EQ(occluded, 4 * 11);  // band as wide as the displacement, as tall as the sprite
}

TEST(Scene, SameSeedIsBitIdentical) {
    SceneSpec spec;
    spec.n_sprites = 3;
    spec.seed = 17;
    const Sample a = generate_pair(spec), b = generate_pair(spec);
    EXPECT_EQ(a.pair.first.vec(), b.pair.first.vec());
    EXPECT_EQ(a.pair.second.vec(), b.pair.second.vec());
    EXPECT_EQ(a.gt.flow.tensor().vec(), b.gt.flow.tensor().vec());
    EXPECT_EQ(a.gt.occlusion.vec(), b.gt.occlusion.vec());
    spec.seed = 18;
    EXPECT_NE(generate_pair(spec).pair.first.vec(), a.pair.first.vec());
}

TEST(Scene, DerivedSeedsDependOnIndex) {
    EXPECT_EQ(derive_seed(1, 5), derive_seed(1, 5));
    EXPECT_NE(derive_seed(1, 5), derive_seed(1, 6));
    EXPECT_NE(derive_seed(1, 5), derive_seed(2, 5));
}

TEST(Scene, DisplacementBound) {
    SceneSpec spec;
    spec.n_sprites = 4;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        spec.seed = seed;
        const Sample s = generate_pair(spec);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) ASSERT_LE(std::hypot(s.gt.flow.u(y, x), s.gt.flow.v(y, x)), 4.0 + 1e-6);
        for (float v : s.pair.first.vec()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    }
}

TEST(Scene, InvalidSpecsAreRejected) {
    SceneSpec spec;
    spec.n_sprites = 1;
    spec.sprite_min = 70;
    spec.sprite_max = 80;
    try {
        generate_pair(spec);
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
    }
    SceneSpec big;
    Sprite s;
    s.half_extent = Vec2{40, 4};
    big.sprites = {s};
    EXPECT_THROW(generate_pair(big), Error);
}

TEST(Scene, WarpConsistencyOnGeneratedPairs) {
    for (std::uint64_t i = 0; i < 10; ++i) {
        SceneSpec spec;
        spec.n_sprites = 3;
        spec.seed = derive_seed(21, i);
        spec.background = static_cast<Background>(i % 3);
        EXPECT_LT(warp_residual(generate_pair(spec)), 0.02) << "scene " << i;
    }
}

TEST(Scene, GroundTruthFlowsPassForwardBackwardCheck) {
    for (std::uint64_t i = 0; i < 10; ++i) {
        SceneSpec spec;
        spec.n_sprites = 3;
        spec.seed = derive_seed(22, i);
        const Sample s = generate_pair(spec);
        ASSERT_TRUE(s.backward.has_value());
        const auto masks = occlusion_masks(s.gt.flow.tensor(), s.backward->flow.tensor(), OcclusionParams{});
        std::size_t visible = 0, consistent = 0;
        for (std::size_t q = 0; q < masks.forward.size(); ++q) {
            if (s.gt.occlusion[q] != 0.0f) continue;
            ++visible;
            consistent += masks.forward[q] == 0.0f;
        }
        EXPECT_GT(static_cast<double>(consistent) / visible, 0.95) << "scene " << i;
    }
}

TEST(Augment, HorizontalFlipNegatesU) {
    Sample s = uniform_flow_sample(16, 16, 3, 0);
    GeometricTransform g;
    g.hflip = true;
    apply_geometric(s, g);
    EXPECT_FLOAT_EQ(s.gt.flow.u(8, 8), -3.0f);
    EXPECT_FLOAT_EQ(s.gt.flow.v(8, 8), 0.0f);
}

TEST(Augment, ScaleMultipliesFlow) {
    Sample s = uniform_flow_sample(16, 16, 3, 2);
    GeometricTransform g;
    g.scale = 2.0;
    apply_geometric(s, g);
    EXPECT_NEAR(s.gt.flow.u(8, 8), 6.0f, 1e-5);
    EXPECT_NEAR(s.gt.flow.v(8, 8), 4.0f, 1e-5);
}

TEST(Augment, QuarterTurnRotatesFlow) {
    Sample s = uniform_flow_sample(16, 16, 1, 0);
    GeometricTransform g;
    g.rotation_radians = std::numbers::pi / 2;
    apply_geometric(s, g);
    EXPECT_NEAR(s.gt.flow.u(8, 8), 0.0f, 1e-6);
    EXPECT_NEAR(s.gt.flow.v(8, 8), 1.0f, 1e-6);
}

TEST(Augment, QuarterTurnKeepsWarpConsistency) {
    SceneSpec spec;
    spec.n_sprites = 2;
    spec.seed = 31;
    Sample s = generate_pair(spec);
    GeometricTransform g;
    g.rotation_radians = std::numbers::pi / 2;
    apply_geometric(s, g);
    EXPECT_LT(warp_residual(s), 0.02);
}

TEST(Augment, RandomGeometryKeepsWarpConsistency) {
    for (std::uint64_t i = 0; i < 8; ++i) {
        SceneSpec spec;
        spec.n_sprites = 3;
        spec.seed = derive_seed(32, i);
        Sample s = augment(generate_pair(spec), geometric_only(derive_seed(33, i)));
        EXPECT_LT(warp_residual(s), 0.02) << "case " << i;
    }
}

TEST(Augment, PhotometricLeavesTruthAndClips) {
    SceneSpec spec;
    spec.n_sprites = 2;
    spec.seed = 41;
    const Sample raw = generate_pair(spec);
    AugmentParams p;
    p.seed = 5;
    p.scale_min = p.scale_max = 1.0;
    p.hflip_probability = 0.0;
    p.rotation_degrees = 0.0;
    p.brightness = 0.5;
    const Sample aug = augment(raw, p);
    EXPECT_EQ(aug.gt.flow.tensor().vec(), raw.gt.flow.tensor().vec());
    EXPECT_EQ(aug.gt.occlusion.vec(), raw.gt.occlusion.vec());
    EXPECT_NE(aug.pair.first.vec(), raw.pair.first.vec());
    for (float v : aug.pair.first.vec()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (float v : aug.pair.second.vec()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Augment, SameSeedSameResult) {
    SceneSpec spec;
    spec.n_sprites = 2;
    AugmentParams p;
    p.seed = 77;
    const Sample a = augment(generate_pair(spec), p), b = augment(generate_pair(spec), p);
    EXPECT_EQ(a.pair.first.vec(), b.pair.first.vec());
    EXPECT_EQ(a.gt.flow.tensor().vec(), b.gt.flow.tensor().vec());
}

TEST(Dataset, WriteListLoad) {
    const fs::path dir = fs::temp_directory_path() / ("duflow_scene_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    SceneSpec spec;
    spec.height = spec.width = 32;
    spec.n_sprites = 1;
    for (std::size_t i = 0; i < 3; ++i) {
        spec.seed = derive_seed(50, i);
        write_sample(dir.string(), i, generate_pair(spec));
    }
    std::size_t files = 0;
    for ([[maybe_unused]] const auto &e : fs::directory_iterator(dir)) ++files;
    EXPECT_EQ(files, 12u);
    const auto entries = list_dataset(dir.string());
    ASSERT_EQ(entries.size(), 3u);
    EXPECT_NE(entries[0].img1.find("00000_img1.ppm"), std::string::npos);
    const auto loaded = load_sample(entries[1]);
    spec.seed = derive_seed(50, 1);
    const Sample ref = generate_pair(spec);
    EXPECT_EQ(loaded.flow->tensor().vec(), ref.gt.flow.tensor().vec());
    EXPECT_EQ(loaded.occlusion->vec(), ref.gt.occlusion.vec());
    for (std::size_t i = 0; i < ref.pair.first.size(); ++i) ASSERT_NEAR(loaded.pair.first[i], ref.pair.first[i], 0.5 / 255 + 1e-6);
    fs::remove_all(dir);
    EXPECT_THROW(list_dataset(dir.string()), Error);
}
