#include <gtest/gtest.h>

#include <filesystem>

#include "duflow/trainer.hpp"
#include "oracles.hpp"

using namespace duflow;
namespace fs = std::filesystem;

namespace {

double rho0() { return std::pow(1e-6, 0.45); }

/// Small dataset on disk shared by the training tests.
class TinyDataset : public ::testing::Test {
   protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / ("duflow_trainer_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        SceneSpec spec;
        spec.height = spec.width = 32;
        spec.n_sprites = 1;
        spec.sprite_min = 6;
        spec.sprite_max = 12;
        for (std::size_t i = 0; i < 6; ++i) {
            spec.seed = derive_seed(60, i);
            write_sample((dir_ / "train").string(), i, generate_pair(spec));
        }
        for (std::size_t i = 0; i < 2; ++i) {
            spec.seed = derive_seed(61, i);
            write_sample((dir_ / "val").string(), i, generate_pair(spec));
        }
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static TrainConfig config(const std::string &out) {
        TrainConfig c;
        c.train_dir = (dir_ / "train").string();
        c.val_dir = (dir_ / "val").string();
        c.out_dir = (dir_ / out).string();
        c.stage1_steps = 2;
        c.stage2_steps = 1;
        c.batch_size = 2;
        c.width_multiplier = 0.0625;
        c.val_interval = 0;
        return c;
    }

    static inline fs::path dir_;
};

template <typename T>
std::vector<std::vector<T>> weights_of(const FlowNetwork<T> &net) {
    std::vector<std::vector<T>> out;
    for (const auto *p : net.parameters()) out.push_back(p->value.vec());
    return out;
}

}  // namespace

TEST(TrainConfig, ParsesKeysAndComments) {
    const TrainConfig c = parse_train_config(
        "# toy\n"
        "train_dir = data/train\n"
        "stage1_steps=10   # inline comment\n"
        "learning_rate = 3e-4\n"
        "augment = true\n"
        "weight_smooth = 2.5\n"
        "occlusion_alpha2 = 0.25\n"
        "\n");
    EXPECT_EQ(c.train_dir, "data/train");
    EXPECT_EQ(c.stage1_steps, 10);
    EXPECT_EQ(c.stage2_steps, 500);
    EXPECT_DOUBLE_EQ(c.adam.learning_rate, 3e-4);
    EXPECT_TRUE(c.augment);
    EXPECT_DOUBLE_EQ(c.weights.smooth, 2.5);
    EXPECT_DOUBLE_EQ(c.loss.occlusion.alpha2, 0.25);
}

TEST(TrainConfig, Defaults) {
    const TrainConfig c;
    EXPECT_EQ(c.total_steps(), 2000);
    EXPECT_EQ(c.batch_size, 4);
    EXPECT_DOUBLE_EQ(c.adam.learning_rate, 1e-4);
    EXPECT_DOUBLE_EQ(c.weights.data, 1.0);
    EXPECT_DOUBLE_EQ(c.weights.smooth, 3.0);
    EXPECT_DOUBLE_EQ(c.weights.fb, 0.2);
}

TEST(TrainConfig, UnknownKeyListsValidKeys) {
    try {
        parse_train_config("lerning_rate = 1\n");
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::Config);
        const std::string msg = e.what();
        EXPECT_NE(msg.find("lerning_rate"), std::string::npos);
        EXPECT_NE(msg.find("learning_rate"), std::string::npos);
        EXPECT_NE(msg.find("line 1"), std::string::npos);
    }
}

TEST(TrainConfig, BadValuesAreConfigErrors) {
    for (const char *text : {"batch_size = 0", "batch_size = four", "learning_rate = -1", "beta1 = 1.0",
                             "augment = maybe", "no equals sign", "stage1_steps = 3.5", "weight_fb = -0.1"}) {
        try {
            parse_train_config(text);
            ADD_FAILURE() << text;
        } catch (const Error &e) {
            EXPECT_EQ(e.code(), ErrorCode::Config) << text;
        }
    }
}

TEST(TrainConfig, MissingFileIsIoError) {
    try {
        load_train_config("/nonexistent/cfg");
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::Io);
    }
}

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments) {
    Parameter<double> p("p", Tensor4<double>(Shape4{1, 1, 1, 2}, 0.5));
    std::vector<Parameter<double> *> ps{&p};
    AdamState<double> st;
    p.grad[0] = 1.0;
    adam_step<double>(ps, st, AdamConfig{});
    const double after_first = p.value[1];
    const double m = st.m[0][0], v = st.v[0][0];
    p.zero_grad();
    const double before = p.value[1];
    adam_step<double>(ps, st, AdamConfig{});
    EXPECT_EQ(p.value[1], before);
    EXPECT_EQ(after_first, 0.5);
    EXPECT_DOUBLE_EQ(st.m[0][0], 0.9 * m);
    EXPECT_DOUBLE_EQ(st.v[0][0], 0.999 * v);
    EXPECT_EQ(st.step, 2);
}

TEST(Adam, ConstantGradientApproachesLearningRate) {
    Parameter<double> p("p", Tensor4<double>(Shape4{1, 1, 1, 1}, 0.0));
    std::vector<Parameter<double> *> ps{&p};
    AdamState<double> st;
    AdamConfig cfg;
    cfg.learning_rate = 1e-3;
    double prev = 0.0, delta = 0.0;
    for (int i = 0; i < 5000; ++i) {
        p.grad[0] = 0.37;
        adam_step<double>(ps, st, cfg);
        delta = p.value[0] - prev;
        prev = p.value[0];
        if (i == 0) EXPECT_NEAR(delta, -1e-3, 1e-9);
    }
    EXPECT_NEAR(std::abs(delta), 1e-3, 1e-6);
}

TEST(Adam, FirstStepIsScaleInvariant) {
    Parameter<double> a("a", Tensor4<double>(Shape4{1, 1, 1, 1}, 1.0));
    Parameter<double> b("b", Tensor4<double>(Shape4{1, 1, 1, 1}, 1.0));
    a.grad[0] = 0.01;
    b.grad[0] = 0.02;
    std::vector<Parameter<double> *> ps{&a, &b};
    AdamState<double> st;
    adam_step<double>(ps, st, AdamConfig{});
    EXPECT_NEAR(1.0 - a.value[0], 1.0 - b.value[0], 1e-9);
    EXPECT_NEAR(1.0 - a.value[0], 1e-4, 1e-8);
}

TEST(Adam, NonFiniteGradientReportsStep) {
    Parameter<float> p("layer.weight", Tensor4<float>(Shape4{1, 1, 1, 1}, 1.0f));
    std::vector<Parameter<float> *> ps{&p};
    AdamState<float> st;
    adam_step<float>(ps, st, AdamConfig{});
    p.grad[0] = std::nanf("");
    try {
        adam_step<float>(ps, st, AdamConfig{});
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFinite);
        EXPECT_NE(std::string(e.what()).find("at step 2"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
    }
    EXPECT_EQ(p.value[0], 1.0f);
}

TEST(Adam, GlobalNormClipping) {
    Parameter<double> a("a", Tensor4<double>(Shape4{1, 1, 1, 1}));
    Parameter<double> b("b", Tensor4<double>(Shape4{1, 1, 1, 1}));
    a.grad[0] = 3.0;
    b.grad[0] = 4.0;
    std::vector<Parameter<double> *> ps{&a, &b};
    EXPECT_DOUBLE_EQ(clip_global_norm<double>(ps, 10.0), 5.0);
    EXPECT_DOUBLE_EQ(a.grad[0], 3.0);
    EXPECT_DOUBLE_EQ(clip_global_norm<double>(ps, 1.0), 5.0);
    EXPECT_DOUBLE_EQ(a.grad[0], 0.6);
    EXPECT_DOUBLE_EQ(b.grad[0], 0.8);
}

TEST(Bidirectional, IdenticalFramesWithZeroInitPredictor) {
    NetworkConfig cfg;
    cfg.width_multiplier = 0.0625;
    auto net = build_network<float>(cfg, 1);
    const auto img = oracle::random({1, 3, 32, 32}, 1, 0, 1).cast<float>();
    net.zero_grad();
    const LossReport r = bidirectional_step(net, img, img, LossWeights{}, LossParams{}, true);
    EXPECT_NEAR(r.data_f, rho0(), 1e-6);
    EXPECT_NEAR(r.data_b, rho0(), 1e-6);
    EXPECT_NEAR(r.fb, rho0(), 1e-6);
    EXPECT_NEAR(r.smooth, rho0(), 1e-6);
    EXPECT_EQ(r.occluded_fraction_f, 0.0);
}

TEST(Bidirectional, SwappingFramesSwapsFlows) {
    NetworkConfig cfg;
    cfg.width_multiplier = 0.0625;
    cfg.zero_init_predictor = false;
    auto net = build_network<double>(cfg, 2);
    const auto a = oracle::random({2, 3, 16, 16}, 2, 0, 1), b = oracle::random({2, 3, 16, 16}, 3, 0, 1);
    const auto ab = predict(net, stack_batch<double>({a, b}), stack_batch<double>({b, a}));
    const auto ba = predict(net, stack_batch<double>({b, a}), stack_batch<double>({a, b}));
    const std::size_t half = ab.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        ASSERT_NEAR(ab[i], ba[half + i], 1e-12);
        ASSERT_NEAR(ab[half + i], ba[i], 1e-12);
    }
    net.zero_grad();
    const LossReport r1 = bidirectional_step(net, a, b, LossWeights{}, LossParams{}, false);
    const LossReport r2 = bidirectional_step(net, b, a, LossWeights{}, LossParams{}, false);
    EXPECT_NEAR(r1.data_f, r2.data_b, 1e-12);
    EXPECT_NEAR(r1.data_b, r2.data_f, 1e-12);
    EXPECT_NEAR(r1.total, r2.total, 1e-12);
}

TEST(Bidirectional, GradientIsSumOfDirections) {
    NetworkConfig cfg;
    cfg.width_multiplier = 0.0625;
    cfg.zero_init_predictor = false;
    auto net = build_network<double>(cfg, 4);
    for (auto &v : net.layers().back().weight.value.vec()) v *= 10.0;
    const auto a = oracle::random({1, 3, 16, 16}, 4, 0, 1), b = oracle::random({1, 3, 16, 16}, 5, 0, 1);
    // 0: both flows live, 1: only Mf carries gradient, 2: only Mb
    auto conv1_grad = [&](int mode) {
        net.zero_grad();
        Graph<double> g;
        Var flow = forward(g, net, g.constant(stack_batch<double>({a, b})), g.constant(stack_batch<double>({b, a}))).flow;
        Var mf = slice_batch(g, flow, 0, 1), mb = slice_batch(g, flow, 1, 1);
        if (mode == 2) mf = stop_gradient(g, mf);
        if (mode == 1) mb = stop_gradient(g, mb);
        g.backward(total_loss(g, g.constant(a), g.constant(b), mf, mb, LossWeights{}, LossParams{}, false).total);
        return net.layers().front().weight.grad;
    };
    const auto both = conv1_grad(0), fwd = conv1_grad(1), bwd = conv1_grad(2);
    double scale = 0.0;
    for (double v : both.vec()) scale = std::max(scale, std::abs(v));
    ASSERT_GT(scale, 0.0);
    for (std::size_t i = 0; i < both.size(); ++i) ASSERT_NEAR(both[i], fwd[i] + bwd[i], 1e-10 * scale);
}

TEST(Bidirectional, SingleParameterSetIsShared) {
    auto net = build_network<float>(NetworkConfig{}, 1);
    Graph<float> g;
    const auto img = Tensor4<float>(Shape4{1, 3, 16, 16}, 0.5f);
    forward(g, net, g.constant(img), g.constant(img));
    const std::size_t nodes_once = g.size();
    forward(g, net, g.constant(img), g.constant(img));
    // the second pass adds op nodes but no new parameter leaves
    EXPECT_EQ(g.size() - nodes_once, nodes_once - 2 * net.layers().size());
}

TEST_F(TinyDataset, ZeroStepsReturnsInitialNetwork) {
    TrainConfig c = config("zero");
    c.stage1_steps = c.stage2_steps = 0;
    const TrainResult r = train(c);
    EXPECT_TRUE(r.history.steps.empty());
    EXPECT_TRUE(r.history.validation.empty());
    EXPECT_EQ(weights_of(r.net), weights_of(build_network<float>(NetworkConfig{0.0625, 0.1}, c.seed)));
    EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "final.duf"));
}

TEST_F(TinyDataset, StagesHistoryAndValidation) {
    TrainConfig c = config("stages");
    c.val_interval = 2;
    const TrainResult r = train(c);
    ASSERT_EQ(r.history.steps.size(), 3u);
    EXPECT_EQ(r.history.steps[0].stage, 1);
    EXPECT_EQ(r.history.steps[1].stage, 1);
    EXPECT_EQ(r.history.steps[2].stage, 2);
    EXPECT_EQ(r.history.steps[0].loss.occluded_fraction_f, 0.0);
    ASSERT_EQ(r.history.validation.size(), 2u);
    EXPECT_EQ(r.history.validation[0].step, 2);
    EXPECT_EQ(r.history.validation[1].step, 3);
    std::ifstream log(fs::path(c.out_dir) / "history.log");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        ++lines;
        EXPECT_EQ(line.rfind("step=", 0), 0u);
    }
    EXPECT_EQ(lines, 5);
    EXPECT_NE(weights_of(r.net), weights_of(build_network<float>(NetworkConfig{0.0625, 0.1}, c.seed)));
}

TEST_F(TinyDataset, SameSeedSameWeights) {
    const TrainResult a = train(config("det_a"));
    const TrainResult b = train(config("det_b"));
    EXPECT_EQ(weights_of(a.net), weights_of(b.net));
}

TEST_F(TinyDataset, ResumeIsBitIdentical) {
    TrainConfig c = config("full");
    c.checkpoint_interval = 2;
    const TrainResult full = train(c);
    ASSERT_TRUE(fs::exists(fs::path(c.out_dir) / "step_000002.duf"));

    TrainConfig r = config("resumed");
    r.resume = (fs::path(c.out_dir) / "step_000002.duf").string();
    const TrainResult resumed = train(r);
    ASSERT_EQ(resumed.history.steps.size(), 1u);
    EXPECT_EQ(resumed.history.steps[0].step, 3);
    EXPECT_EQ(resumed.adam.step, full.adam.step);
    EXPECT_EQ(weights_of(resumed.net), weights_of(full.net));
    for (std::size_t k = 0; k < full.adam.m.size(); ++k) {
        EXPECT_EQ(resumed.adam.m[k].vec(), full.adam.m[k].vec());
        EXPECT_EQ(resumed.adam.v[k].vec(), full.adam.v[k].vec());
    }
}

TEST_F(TinyDataset, MissingDatasetIsIoError) {
    TrainConfig c = config("missing");
    c.train_dir = (dir_ / "nothing_here").string();
    try {
        train(c);
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::Io);
    }
}

TEST(BatchIndices, EpochIsAPermutation) {
    std::vector<int> seen(10, 0);
    for (int step = 0; step < 5; ++step)
        for (std::size_t i : batch_indices(3, step, 2, 10)) ++seen[i];
    for (int v : seen) EXPECT_EQ(v, 1);
    EXPECT_EQ(batch_indices(3, 7, 4, 10), batch_indices(3, 7, 4, 10));
    EXPECT_NE(batch_indices(3, 0, 10, 10), batch_indices(4, 0, 10, 10));
}

TEST(Evaluate, PredictedOcclusionIncludesOutOfFrameTargets) {
    Tensor4<float> mf(Shape4{1, 2, 4, 4}), mb(Shape4{1, 2, 4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            mf.at(0, 0, y, x) = 1.0f;
            mb.at(0, 0, y, x) = -1.0f;
        }
    const auto occ = predicted_occlusion(mf, mb, OcclusionParams{});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) EXPECT_EQ(occ.at(0, 0, y, x), x == 3 ? 1.0f : 0.0f);
}
