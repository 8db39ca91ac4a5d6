// Acceptance run: one PASS/FAIL line per criterion, details indented below.
// Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "../oracles.hpp"
#include "duflow/duflow.hpp"

namespace fs = std::filesystem;
using namespace duflow;

namespace {

// Tolerances and run sizes.
constexpr double kGradSuiteSeconds = 120.0;
constexpr double kWarpTolerance = 1e-6;
constexpr int kWarpCases = 100;
constexpr int kOcclusionScenes = 50;
constexpr double kOcclusionIou = 0.8;
constexpr double kCensusTolerance = 1e-6;
constexpr double kMadTolerance = 1e-6;
constexpr double kParameterRatio = 0.55;
constexpr double kToyAee = 1.5;
constexpr double kToyBaselineFraction = 0.30;
constexpr double kStage2Slack = 0.05;
constexpr double kToyMinutes = 30.0;
constexpr int kToyTrainPairs = 200;
constexpr int kToyValPairs = 50;
constexpr int kToySprites = 3;

int failures = 0;

void verdict(int id, const std::string &name, bool ok, const std::string &summary) {
    std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), summary.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

void detail_line(const std::string &text) {
    std::printf("    %s\n", text.c_str());
    std::fflush(stdout);
}

std::string fmt(const char *f, double v) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = run_gradient_suite(1);
    const double elapsed = seconds_since(t0);
    bool ok = elapsed < kGradSuiteSeconds;
    for (const auto &r : results) {
        ok = ok && r.pass();
        std::string line = r.name + " max_rel=" + fmt("%.3e", r.max_rel_error) + " tol=" + fmt("%.0e", r.tolerance) +
                           " entries=" + std::to_string(r.checked);
        if (r.one_sided) line += " one_sided=" + std::to_string(r.one_sided);
        detail_line(line);
    }
    verdict(1, "gradient oracle suite", ok,
            std::to_string(results.size()) + " checks, " + fmt("%.1f s", elapsed) + " (limit 120 s)");
}

void criterion_warp() {
    double worst_float = 0.0, worst_double = 0.0;
    bool valid_exact = true;
    for (int k = 0; k < kWarpCases; ++k) {
        const int h = 6 + k % 11, w = 7 + (k * 7) % 13;
        const auto img = oracle::random({1 + k % 2, 3, h, w}, 1000 + k, 0.0, 1.0);
        const auto flow = oracle::random({img.n(), 2, h, w}, 5000 + k, -0.6 * w, 0.6 * w);
        Tensor4<double> ref, ref_valid;
        oracle::warp(img, flow, ref, ref_valid);
        const auto d = warp_values(img, flow);
        const auto f = warp_values(img.cast<float>(), flow.cast<float>());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            worst_double = std::max(worst_double, std::abs(d.warped[i] - ref[i]));
            worst_float = std::max(worst_float, std::abs(static_cast<double>(f.warped[i]) - ref[i]));
        }
        for (std::size_t i = 0; i < ref_valid.size(); ++i)
            valid_exact = valid_exact && d.valid[i] == ref_valid[i] && f.valid[i] == ref_valid[i];
    }
    detail_line("double max_abs=" + fmt("%.3e", worst_double) + ", float max_abs=" + fmt("%.3e", worst_float));
    verdict(2, "warp oracle", worst_double <= kWarpTolerance && worst_float <= kWarpTolerance && valid_exact,
            std::to_string(kWarpCases) + " cases, max abs diff " + fmt("%.3e", std::max(worst_double, worst_float)) +
                (valid_exact ? ", validity identical" : ", validity differs"));
}

Tensor4<float> uniform_flow(int h, int w, float u, float v) {
    Tensor4<float> t(Shape4{1, 2, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            t.at(0, 0, y, x) = u;
            t.at(0, 1, y, x) = v;
        }
    return t;
}

bool all_equal(const Tensor4<float> &t, float value) {
    for (float v : t.vec())
        if (v != value) return false;
    return true;
}

void criterion_occlusion() {
    const OcclusionParams params;
    const auto zero = occlusion_masks(uniform_flow(16, 16, 0, 0), uniform_flow(16, 16, 0, 0), params);
    const auto inverse = occlusion_masks(uniform_flow(16, 16, 10, 0), uniform_flow(16, 16, -10, 0), params);
    const auto one_sided = occlusion_masks(uniform_flow(16, 16, 10, 0), uniform_flow(16, 16, 0, 0), params);
    const bool examples = all_equal(zero.forward, 0) && all_equal(zero.backward, 0) &&
                          all_equal(inverse.forward, 0) && all_equal(inverse.backward, 0) &&
                          all_equal(one_sided.forward, 1);
    detail_line(std::string("worked examples (zero, inverse, unmatched): ") + (examples ? "exact" : "mismatch"));

    double iou_sum = 0.0, worst = 1.0;
    for (int i = 0; i < kOcclusionScenes; ++i) {
        SceneSpec spec;
        spec.n_sprites = 1 + i % 4;
        spec.background = static_cast<Background>(i % 3);
        spec.seed = derive_seed(77, static_cast<std::uint64_t>(i));
        const Sample s = generate_pair(spec);
        const Tensor4<float> &mf = s.gt.flow.tensor();
        const Tensor4<float> &mb = s.backward->flow.tensor();
        const auto masks = occlusion_masks(mf, mb, params);
        const auto valid = warp_values(s.pair.second, mf).valid;
        Tensor4<float> predicted = masks.forward;
        for (std::size_t k = 0; k < predicted.size(); ++k)
            predicted[k] = (masks.forward[k] > 0.5f || valid[k] < 0.5f) ? 1.0f : 0.0f;
        const double iou = occlusion_iou(predicted, s.gt.occlusion);
        iou_sum += iou;
        worst = std::min(worst, iou);
    }
    const double mean = iou_sum / kOcclusionScenes;
    detail_line("predicted occlusion = forward-backward flag OR target outside the frame");
    detail_line("mean IoU " + fmt("%.4f", mean) + ", worst scene " + fmt("%.4f", worst));
    verdict(3, "occlusion check on ground truth", examples && mean >= kOcclusionIou,
            std::to_string(kOcclusionScenes) + " scenes, mean IoU " + fmt("%.4f", mean) + " (>= 0.8)");
}

void criterion_census() {
    const auto img = oracle::random({1, 3, 32, 32}, 11, 0.2, 0.7);
    Tensor4<double> bright = img;
    for (auto &v : bright.vec()) v += 0.1;
    Graph<double> g;
    const CensusParams p;
    const Var d1 = census_descriptor(g, rgb_to_gray(g, g.constant(img)), p);
    const Var d2 = census_descriptor(g, rgb_to_gray(g, g.constant(bright)), p);
    double cost = 0.0;
    for (double v : g.value(census_cost(g, d1, d2, p)).vec()) cost = std::max(cost, v);
    double mad = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) mad += std::abs(bright[i] - img[i]);
    mad /= static_cast<double>(img.size());
    verdict(4, "census illumination robustness", cost < kCensusTolerance && std::abs(mad - 0.1) <= kMadTolerance,
            "max census cost " + fmt("%.3e", cost) + ", mean abs difference " + fmt("%.9f", mad));
}

// Zero inside the bounding box of the nonzero entries.
bool has_hole(const Tensor4<std::uint8_t> &mask) {
    int y0 = mask.h(), y1 = -1, x0 = mask.w(), x1 = -1;
    for (int y = 0; y < mask.h(); ++y)
        for (int x = 0; x < mask.w(); ++x)
            if (mask.at(0, 0, y, x)) {
                y0 = std::min(y0, y), y1 = std::max(y1, y);
                x0 = std::min(x0, x), x1 = std::max(x1, x);
            }
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (!mask.at(0, 0, y, x)) return true;
    return false;
}

void criterion_receptive_field() {
    const std::vector<int> full{2, 4, 2, 1}, truncated{2, 4};
    const bool full_holes = has_hole(receptive_field_mask(std::span<const int>(full), 3, 41, 41, 20, 20));
    const bool trunc_holes = has_hole(receptive_field_mask(std::span<const int>(truncated), 3, 41, 41, 20, 20));
    verdict(5, "degridding", !full_holes && trunc_holes,
            std::string("[2,4,2,1] ") + (full_holes ? "has holes" : "hole-free") + ", [2,4] " +
                (trunc_holes ? "has holes" : "hole-free"));
}

void criterion_parameters() {
    NetworkConfig cfg;
    cfg.width_multiplier = 1.0;
    const auto net = build_network<float>(cfg, 1);
    const std::size_t ours = net.parameter_count();
    const std::size_t reference = count_parameters(flownets_reference_registry(1.0));
    const double ratio = static_cast<double>(ours) / static_cast<double>(reference);
    verdict(6, "parameter ratio", ratio <= kParameterRatio,
            std::to_string(ours) + " / " + std::to_string(reference) + " = " + fmt("%.4f", ratio) + " (<= 0.55)");
}

void write_toy_split(const fs::path &dir, int count, std::uint64_t seed) {
    for (int i = 0; i < count; ++i) {
        SceneSpec spec;
        spec.n_sprites = kToySprites;
        spec.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
        write_sample(dir.string(), static_cast<std::size_t>(i), generate_pair(spec));
    }
}

void loss_trend_note(const TrainHistory &h) {
    if (h.steps.size() < 200) return;
    std::vector<double> avg;
    for (std::size_t end = 50; end <= 200; ++end) {
        double s = 0.0;
        for (std::size_t k = end - 50; k < end; ++k) s += h.steps[k].loss.total;
        avg.push_back(s / 50.0);
    }
    int rises = 0;
    for (std::size_t k = 1; k < avg.size(); ++k) rises += avg[k] > avg[k - 1];
    std::string blocks;
    bool blocks_fall = true;
    for (std::size_t b = 0; b < 4; ++b) {
        double s = 0.0;
        for (std::size_t k = 50 * b; k < 50 * (b + 1); ++k) s += h.steps[k].loss.total;
        blocks += (b ? ", " : "") + fmt("%.4f", s / 50.0);
    }
    for (std::size_t b = 1; b < 4; ++b) {
        double prev = 0.0, cur = 0.0;
        for (std::size_t k = 50 * (b - 1); k < 50 * b; ++k) prev += h.steps[k].loss.total;
        for (std::size_t k = 50 * b; k < 50 * (b + 1); ++k) cur += h.steps[k].loss.total;
        blocks_fall = blocks_fall && cur < prev;
    }
    detail_line("loss trend, steps 1-200: sliding 50-step mean rises " + std::to_string(rises) + " of " +
                std::to_string(avg.size() - 1) + " times; 50-step block means " + blocks +
                (blocks_fall ? " (decreasing)" : " (not decreasing)"));
}

void criterion_toy_training(const fs::path &root) {
    const fs::path train_dir = root / "train", val_dir = root / "val";
    write_toy_split(train_dir, kToyTrainPairs, 1);
    write_toy_split(val_dir, kToyValPairs, 2);
    const auto val = load_dataset(val_dir.string());
    MetricAccumulator zero;
    std::size_t occluded_pixels = 0;
    for (const auto &s : val) {
        zero.add(FlowField(s.flow->height(), s.flow->width()), *s.flow, &*s.occlusion);
        for (float v : s.occlusion->vec()) occluded_pixels += v > 0.5f;
    }
    const double baseline = zero.report().aee_all;
    detail_line(std::to_string(kToyTrainPairs) + " training pairs, " + std::to_string(kToyValPairs) +
                " validation pairs (64x64, " + std::to_string(kToySprites) + " sprites, |flow| <= 4), " +
                std::to_string(occluded_pixels) + " occluded validation pixels");

    TrainConfig cfg;
    cfg.train_dir = train_dir.string();
    cfg.val_dir = val_dir.string();
    cfg.out_dir = (root / "run").string();
    cfg.val_interval = 100;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = train(cfg);
    const double minutes = seconds_since(t0) / 60.0;

    double stage1 = -1.0, final_aee = -1.0;
    std::string curve;
    for (const auto &v : r.history.validation) {
        if (v.step == cfg.stage1_steps) stage1 = v.aee;
        if (v.step == cfg.total_steps()) final_aee = v.aee;
        if (v.step % 500 == 0) curve += (curve.empty() ? "" : ", ") + std::to_string(v.step) + ":" + fmt("%.3f", v.aee);
    }
    const double fraction = final_aee / baseline;
    const double stage2_change = (final_aee - stage1) / stage1;
    detail_line("validation AEE by step " + curve);
    detail_line("zero-flow baseline " + fmt("%.4f", baseline) + ", final " + fmt("%.4f", final_aee) + " = " +
                fmt("%.1f%% of baseline", 100.0 * fraction));
    detail_line("stage 2 AEE change " + fmt("%+.2f%%", 100.0 * stage2_change) + " (" + fmt("%.4f", stage1) + " -> " +
                fmt("%.4f", final_aee) + ")");
    detail_line("runtime " + fmt("%.1f min", minutes) + " (limit 30 min)");
    loss_trend_note(r.history);

    const bool ok_abs = final_aee >= 0.0 && final_aee < kToyAee;
    const bool ok_rel = fraction < kToyBaselineFraction;
    const bool ok_stage2 = stage1 > 0.0 && stage2_change <= kStage2Slack && final_aee < stage1;
    const bool ok_time = minutes <= kToyMinutes;
    std::string summary = "AEE " + fmt("%.3f", final_aee) + (ok_abs ? " < 1.5" : " >= 1.5") + ", " +
                          fmt("%.1f%% of baseline", 100.0 * fraction) + (ok_rel ? " (< 30%)" : " (needs < 30%)") +
                          ", stage 2 " + (ok_stage2 ? "ok" : "regressed") + ", " + fmt("%.1f min", minutes);
    verdict(7, "toy end-to-end training", ok_abs && ok_rel && ok_stage2 && ok_time, summary);
}

std::vector<float> all_weights(const FlowNetwork<float> &net) {
    std::vector<float> out;
    for (const auto &layer : net.layers()) {
        out.insert(out.end(), layer.weight.value.vec().begin(), layer.weight.value.vec().end());
        out.insert(out.end(), layer.bias.value.vec().begin(), layer.bias.value.vec().end());
    }
    return out;
}

void criterion_bit_exact(const fs::path &root) {
    FlowField flow(37, 53);
    const auto noise = oracle::random({1, 2, 37, 53}, 3, -40.0, 40.0).cast<float>();
    flow.tensor() = noise;
    flow.u(0, 0) = -0.0f;
    flow.v(1, 1) = 1e-30f;
    const fs::path flo = root / "roundtrip.flo";
    write_flo(flow, flo.string());
    const FlowField back = read_flo(flo.string());
    bool flo_ok = back.height() == flow.height() && back.width() == flow.width();
    for (std::size_t i = 0; flo_ok && i < noise.size(); ++i)
        flo_ok = std::bit_cast<std::uint32_t>(back.tensor()[i]) == std::bit_cast<std::uint32_t>(flow.tensor()[i]);

    TrainConfig c;
    c.train_dir = (root / "train").string();
    if (!fs::exists(c.train_dir)) write_toy_split(c.train_dir, 8, 1);
    c.stage1_steps = 1;
    c.stage2_steps = 1;
    c.val_interval = 0;
    c.checkpoint_interval = 1;
    c.out_dir = (root / "resume_full").string();
    const TrainResult full = train(c);
    TrainConfig rc = c;
    rc.out_dir = (root / "resume_part").string();
    rc.resume = (fs::path(c.out_dir) / "step_000001.duf").string();
    const TrainResult resumed = train(rc);
    bool resume_ok = resumed.adam.step == full.adam.step && all_weights(resumed.net) == all_weights(full.net);
    for (std::size_t k = 0; resume_ok && k < full.adam.m.size(); ++k)
        resume_ok = resumed.adam.m[k].vec() == full.adam.m[k].vec() && resumed.adam.v[k].vec() == full.adam.v[k].vec();
    resume_ok = resume_ok && resumed.history.steps.size() == 1 &&
                resumed.history.steps[0].loss.total == full.history.steps[1].loss.total;
    verdict(8, "bit-exact I/O", flo_ok && resume_ok,
            std::string(".flo round-trip ") + (flo_ok ? "identical" : "differs") + ", resumed step 2 " +
                (resume_ok ? "bit-identical (weights, moments, loss)" : "differs"));
}

void criterion_declared() {
    std::printf("[NOT REPRODUCIBLE] 9 benchmark tables: the KITTI AEE / F1-all figures need KITTI-scale training and "
                "the benchmark server; action-recognition accuracy is out of scope. AEE and F1-all are checked by "
                "worked examples in the unit tests instead.\n");
}

void guarded(const std::string &name, int id, const std::function<void()> &fn) {
    try {
        fn();
    } catch (const std::exception &e) {
        verdict(id, name, false, std::string("threw: ") + e.what());
    }
}

}  // namespace

int main() {
    const fs::path root = fs::temp_directory_path() / ("duflow_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);

    guarded("gradient oracle suite", 1, criterion_gradients);
    guarded("warp oracle", 2, criterion_warp);
    guarded("occlusion check on ground truth", 3, criterion_occlusion);
    guarded("census illumination robustness", 4, criterion_census);
    guarded("degridding", 5, criterion_receptive_field);
    guarded("parameter ratio", 6, criterion_parameters);
    guarded("bit-exact I/O", 8, [&] { criterion_bit_exact(root); });
    guarded("toy end-to-end training", 7, [&] { criterion_toy_training(root); });
    criterion_declared();

    fs::remove_all(root);
    std::printf("%d criteria failed\n", failures);
    return failures;
}
