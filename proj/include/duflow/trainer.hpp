#pragma once

// Two-stage unsupervised training loop, inference and evaluation helpers.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "duflow/checkpoint.hpp"
#include "duflow/error.hpp"
#include "duflow/flow_io.hpp"
#include "duflow/graph.hpp"
#include "duflow/loss.hpp"
#include "duflow/network.hpp"
#include "duflow/ops.hpp"
#include "duflow/optim.hpp"
#include "duflow/scene.hpp"
#include "duflow/warp.hpp"

namespace duflow {

struct TrainConfig {
    std::string train_dir;
    std::string val_dir;  // optional
    std::string out_dir;  // optional; history, periodic and final checkpoints
    std::string resume;   // optional checkpoint to continue from

    int stage1_steps = 1500;  // occlusion handling off
    int stage2_steps = 500;   // occlusion handling on
    int batch_size = 4;
    AdamConfig adam;
    double clip_norm = 10.0;
    double width_multiplier = 0.25;
    double leaky_slope = 0.1;
    LossWeights weights;
    LossParams loss;
    bool augment = false;
    std::uint64_t seed = 1;
    int val_interval = 100;
    int checkpoint_interval = 0;  // 0: final checkpoint only

    int total_steps() const { return stage1_steps + stage2_steps; }
};

namespace detail {

template <typename V>
void parse_number(const std::string &key, const std::string &text, V &out) {
    V v{};
    const char *end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end)
        throw Error(ErrorCode::Config, "bad value for " + key + ": '" + text + "'");
    out = v;
}

inline void parse_bool(const std::string &key, const std::string &text, bool &out) {
    if (text == "true" || text == "1") out = true;
    else if (text == "false" || text == "0") out = false;
    else throw Error(ErrorCode::Config, "bad value for " + key + ": '" + text + "' (expected true or false)");
}

inline std::string trim(const std::string &s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::map<std::string, std::function<void(const std::string &)>> config_setters(TrainConfig &c) {
    using S = const std::string &;
    return {
        {"train_dir", [&c](S v) { c.train_dir = v; }},
        {"val_dir", [&c](S v) { c.val_dir = v; }},
        {"out_dir", [&c](S v) { c.out_dir = v; }},
        {"resume", [&c](S v) { c.resume = v; }},
        {"stage1_steps", [&c](S v) { parse_number("stage1_steps", v, c.stage1_steps); }},
        {"stage2_steps", [&c](S v) { parse_number("stage2_steps", v, c.stage2_steps); }},
        {"batch_size", [&c](S v) { parse_number("batch_size", v, c.batch_size); }},
        {"learning_rate", [&c](S v) { parse_number("learning_rate", v, c.adam.learning_rate); }},
        {"beta1", [&c](S v) { parse_number("beta1", v, c.adam.beta1); }},
        {"beta2", [&c](S v) { parse_number("beta2", v, c.adam.beta2); }},
        {"adam_eps", [&c](S v) { parse_number("adam_eps", v, c.adam.eps); }},
        {"clip_norm", [&c](S v) { parse_number("clip_norm", v, c.clip_norm); }},
        {"width_multiplier", [&c](S v) { parse_number("width_multiplier", v, c.width_multiplier); }},
        {"leaky_slope", [&c](S v) { parse_number("leaky_slope", v, c.leaky_slope); }},
        {"weight_data", [&c](S v) { parse_number("weight_data", v, c.weights.data); }},
        {"weight_smooth", [&c](S v) { parse_number("weight_smooth", v, c.weights.smooth); }},
        {"weight_fb", [&c](S v) { parse_number("weight_fb", v, c.weights.fb); }},
        {"charbonnier_alpha", [&c](S v) { parse_number("charbonnier_alpha", v, c.loss.charbonnier.alpha); }},
        {"charbonnier_eps", [&c](S v) { parse_number("charbonnier_eps", v, c.loss.charbonnier.eps); }},
        {"occlusion_alpha1", [&c](S v) { parse_number("occlusion_alpha1", v, c.loss.occlusion.alpha1); }},
        {"occlusion_alpha2", [&c](S v) { parse_number("occlusion_alpha2", v, c.loss.occlusion.alpha2); }},
        {"augment", [&c](S v) { parse_bool("augment", v, c.augment); }},
        {"seed", [&c](S v) { parse_number("seed", v, c.seed); }},
        {"val_interval", [&c](S v) { parse_number("val_interval", v, c.val_interval); }},
        {"checkpoint_interval", [&c](S v) { parse_number("checkpoint_interval", v, c.checkpoint_interval); }},
    };
}

}  // namespace detail

inline std::vector<std::string> train_config_keys() {
    TrainConfig dummy;
    std::vector<std::string> keys;
    for (const auto &kv : detail::config_setters(dummy)) keys.push_back(kv.first);
    return keys;
}

inline void validate(const TrainConfig &c) {
    auto bad = [](const std::string &m) { throw Error(ErrorCode::Config, m); };
    if (c.stage1_steps < 0 || c.stage2_steps < 0) bad("stage step counts must be >= 0");
    if (c.batch_size < 1) bad("batch_size must be >= 1");
    if (!(c.adam.learning_rate > 0.0)) bad("learning_rate must be > 0");
    if (!(c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0) || !(c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0))
        bad("beta1 and beta2 must lie in [0, 1)");
    if (!(c.adam.eps > 0.0)) bad("adam_eps must be > 0");
    if (c.clip_norm < 0.0) bad("clip_norm must be >= 0");
    if (!(c.width_multiplier > 0.0)) bad("width_multiplier must be > 0");
    if (c.val_interval < 0 || c.checkpoint_interval < 0) bad("intervals must be >= 0");
    try {
        validate(c.weights);
        validate(c.loss.charbonnier);
        validate(c.loss.occlusion);
    } catch (const Error &e) {
        bad(e.what());
    }
}

/// Flat `key = value` lines; `#` starts a comment. Unknown keys are rejected.
inline TrainConfig parse_train_config(const std::string &text, TrainConfig base = {}) {
    auto setters = detail::config_setters(base);
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorCode::Config, "line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end()) {
            std::string known;
            for (const auto &kv : setters) known += (known.empty() ? "" : ", ") + kv.first;
            throw Error(ErrorCode::Config, "line " + std::to_string(lineno) + ": unknown key '" + key +
                                               "'; valid keys: " + known);
        }
        it->second(value);
    }
    validate(base);
    return base;
}

inline TrainConfig load_train_config(const std::string &path, TrainConfig base = {}) {
    return parse_train_config(detail::read_file(path), std::move(base));
}

// ---------------------------------------------------------------------------

/// Network weights plus optimizer moments in one container.
template <typename T>
void save_training_checkpoint(const std::string &path, const FlowNetwork<T> &net, const AdamState<T> &adam) {
    auto entries = network_entries(net);
    entries.push_back({"adam/step", {1}, {static_cast<float>(adam.step)}});
    const auto params = net.parameters();
    for (std::size_t k = 0; k < adam.m.size(); ++k) {
        entries.push_back(to_named("adam/m/" + params[k]->name, adam.m[k]));
        entries.push_back(to_named("adam/v/" + params[k]->name, adam.v[k]));
    }
    save_checkpoint(path, entries);
}

template <typename T>
struct TrainingState {
    FlowNetwork<T> net;
    AdamState<T> adam;
};

template <typename T>
TrainingState<T> load_training_checkpoint(const std::string &path) {
    const auto entries = load_checkpoint(path);
    TrainingState<T> s{network_from_entries<T>(entries), {}};
    std::map<std::string, const NamedTensor *> by_name;
    for (const auto &e : entries) by_name[e.name] = &e;
    if (auto it = by_name.find("adam/step"); it != by_name.end() && !it->second->data.empty()) {
        s.adam.step = static_cast<std::int64_t>(it->second->data[0]);
        if (s.adam.step > 0) {
            for (const auto *p : s.net.parameters()) {
                auto m = by_name.find("adam/m/" + p->name);
                auto v = by_name.find("adam/v/" + p->name);
                if (m == by_name.end() || v == by_name.end())
                    throw Error(ErrorCode::BadDims, path + ": optimizer state lacks " + p->name);
                s.adam.m.push_back(from_named<T>(*m->second));
                s.adam.v.push_back(from_named<T>(*v->second));
                require_same_shape(s.adam.m.back().shape(), p->value.shape(), "optimizer moment");
                require_same_shape(s.adam.v.back().shape(), p->value.shape(), "optimizer moment");
            }
        }
    }
    return s;
}

// ---------------------------------------------------------------------------

/// Forward and backward flow in one batched pass; accumulates parameter
/// gradients (callers zero them first) and returns the loss breakdown.
template <typename T>
LossReport bidirectional_step(FlowNetwork<T> &net, const Tensor4<T> &frame1, const Tensor4<T> &frame2,
                              const LossWeights &weights, const LossParams &params, bool occlusion_enabled) {
    require_same_shape(frame1.shape(), frame2.shape(), "bidirectional_step frames");
    const int b = frame1.n();
    Graph<T> g;
    Var a = g.constant(stack_batch<T>({frame1, frame2}));
    Var c = g.constant(stack_batch<T>({frame2, frame1}));
    Var flow = forward(g, net, a, c).flow;
    Var mf = slice_batch(g, flow, 0, b);
    Var mb = slice_batch(g, flow, b, b);
    Var i1 = g.constant(frame1);
    Var i2 = g.constant(frame2);
    TotalLoss<T> loss = total_loss(g, i1, i2, mf, mb, weights, params, occlusion_enabled);
    g.backward(loss.total);
    return loss.report;
}

/// Inference only: (N, 2, H, W) flow from frame1 to frame2.
template <typename T>
Tensor4<T> predict(FlowNetwork<T> &net, const Tensor4<T> &frame1, const Tensor4<T> &frame2) {
    Graph<T> g;
    Var f = forward(g, net, g.constant(frame1), g.constant(frame2)).flow;
    return g.value(f);
}

inline FlowField flow_item(const Tensor4<float> &flows, int n) { return FlowField(flows.item_at(n)); }

/// Predicted occlusion for a pair: forward-backward flags united with
/// pixels whose forward target leaves the image.
inline Tensor4<float> predicted_occlusion(const Tensor4<float> &mf, const Tensor4<float> &mb,
                                          const OcclusionParams &params) {
    OcclusionMask<float> m = occlusion_masks(mf, mb, params);
    Tensor4<float> valid = warp_values(mb, mf).valid;
    Tensor4<float> out = m.forward;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (m.forward[i] > 0.5f || valid[i] < 0.5f) ? 1.0f : 0.0f;
    return out;
}

struct EvalOptions {
    bool occlusion = false;  // also score predicted occlusion against ground truth
    OcclusionParams occlusion_params;
};

inline MetricReport evaluate(FlowNetwork<float> &net, const std::vector<LoadedSample> &samples,
                             const EvalOptions &opt = {}) {
    MetricAccumulator acc;
    for (const auto &s : samples) {
        if (!s.flow) throw Error(ErrorCode::InvalidArgument, "evaluation sample lacks ground-truth flow");
        Tensor4<float> mf = predict(net, s.pair.first, s.pair.second);
        acc.add(flow_item(mf, 0), *s.flow, s.occlusion ? &*s.occlusion : nullptr);
        if (opt.occlusion && s.occlusion) {
            Tensor4<float> mb = predict(net, s.pair.second, s.pair.first);
            acc.add_iou(occlusion_iou(predicted_occlusion(mf, mb, opt.occlusion_params), *s.occlusion));
        }
    }
    return acc.report();
}

// ---------------------------------------------------------------------------

struct StepRecord {
    std::int64_t step = 0;  // 1-based index of the completed update
    int stage = 1;
    LossReport loss;
    double grad_norm = 0.0;
};

struct ValidationRecord {
    std::int64_t step = 0;
    double aee = 0.0;
};

struct TrainHistory {
    std::vector<StepRecord> steps;
    std::vector<ValidationRecord> validation;
};

inline std::string format_step(const StepRecord &r) {
    std::ostringstream o;
    o.precision(6);
    o << "step=" << r.step << " stage=" << r.stage << " total=" << r.loss.total << " data_f=" << r.loss.data_f
      << " data_b=" << r.loss.data_b << " smooth=" << r.loss.smooth << " fb=" << r.loss.fb
      << " occ_f=" << r.loss.occluded_fraction_f << " occ_b=" << r.loss.occluded_fraction_b
      << " grad_norm=" << r.grad_norm;
    if (r.loss.empty_mask_warning) o << " warning=empty_mask";
    return o.str();
}

inline std::string format_validation(const ValidationRecord &r) {
    std::ostringstream o;
    o.precision(6);
    o << "step=" << r.step << " val_aee=" << r.aee;
    return o.str();
}

/// Sample indices used at a given 0-based step: an epoch-wise permutation
/// derived from (seed, epoch), so any step can be reproduced in isolation.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, int batch, std::size_t n) {
    std::vector<std::size_t> out;
    std::int64_t cached_epoch = -1;
    std::vector<std::size_t> perm(n);
    for (int j = 0; j < batch; ++j) {
        const std::uint64_t i = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(batch) + j;
        const auto epoch = static_cast<std::int64_t>(i / n);
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            detail::Rng rng(derive_seed(seed ^ 0x5bd1e995ULL, static_cast<std::uint64_t>(epoch)));
            for (std::size_t k = n; k > 1; --k) std::swap(perm[k - 1], perm[rng.bits() % k]);
            cached_epoch = epoch;
        }
        out.push_back(perm[i % n]);
    }
    return out;
}

struct TrainResult {
    FlowNetwork<float> net;
    AdamState<float> adam;
    TrainHistory history;
};

/// `log` receives one line per step and per validation (the same text as
/// history.log); nullptr keeps it quiet.
inline TrainResult train(const TrainConfig &cfg, std::ostream *log = nullptr) {
    validate(cfg);
    if (cfg.train_dir.empty()) throw Error(ErrorCode::Config, "train_dir is required");
    const std::vector<LoadedSample> data = load_dataset(cfg.train_dir);
    std::vector<LoadedSample> val;
    if (!cfg.val_dir.empty()) val = load_dataset(cfg.val_dir);
    const Shape4 frame_shape = data.front().pair.first.shape();
    for (const auto &s : data)
        require_same_shape(s.pair.first.shape(), frame_shape, "training frames");

    TrainResult result{build_network<float>(NetworkConfig{cfg.width_multiplier, cfg.leaky_slope}, cfg.seed), {}, {}};
    if (!cfg.resume.empty()) {
        TrainingState<float> st = load_training_checkpoint<float>(cfg.resume);
        result.net = std::move(st.net);
        result.adam = std::move(st.adam);
    }

    std::ofstream history;
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        history.open(std::filesystem::path(cfg.out_dir) / "history.log",
                     cfg.resume.empty() ? std::ios::trunc : std::ios::app);
        if (!history) throw Error(ErrorCode::Io, "cannot write history in " + cfg.out_dir);
    }
    auto emit = [&](const std::string &line) {
        if (history) history << line << '\n' << std::flush;
        if (log) *log << line << '\n' << std::flush;
    };
    auto checkpoint_path = [&](const std::string &name) {
        return (std::filesystem::path(cfg.out_dir) / name).string();
    };

    auto params = result.net.parameters();
    const std::int64_t total = cfg.total_steps();
    for (std::int64_t step = result.adam.step; step < total; ++step) {
        const int stage = step < cfg.stage1_steps ? 1 : 2;
        std::vector<Tensor4<float>> f1, f2;
        const auto idx = batch_indices(cfg.seed, step, cfg.batch_size, data.size());
        for (int j = 0; j < cfg.batch_size; ++j) {
            const auto &s = data[idx[static_cast<std::size_t>(j)]];
            if (cfg.augment) {
                Sample raw{s.pair, {}, std::nullopt};
                raw.gt.flow = FlowField(frame_shape.h, frame_shape.w);
                raw.gt.occlusion = Tensor4<float>(Shape4{1, 1, frame_shape.h, frame_shape.w});
                AugmentParams ap;
                ap.seed = derive_seed(cfg.seed ^ 0xa0761d64ULL,
                                      static_cast<std::uint64_t>(step) * cfg.batch_size + static_cast<std::uint64_t>(j));
                Sample aug = augment(std::move(raw), ap);
                f1.push_back(std::move(aug.pair.first));
                f2.push_back(std::move(aug.pair.second));
            } else {
                f1.push_back(s.pair.first);
                f2.push_back(s.pair.second);
            }
        }
        result.net.zero_grad();
        StepRecord rec;
        rec.stage = stage;
        rec.loss = bidirectional_step(result.net, stack_batch(f1), stack_batch(f2), cfg.weights, cfg.loss, stage == 2);
        if (!std::isfinite(rec.loss.total))
            throw Error(ErrorCode::NonFinite, "non-finite loss at step " + std::to_string(step + 1));
        rec.grad_norm = clip_global_norm<float>(params, cfg.clip_norm);
        adam_step<float>(params, result.adam, cfg.adam);
        rec.step = result.adam.step;
        emit(format_step(rec));
        result.history.steps.push_back(rec);

        const bool last = rec.step == total;
        if (!val.empty() && ((cfg.val_interval > 0 && rec.step % cfg.val_interval == 0) || last)) {
            ValidationRecord v{rec.step, evaluate(result.net, val).aee_all};
            emit(format_validation(v));
            result.history.validation.push_back(v);
        }
        if (!cfg.out_dir.empty() && cfg.checkpoint_interval > 0 && rec.step % cfg.checkpoint_interval == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "step_%06lld.duf", static_cast<long long>(rec.step));
            save_training_checkpoint(checkpoint_path(name), result.net, result.adam);
        }
    }
    if (!cfg.out_dir.empty()) save_training_checkpoint(checkpoint_path("final.duf"), result.net, result.adam);
    return result;
}

}  // namespace duflow
