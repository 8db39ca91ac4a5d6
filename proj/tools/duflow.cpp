// duflow command line: gen-data, train, eval, viz, check-grad, info.
// Results go to stdout as key=value lines; diagnostics go to stderr.
// Exit codes: 0 success, 1 user error, 2 internal error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "duflow/duflow.hpp"

namespace fs = std::filesystem;
using namespace duflow;

namespace {

struct UserError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

bool is_user_error(ErrorCode c) {
    switch (c) {
        case ErrorCode::BadMagic:
        case ErrorCode::Truncated:
        case ErrorCode::BadDims:
        case ErrorCode::Io:
        case ErrorCode::Config:
        case ErrorCode::IndivisibleDims:
        case ErrorCode::InvalidArgument:
        case ErrorCode::ShapeMismatch:
        case ErrorCode::MaskEmpty:
            return true;
        default:
            return false;
    }
}

void print_kv(const std::string &key, double value) { std::printf("%s=%.6f\n", key.c_str(), value); }

void print_metrics(const MetricReport &r) {
    print_kv("aee_all", r.aee_all);
    print_kv("aee_noc", r.aee_noc);
    print_kv("f1_all", r.f1_all);
    if (r.occl_iou) print_kv("occl_iou", *r.occl_iou);
}

struct GenDataArgs {
    std::string out;
    std::size_t count = 0;
    std::uint64_t seed = 0;
    int height = 64, width = 64;
    int sprites = 0;
    double max_displacement = 4.0;
    int sprite_min = 8, sprite_max = 20;
    std::string background = "noise";
    bool augment = false;
};

int run_gen_data(const GenDataArgs &a) {
    static const std::map<std::string, Background> kBackgrounds = {
        {"noise", Background::SmoothNoise}, {"checker", Background::Checker}, {"gradient", Background::Gradient}};
    auto bg = kBackgrounds.find(a.background);
    if (bg == kBackgrounds.end()) throw UserError("unknown background '" + a.background + "' (noise, checker, gradient)");
    fs::create_directories(a.out);
    for (std::size_t i = 0; i < a.count; ++i) {
        SceneSpec spec;
        spec.height = a.height;
        spec.width = a.width;
        spec.background = bg->second;
        spec.n_sprites = a.sprites;
        spec.max_displacement = a.max_displacement;
        spec.sprite_min = a.sprite_min;
        spec.sprite_max = a.sprite_max;
        spec.seed = derive_seed(a.seed, i);
        Sample s = generate_pair(spec);
        if (a.augment) {
            AugmentParams ap;
            ap.seed = derive_seed(a.seed ^ 0x6a09e667f3bcc908ULL, i);
            s = augment(std::move(s), ap);
        }
        write_sample(a.out, i, s);
    }
    std::printf("count=%zu\n", a.count);
    std::printf("out=%s\n", a.out.c_str());
    return 0;
}

int run_train(const std::string &config_path, const std::string &out, const std::string &resume, bool quiet) {
    TrainConfig cfg = load_train_config(config_path);
    if (!out.empty()) cfg.out_dir = out;
    if (!resume.empty()) cfg.resume = resume;
    if (cfg.out_dir.empty()) throw UserError("no output directory: pass --out or set out_dir in the config");
    TrainResult r = train(cfg, quiet ? nullptr : &std::cerr);
    std::printf("steps=%lld\n", static_cast<long long>(r.adam.step));
    if (!r.history.steps.empty()) print_kv("final_loss", r.history.steps.back().loss.total);
    if (!r.history.validation.empty()) print_kv("val_aee", r.history.validation.back().aee);
    std::printf("checkpoint=%s\n", (fs::path(cfg.out_dir) / "final.duf").string().c_str());
    return 0;
}

int run_eval(const std::string &checkpoint, const std::string &pred_dir, const std::string &data_dir, bool occlusion) {
    if (checkpoint.empty() == pred_dir.empty()) throw UserError("pass exactly one of --checkpoint or --pred");
    const auto entries = list_dataset(data_dir);
    std::vector<LoadedSample> samples;
    for (const auto &e : entries) samples.push_back(load_sample(e));
    if (!checkpoint.empty()) {
        FlowNetwork<float> net = load_network<float>(checkpoint);
        EvalOptions opt;
        opt.occlusion = occlusion;
        print_metrics(evaluate(net, samples, opt));
        return 0;
    }
    MetricAccumulator acc;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!samples[i].flow) throw UserError("sample " + entries[i].img1 + " has no ground-truth flow");
        const std::string stem = fs::path(entries[i].img1).filename().string();
        const std::string base = stem.substr(0, stem.size() - std::string("_img1.ppm").size());
        const FlowField pred = read_flo((fs::path(pred_dir) / (base + "_flow.flo")).string());
        acc.add(pred, *samples[i].flow, samples[i].occlusion ? &*samples[i].occlusion : nullptr);
    }
    print_metrics(acc.report());
    return 0;
}

int run_viz(const std::string &flo, const std::string &out, std::optional<double> max_flow) {
    const FlowField f = read_flo(flo);
    write_pnm(flow_to_color(f, max_flow), out);
    std::printf("out=%s\n", out.c_str());
    return 0;
}

int run_check_grad(std::uint64_t seed) {
    bool ok = true;
    for (const auto &r : run_gradient_suite(seed)) {
        std::printf("%s=%.3e\n", r.name.c_str(), r.max_rel_error);
        if (!r.pass()) {
            ok = false;
            std::cerr << r.name << ": relative error " << r.max_rel_error << " exceeds " << r.tolerance << "\n";
        }
        if (r.one_sided)
            std::cerr << r.name << ": " << r.one_sided << " of " << r.checked
                      << " entries matched a one-sided difference (stencil crossed a kink)\n";
    }
    std::printf("status=%s\n", ok ? "pass" : "fail");
    return ok ? 0 : 2;
}

int run_info(const std::string &checkpoint) {
    FlowNetwork<float> net = load_network<float>(checkpoint);
    std::printf("parameters=%zu\n", net.parameter_count());
    std::printf("width_multiplier=%g\n", net.config().width_multiplier);
    std::printf("layers=%zu\n", net.layers().size());
    for (const auto &l : net.layers()) {
        std::printf("layer=%s kernel=%d stride=%d dilation=%d in=%d out=%d dense=%d rgb=%d params=%zu\n",
                    l.spec.name.c_str(), l.spec.kernel, l.spec.stride, l.spec.dilation, l.in_channels,
                    l.spec.out_channels, l.spec.takes_dense_input ? 1 : 0, l.spec.takes_rgb_route ? 1 : 0,
                    l.weight.value.size() + l.bias.value.size());
    }
    return 0;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"Unsupervised optical flow with a dilated dense estimator"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto *gen_cmd = app.add_subcommand("gen-data", "Write synthetic frame pairs with ground truth");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--count", gen.count, "Number of pairs")->required();
    gen_cmd->add_option("--seed", gen.seed, "Base seed");
    gen_cmd->add_option("--height", gen.height, "Frame height")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--width", gen.width, "Frame width")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--sprites", gen.sprites, "Moving sprites per scene")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--max-displacement", gen.max_displacement, "Largest motion in pixels");
    gen_cmd->add_option("--sprite-min", gen.sprite_min, "Smallest sprite extent");
    gen_cmd->add_option("--sprite-max", gen.sprite_max, "Largest sprite extent");
    gen_cmd->add_option("--background", gen.background, "noise, checker or gradient");
    gen_cmd->add_flag("--augment", gen.augment, "Apply random geometric and photometric augmentation");

    std::string config, train_out, resume;
    bool quiet = false;
    auto *train_cmd = app.add_subcommand("train", "Run two-stage unsupervised training");
    train_cmd->add_option("--config", config, "key = value config file")->required();
    train_cmd->add_option("--out", train_out, "Output directory (overrides out_dir)");
    train_cmd->add_option("--resume", resume, "Checkpoint to resume from");
    train_cmd->add_flag("--quiet", quiet, "Do not echo the history to stderr");

    std::string checkpoint, pred_dir, data_dir;
    bool eval_occlusion = false;
    auto *eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
    eval_cmd->add_option("--checkpoint", checkpoint, "Network checkpoint");
    eval_cmd->add_option("--pred", pred_dir, "Directory of NNNNN_flow.flo predictions");
    eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    eval_cmd->add_flag("--occlusion", eval_occlusion, "Also score predicted occlusion (needs --checkpoint)");

    std::string flo, viz_out;
    std::optional<double> max_flow;
    auto *viz_cmd = app.add_subcommand("viz", "Color-code a .flo file");
    viz_cmd->add_option("--flo", flo, "Input flow")->required();
    viz_cmd->add_option("--out", viz_out, "Output .ppm image")->required();
    viz_cmd->add_option("--max-flow", max_flow, "Saturation magnitude (default: 99th percentile)");

    std::uint64_t grad_seed = 1;
    auto *grad_cmd = app.add_subcommand("check-grad", "Finite-difference check of every differentiable op");
    grad_cmd->add_option("--seed", grad_seed, "Seed for the random test points");

    std::string info_ckpt;
    auto *info_cmd = app.add_subcommand("info", "Describe a checkpoint");
    info_cmd->add_option("--checkpoint", info_ckpt, "Network checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen_cmd) return run_gen_data(gen);
        if (*train_cmd) return run_train(config, train_out, resume, quiet);
        if (*eval_cmd) return run_eval(checkpoint, pred_dir, data_dir, eval_occlusion);
        if (*viz_cmd) return run_viz(flo, viz_out, max_flow);
        if (*grad_cmd) return run_check_grad(grad_seed);
        if (*info_cmd) return run_info(info_ckpt);
    } catch (const UserError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return is_user_error(e.code()) ? 1 : 2;
    } catch (const fs::filesystem_error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception &e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
