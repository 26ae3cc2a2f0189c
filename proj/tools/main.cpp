// Command-line front end: one binary, subcommand per workflow. Exit codes:
// 0 success, 1 runtime failure, 2 usage or config errors.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "reqvae/config.hpp"
#include "reqvae/enhancer.hpp"
#include "reqvae/metrics.hpp"
#include "reqvae/report.hpp"
#include "reqvae/vae_trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace reqvae;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2;

json read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CLI::ValidationError("config", "cannot read config file '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw CLI::ValidationError("config", path + " is not valid JSON: " + e.what());
    }
    return j;
}

/// Extra CLI tokens become dotted-path overrides: --a.b=v or a.b=v.
std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
    std::vector<std::string> out;
    for (std::string tok : extras) {
        while (tok.rfind("-", 0) == 0) tok.erase(0, 1);
        if (tok.find('=') == std::string::npos)
            throw CLI::ValidationError("overrides", "expected key=value, got '" + tok + "'");
        out.push_back(tok);
    }
    return out;
}

std::string resolve_out_dir(std::string dir) {
    if (dir.empty()) throw CLI::ValidationError("out", "no output directory configured");
    fs::path p(dir);
    const char* root = std::getenv("REQVAE_OUT_ROOT");
    if (p.is_relative() && root && *root) p = fs::path(root) / p;
    return p.string();
}

int report_config_errors(const std::vector<std::string>& errors) {
    std::cerr << "config errors:\n";
    for (const auto& e : errors) std::cerr << "  " << e << "\n";
    return kUsage;
}

json start_manifest(const std::string& command, const json& config, uint64_t seed) {
    return {{"command", command},
            {"config", config},
            {"seed", seed},
            {"config_hash", config_hash(config)},
            {"started", iso_timestamp_utc()},
            {"outputs", json::array()}};
}

void finish_manifest(json& manifest, const std::string& dir, const std::vector<std::string>& outputs) {
    manifest["finished"] = iso_timestamp_utc();
    for (const auto& o : outputs) manifest["outputs"].push_back(o);
    write_manifest(dir, manifest);
}

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::optional<uint64_t> seed;
};

json resolved_config(const CommonArgs& args, const std::vector<std::string>& extras) {
    json j = read_config_file(args.config_path);
    j = apply_overrides(j, collect_overrides(extras));
    if (args.seed) j["seed"] = *args.seed;
    if (!args.out_dir.empty()) j["out_dir"] = args.out_dir;
    return j;
}

int cmd_train_vae(const CommonArgs& args, const std::vector<std::string>& extras,
                  const std::string& resume) {
    json j = resolved_config(args, extras);
    TrainConfig cfg = TrainConfig::from_json(j);
    cfg.out_dir = resolve_out_dir(cfg.out_dir);
    j["out_dir"] = cfg.out_dir;
    if (auto errs = cfg.validate(); !errs.empty()) return report_config_errors(errs);

    DirLock lock(cfg.out_dir);
    json manifest = start_manifest("train-vae", j, cfg.seed);
    write_manifest(cfg.out_dir, manifest);

    TrainResult r = train_vae(cfg, resume, &std::cout);
    finish_manifest(manifest, cfg.out_dir, {r.checkpoint_path, r.metrics_path});
    std::cout << "checkpoint: " << r.checkpoint_path << "\n"
              << "final total loss: " << r.final_loss.total << "\n";
    return kOk;
}

struct EvalArgs {
    std::string checkpoint;
    std::string out_dir;
    std::string split = "val";
};

const std::vector<size_t>& pick_split(const SplitIndices& sp, const std::string& name) {
    if (name == "train") return sp.train;
    if (name == "val") return sp.val;
    if (name == "test") return sp.test;
    throw CLI::ValidationError("split", "unknown split '" + name + "'");
}

int cmd_eval_vae(const EvalArgs& args, const std::vector<std::string>& extras,
                 std::optional<uint64_t> seed) {
    LoadedVae loaded = load_vae_checkpoint(args.checkpoint);
    json j = apply_overrides(loaded.config_json, collect_overrides(extras));
    if (seed) j["seed"] = *seed;
    TrainConfig cfg = TrainConfig::from_json(j);
    cfg.out_dir = resolve_out_dir(args.out_dir);
    if (auto errs = cfg.validate(); !errs.empty()) return report_config_errors(errs);

    DirLock lock(cfg.out_dir);
    json manifest = start_manifest("eval-vae", j, cfg.seed);
    write_manifest(cfg.out_dir, manifest);

    Dataset data = build_dataset(cfg.data);
    SplitIndices sp = split(data.size(), cfg.data.split[0], cfg.data.split[1], cfg.data.split[2],
                            cfg.data.seed);
    const std::vector<size_t>& idx = pick_split(sp, args.split);
    if (idx.empty()) {
        std::cerr << "split '" << args.split << "' is empty under the config fractions\n";
        return kUsage;
    }
    std::unique_ptr<Teacher> teacher = build_teacher(cfg.teacher);
    TransformGroup group = cfg.transform_group();

    MetricsReport rep = evaluate_model(loaded.bundle->model, *teacher, data, idx, &group);
    rep.config_hash = config_hash(j);
    rep.seed = cfg.seed;
    const std::string report_path = (fs::path(cfg.out_dir) / "metrics_report.json").string();
    rep.save(report_path);
    const std::string table_path = (fs::path(cfg.out_dir) / "metrics_report.txt").string();
    std::ofstream(table_path) << rep.render_table();

    finish_manifest(manifest, cfg.out_dir, {report_path, table_path});
    std::cout << rep.render_table();
    return kOk;
}

int cmd_audit(const EvalArgs& args, const std::vector<std::string>& extras,
              std::optional<uint64_t> seed) {
    LoadedVae loaded = load_vae_checkpoint(args.checkpoint);
    json j = apply_overrides(loaded.config_json, collect_overrides(extras));
    if (seed) j["seed"] = *seed;
    TrainConfig cfg = TrainConfig::from_json(j);
    cfg.out_dir = resolve_out_dir(args.out_dir);
    if (auto errs = cfg.validate(); !errs.empty()) return report_config_errors(errs);

    DirLock lock(cfg.out_dir);
    json manifest = start_manifest("audit-equivariance", j, cfg.seed);
    write_manifest(cfg.out_dir, manifest);

    Dataset data = build_dataset(cfg.data);
    SplitIndices sp = split(data.size(), cfg.data.split[0], cfg.data.split[1], cfg.data.split[2],
                            cfg.data.seed);
    const std::vector<size_t>& idx = sp.val.empty() ? sp.train : sp.val;
    TransformGroup group = cfg.transform_group();
    group.validate(data.h, data.w, cfg.model.down_factor);

    constexpr size_t kBatch = 8;
    json rows = json::array();
    double score = 0.0;
    size_t weight = 0;
    for (size_t off = 0, batch_i = 0; off < idx.size(); off += kBatch, ++batch_i) {
        std::vector<Tensor> chunk;
        for (size_t i = off; i < std::min(off + kBatch, idx.size()); ++i)
            chunk.push_back(data.items[idx[i]]);
        ViolationReport rep = equivariance_violation(loaded.bundle->model, chunk, group);
        for (const auto& [name, v] : rep.per_transform)
            rows.push_back({{"transform", name}, {"batch", batch_i}, {"score", v}});
        score += rep.score * static_cast<double>(chunk.size());
        weight += chunk.size();
    }
    score /= static_cast<double>(weight);

    json out = {{"score", score}, {"rows", rows}, {"config_hash", config_hash(j)}, {"seed", cfg.seed}};
    const std::string audit_path = (fs::path(cfg.out_dir) / "audit.json").string();
    std::ofstream(audit_path) << out.dump(2) << "\n";
    finish_manifest(manifest, cfg.out_dir, {audit_path});
    std::cout << "equivariance violation: " << score << " over " << weight << " images\n";
    return kOk;
}

int cmd_ablate(const CommonArgs& args, const std::vector<std::string>& extras,
               const std::string& channels_csv) {
    json j = resolved_config(args, extras);
    TrainConfig cfg = TrainConfig::from_json(j);
    cfg.out_dir = resolve_out_dir(cfg.out_dir);
    j["out_dir"] = cfg.out_dir;

    std::vector<int64_t> channels;
    std::stringstream ss(channels_csv);
    for (std::string tok; std::getline(ss, tok, ',');) {
        if (!tok.empty()) channels.push_back(std::stoll(tok));
    }
    if (channels.empty()) {
        std::cerr << "no channel counts given\n";
        return kUsage;
    }
    if (auto errs = cfg.validate(); !errs.empty()) return report_config_errors(errs);

    DirLock lock(cfg.out_dir);
    json manifest = start_manifest("ablate-channels", j, cfg.seed);
    manifest["channels"] = channels;
    write_manifest(cfg.out_dir, manifest);

    std::vector<AblationRow> rows;
    const std::string table_path = (fs::path(cfg.out_dir) / "ablation.txt").string();
    const std::string rows_path = (fs::path(cfg.out_dir) / "ablation.json").string();
    auto persist = [&] {
        json jr = json::array();
        for (const AblationRow& r : rows)
            jr.push_back({{"channels", r.channels},
                          {"psnr", r.psnr},
                          {"ssim", r.ssim},
                          {"perceptual", r.perceptual},
                          {"ffd", r.ffd},
                          {"run_dir", r.run_dir}});
        std::ofstream(rows_path) << jr.dump(2) << "\n";
        std::ofstream(table_path) << render_ablation_table(rows);
    };
    try {
        ablation_harness(channels, cfg, rows, &std::cout);
    } catch (const std::exception& e) {
        persist();
        std::cerr << "ablation aborted after " << rows.size() << " of " << channels.size()
                  << " runs: " << e.what() << "\n";
        return kRuntime;
    }
    persist();
    write_ablation_plots(rows, cfg.out_dir);
    finish_manifest(manifest, cfg.out_dir, {rows_path, table_path});
    std::cout << render_ablation_table(rows);
    return kOk;
}

int cmd_train_enhancer(const CommonArgs& args, const std::vector<std::string>& extras) {
    json j = resolved_config(args, extras);
    EnhancerConfig cfg = EnhancerConfig::from_json(j);
    cfg.out_dir = resolve_out_dir(cfg.out_dir);
    j["out_dir"] = cfg.out_dir;
    if (auto errs = cfg.validate(); !errs.empty()) return report_config_errors(errs);

    DirLock lock(cfg.out_dir);
    json manifest = start_manifest("train-enhancer", j, cfg.seed);
    write_manifest(cfg.out_dir, manifest);

    EnhancerTrainResult r = train_enhancer(cfg, &std::cout);
    finish_manifest(manifest, cfg.out_dir, {r.checkpoint_path, r.metrics_path});
    std::cout << "checkpoint: " << r.checkpoint_path << "\n"
              << "latent fit: " << r.initial_latent_loss << " -> " << r.final_latent_loss << "\n";
    return kOk;
}

struct EnhanceArgs {
    std::string checkpoint, vae, clip, out_dir;
    int64_t steps = 8;
    uint64_t seed = 1;
};

int cmd_enhance(const EnhanceArgs& args) {
    LoadedEnhancer enh = load_enhancer_checkpoint(args.checkpoint);
    const std::string vae_path = args.vae.empty() ? enh.config.vae_checkpoint : args.vae;
    LoadedVae vae = load_vae_checkpoint(vae_path);
    if (vae.content_hash != enh.vae_hash) {
        std::cerr << "autoencoder at " << vae_path
                  << " does not match the one this enhancer was trained against\n";
        return kUsage;
    }

    CoarseRender clip;
    if (fs::exists(fs::path(args.clip) / "render.json")) {
        clip = load_render(args.clip);
    } else {
        SceneClip sc = load_clip(args.clip);
        clip.frames = std::move(sc.frames);
    }

    const std::string out_dir = resolve_out_dir(args.out_dir);
    DirLock lock(out_dir);
    json manifest = start_manifest("enhance", {{"checkpoint", args.checkpoint},
                                               {"vae", vae_path},
                                               {"clip", args.clip},
                                               {"steps", args.steps}},
                                   args.seed);
    write_manifest(out_dir, manifest);

    std::vector<Tensor> frames =
        enhance(*enh.bundle, vae.bundle->model, clip.frames, args.steps, args.seed);
    CoarseRender out;
    out.frames = std::move(frames);
    save_render(out_dir, out);
    finish_manifest(manifest, out_dir, {out_dir});
    std::cout << "enhanced " << out.frames.size() << " frames -> " << out_dir << "\n";
    return kOk;
}

int cmd_report(const std::string& dir, const std::string& out) {
    const std::string out_dir = out.empty() ? dir : resolve_out_dir(out);
    bool found = false;

    const fs::path metrics = fs::path(dir) / "metrics.jsonl";
    if (fs::exists(metrics)) {
        write_training_plots(metrics.string(), out_dir);
        found = true;
    }
    const fs::path ablation = fs::path(dir) / "ablation.json";
    if (fs::exists(ablation)) {
        std::ifstream in(ablation);
        json j;
        in >> j;
        std::vector<AblationRow> rows;
        for (const auto& r : j)
            rows.push_back({r.at("channels").get<int64_t>(), r.at("psnr").get<double>(),
                            r.at("ssim").get<double>(), r.at("perceptual").get<double>(),
                            r.at("ffd").get<double>(), r.value("run_dir", "")});
        write_ablation_plots(rows, out_dir);
        std::cout << render_ablation_table(rows);
        found = true;
    }
    const fs::path rep = fs::path(dir) / "metrics_report.json";
    if (fs::exists(rep)) {
        std::cout << MetricsReport::load(rep.string()).render_table();
        found = true;
    }
    if (!found) {
        std::cerr << dir << " holds no metrics.jsonl, ablation.json or metrics_report.json\n";
        return kUsage;
    }
    std::cout << "plots written to " << out_dir << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"representation-aligned equivariant VAE toolkit"};
    app.require_subcommand(1);

    CommonArgs train_args, ablate_args, enh_train_args;
    EvalArgs eval_args, audit_args;
    EnhanceArgs enhance_args;
    std::string resume, channels = "4,16,64", report_dir, report_out;
    std::optional<uint64_t> eval_seed, audit_seed;

    CLI::App* train = app.add_subcommand("train-vae", "train an autoencoder from a JSON config");
    train->add_option("config", train_args.config_path, "JSON config file")->required();
    train->add_option("--out", train_args.out_dir, "output directory (overrides config)");
    train->add_option("--seed", train_args.seed, "seed override");
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->allow_extras();

    CLI::App* eval = app.add_subcommand("eval-vae", "reconstruction metrics for a checkpoint");
    eval->add_option("--checkpoint", eval_args.checkpoint, "trained checkpoint")->required();
    eval->add_option("--out", eval_args.out_dir, "output directory")->required();
    eval->add_option("--split", eval_args.split, "train|val|test (default val)");
    eval->add_option("--seed", eval_seed, "seed override");
    eval->allow_extras();

    CLI::App* audit = app.add_subcommand("audit-equivariance", "latent equivariance violation audit");
    audit->add_option("--checkpoint", audit_args.checkpoint, "trained checkpoint")->required();
    audit->add_option("--out", audit_args.out_dir, "output directory")->required();
    audit->add_option("--seed", audit_seed, "seed override");
    audit->allow_extras();

    CLI::App* ablate = app.add_subcommand("ablate-channels", "train and compare latent widths");
    ablate->add_option("config", ablate_args.config_path, "JSON config file")->required();
    ablate->add_option("--channels", channels, "comma-separated latent channel counts");
    ablate->add_option("--out", ablate_args.out_dir, "output directory (overrides config)");
    ablate->add_option("--seed", ablate_args.seed, "seed override");
    ablate->allow_extras();

    CLI::App* etrain = app.add_subcommand("train-enhancer", "train the latent clip enhancer");
    etrain->add_option("config", enh_train_args.config_path, "JSON config file")->required();
    etrain->add_option("--out", enh_train_args.out_dir, "output directory (overrides config)");
    etrain->add_option("--seed", enh_train_args.seed, "seed override");
    etrain->allow_extras();

    CLI::App* enh = app.add_subcommand("enhance", "denoise a coarse clip with a trained enhancer");
    enh->add_option("--checkpoint", enhance_args.checkpoint, "enhancer checkpoint")->required();
    enh->add_option("--vae", enhance_args.vae, "autoencoder checkpoint (default: from enhancer)");
    enh->add_option("--clip", enhance_args.clip, "input clip directory")->required();
    enh->add_option("--out", enhance_args.out_dir, "output clip directory")->required();
    enh->add_option("--steps", enhance_args.steps, "denoising steps (default 8)");
    enh->add_option("--seed", enhance_args.seed, "sampler seed");

    CLI::App* report = app.add_subcommand("report", "render tables and plots from stored logs");
    report->add_option("dir", report_dir, "run directory holding logs")->required();
    report->add_option("--out", report_out, "plot output directory (default: the run directory)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (train->parsed()) return cmd_train_vae(train_args, train->remaining(), resume);
        if (eval->parsed()) return cmd_eval_vae(eval_args, eval->remaining(), eval_seed);
        if (audit->parsed()) return cmd_audit(audit_args, audit->remaining(), audit_seed);
        if (ablate->parsed()) return cmd_ablate(ablate_args, ablate->remaining(), channels);
        if (etrain->parsed()) return cmd_train_enhancer(enh_train_args, etrain->remaining());
        if (enh->parsed()) return cmd_enhance(enhance_args);
        if (report->parsed()) return cmd_report(report_dir, report_out);
    } catch (const CLI::ValidationError& e) {
        std::cerr << e.what() << "\n";
        return kUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}
