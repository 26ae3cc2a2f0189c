#include "reqvae/vae_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "reqvae/checkpoint.hpp"
#include "reqvae/metrics.hpp"

namespace fs = std::filesystem;

namespace reqvae {

namespace {

constexpr uint64_t kStreamProj = 0xa119;
constexpr uint64_t kStreamBatch = 0x11;
constexpr uint64_t kStreamTransform = 0x12;
constexpr uint64_t kStreamNoise = 0x13;
constexpr uint64_t kStreamTokens = 0x14;

double scalar(const ad::Var& v) { return v ? v->value.data()[0] : 0.0; }

ad::Var mean_of(const std::vector<ad::Var>& parts) {
    ad::Var s = parts.at(0);
    for (size_t i = 1; i < parts.size(); ++i) s = ad::add(s, parts[i]);
    return parts.size() == 1 ? s : ad::scale(s, 1.0 / static_cast<double>(parts.size()));
}

Tensor strip_batch(const Tensor& t) {
    return t.reshaped({t.size(1), t.size(2), t.size(3)});
}

/// Token rows [N, D] picked from a feature grid [D, h, w].
Tensor token_rows(const Tensor& grid, const std::vector<int64_t>& rows, int64_t w) {
    const int64_t n = static_cast<int64_t>(rows.size());
    const int64_t d = grid.size(0);
    Tensor out({n, d});
    for (int64_t i = 0; i < n; ++i) {
        const int64_t y = rows[static_cast<size_t>(i)] / w;
        const int64_t x = rows[static_cast<size_t>(i)] % w;
        for (int64_t c = 0; c < d; ++c) out.at(i, c) = grid.at(c, y, x);
    }
    return out;
}

struct TermCheck {
    const char* name;
    double value;
};

void require_finite(const std::vector<TermCheck>& terms, int64_t step) {
    for (const auto& t : terms) {
        if (!std::isfinite(t.value))
            throw std::runtime_error("non-finite loss at step " + std::to_string(step) + ": term '" +
                                     t.name + "' = " + std::to_string(t.value));
    }
}

nlohmann::json comparable_config(nlohmann::json j) {
    for (const char* k : {"out_dir", "steps", "eval_every", "checkpoint_every"}) j.erase(k);
    return j;
}

}  // namespace

VaeBundle::VaeBundle(const EncoderConfig& cfg, int64_t teacher_dim_, uint64_t seed)
    : model(cfg, seed), teacher_dim(teacher_dim_) {
    Rng r = Rng::derive(seed, kStreamProj);
    proj = nn::Linear(model.params(), "proj", cfg.latent_channels, teacher_dim, r);
}

TotalLossResult total_loss(const std::vector<BatchSample>& batch, VaeBundle& vb, const Teacher& teacher,
                           PatchDiscriminator* disc, const LossConfig& cfg, Rng& noise_rng,
                           Rng& token_rng) {
    if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
    const int64_t d = vb.model.config().down_factor;
    const bool adversarial = disc != nullptr && cfg.lambda_gan > 0.0;
    const Teacher* perceptual = cfg.perceptual > 0.0 ? &teacher : nullptr;

    std::vector<ad::Var> cos_terms, dist_terms, leq_terms, rec_terms, gan_terms, kl_terms;
    TotalLossResult out;
    for (const BatchSample& s : batch) {
        const Tensor& img = *s.image;
        const Tensor img4 = img.reshaped({1, img.size(0), img.size(1), img.size(2)});
        ad::Var iv = ad::constant(img4);
        LatentDistribution dist = vb.model.encode(iv);
        ad::Var kl = kl_loss(dist);

        const int64_t c = dist.mean->value.size(1);
        const int64_t h = dist.mean->value.size(2);
        const int64_t w = dist.mean->value.size(3);
        ad::Var z_tokens = ad::transpose2d(ad::reshape(dist.mean, {c, h * w}));
        Tensor feats = resample_to_grid(teacher.extract_plain(img, {s.id}), h, w);
        std::vector<int64_t> rows = subsample_tokens(h * w, cfg.token_cap, token_rng);
        Tensor f_rows = token_rows(feats, rows, w);
        ad::Var z_rows = ad::gather_rows(z_tokens, rows);
        cos_terms.push_back(cosine_align_loss(vb.proj(z_rows), f_rows, cfg.m1));
        dist_terms.push_back(distance_align_loss(z_rows, f_rows, cfg.m2));

        const Tensor timg = apply_to_image(img4, s.transform);
        LatentDistribution dist_t = vb.model.encode(ad::constant(timg));
        leq_terms.push_back(latent_equivariance_from(dist.mean, dist_t.mean, s.transform, d));

        ad::Var z = Autoencoder::reparameterize(dist, noise_rng);
        ad::Var decoded = vb.model.decode(apply_to_latent_var(z, s.transform, d));
        rec_terms.push_back(reconstruction_loss(decoded, timg, perceptual, cfg.perceptual));
        if (adversarial) gan_terms.push_back(hinge_gen_loss((*disc)(decoded)));
        kl_terms.push_back(kl);

        out.rows.push_back({s.transform.str(), scalar(leq_terms.back()), scalar(rec_terms.back()),
                            adversarial ? scalar(gan_terms.back()) : 0.0, scalar(kl)});
        out.decoded.push_back(strip_batch(decoded->value));
        out.targets.push_back(strip_batch(timg));
    }

    ad::Var align_cos = mean_of(cos_terms);
    ad::Var align_dist = mean_of(dist_terms);
    ad::Var latent_eq = mean_of(leq_terms);
    ad::Var rec = mean_of(rec_terms);
    ad::Var kl = mean_of(kl_terms);
    ad::Var recon = ad::add(rec, ad::scale(kl, cfg.lambda_reg));
    ad::Var gan;
    if (adversarial) {
        gan = mean_of(gan_terms);
        recon = ad::add(recon, ad::scale(gan, cfg.lambda_gan));
    }
    out.total = ad::add(ad::add(ad::scale(ad::add(align_dist, align_cos), cfg.w_align),
                                ad::scale(ad::add(latent_eq, recon), cfg.w_equi)),
                        ad::scale(kl, cfg.beta_kl));

    out.values.align_cos = scalar(align_cos);
    out.values.align_dist = scalar(align_dist);
    out.values.latent_eq = scalar(latent_eq);
    out.values.rec = scalar(rec);
    out.values.gan = scalar(gan);
    out.values.reg = scalar(kl);
    out.values.kl = scalar(kl);
    out.values.total = scalar(out.total);
    return out;
}

void save_vae_checkpoint(const std::string& path, const VaeBundle& vb, const nlohmann::json& config_json,
                         int64_t step, const nn::Adam* opt, const PatchDiscriminator* disc,
                         const nn::Adam* disc_opt) {
    TensorArchive a;
    a.meta = {{"kind", "vae"},
              {"step", step},
              {"teacher_dim", vb.teacher_dim},
              {"config", config_json},
              {"rng", {{"scheme", "per-step counter"}, {"seed", config_json.value("seed", 0)}}}};
    a.tensors = vb.model.params().state();
    if (opt) opt->serialize(a.tensors, "opt.");
    if (disc) {
        for (const auto& [name, t] : disc->params().state()) a.tensors.emplace("disc." + name, t);
        if (disc_opt) disc_opt->serialize(a.tensors, "dopt.");
    }
    a.save(path);
}

LoadedVae load_vae_checkpoint(const std::string& path) {
    TensorArchive a = TensorArchive::load(path);
    if (a.meta.value("kind", "") != "vae")
        throw std::runtime_error(path + ": not an autoencoder checkpoint (kind '" +
                                 a.meta.value("kind", "") + "')");
    LoadedVae out;
    out.config_json = a.meta.at("config");
    out.config = TrainConfig::from_json(out.config_json);
    out.step = a.meta.at("step").get<int64_t>();
    const int64_t teacher_dim = a.meta.at("teacher_dim").get<int64_t>();
    out.bundle = std::make_unique<VaeBundle>(out.config.encoder_config(), teacher_dim, out.config.seed);

    std::map<std::string, Tensor> model_state;
    for (const auto& [name, t] : a.tensors) {
        const bool aux = name.rfind("opt.", 0) == 0 || name.rfind("disc.", 0) == 0 ||
                         name.rfind("dopt.", 0) == 0;
        if (aux)
            out.extra.emplace(name, t);
        else
            model_state.emplace(name, t);
    }
    out.bundle->model.params().load_state(model_state);
    out.content_hash = content_hash(model_state);
    return out;
}

Dataset build_dataset(const DataConfig& cfg) {
    if (cfg.kind == "synthetic")
        return generate_corpus(cfg.seed, cfg.count, cfg.resolution, cfg.resolution);
    return load_folder(cfg.path, cfg.resolution);
}

std::unique_ptr<Teacher> build_teacher(const TeacherConfig& cfg) {
    if (cfg.kind == "builtin") return make_builtin_teacher(cfg.seed);
    return load_file_teacher(cfg.path);
}

namespace {

struct EvalPoint {
    double psnr = 0.0, ssim = 0.0;
};

EvalPoint eval_recon(const Autoencoder& model, const Dataset& data, const std::vector<size_t>& idx,
                     size_t cap) {
    EvalPoint p;
    const size_t n = std::min(cap, idx.size());
    for (size_t i = 0; i < n; ++i) {
        const Tensor& img = data.items[idx[i]];
        Tensor rec = model.decode_plain(model.encode_mean(img));
        p.psnr += psnr(rec, img);
        p.ssim += ssim(rec, img);
    }
    if (n > 0) {
        p.psnr /= static_cast<double>(n);
        p.ssim /= static_cast<double>(n);
    }
    return p;
}

}  // namespace

TrainResult train_vae(const TrainConfig& cfg, const std::string& resume_from, std::ostream* progress) {
    if (auto errs = cfg.validate(); !errs.empty()) {
        std::string msg = "invalid training config:";
        for (const auto& e : errs) msg += "\n  " + e;
        throw std::invalid_argument(msg);
    }
    fs::create_directories(cfg.out_dir);

    Dataset data = build_dataset(cfg.data);
    SplitIndices splits = split(data.size(), cfg.data.split[0], cfg.data.split[1], cfg.data.split[2],
                                cfg.data.seed);
    if (splits.train.empty()) throw std::invalid_argument("training split is empty");
    std::unique_ptr<Teacher> teacher = build_teacher(cfg.teacher);
    TransformGroup group = cfg.transform_group();
    group.validate(data.h, data.w, cfg.model.down_factor);

    std::unique_ptr<VaeBundle> vb;
    nn::Adam opt({.lr = cfg.lr});
    std::unique_ptr<PatchDiscriminator> disc;
    nn::Adam disc_opt({.lr = cfg.gan.lr});
    if (cfg.gan.enabled)
        disc = std::make_unique<PatchDiscriminator>(cfg.gan.base_width, cfg.gan.down_layers, cfg.seed);

    int64_t start_step = 0;
    if (!resume_from.empty()) {
        LoadedVae loaded = load_vae_checkpoint(resume_from);
        if (comparable_config(loaded.config_json) != comparable_config(cfg.to_json()))
            throw std::invalid_argument("resume checkpoint was trained under a different config");
        vb = std::move(loaded.bundle);
        start_step = loaded.step;
        opt.deserialize(loaded.extra, "opt.");
        if (disc) {
            std::map<std::string, Tensor> dstate;
            for (const auto& [name, t] : loaded.extra)
                if (name.rfind("disc.", 0) == 0) dstate.emplace(name.substr(5), t);
            if (!dstate.empty()) disc->params().load_state(dstate);
            disc_opt.deserialize(loaded.extra, "dopt.");
        }
    } else {
        vb = std::make_unique<VaeBundle>(cfg.encoder_config(), teacher->feature_dim(), cfg.seed);
    }
    if (start_step >= cfg.steps)
        throw std::invalid_argument("checkpoint step " + std::to_string(start_step) +
                                    " is past the configured " + std::to_string(cfg.steps));

    const std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    std::ofstream log(metrics_path, resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot open " + metrics_path);
    const nlohmann::json cfg_json = cfg.to_json();

    TrainResult result;
    for (int64_t step = start_step; step < cfg.steps; ++step) {
        Rng batch_rng = Rng::derive(cfg.seed, kStreamBatch, static_cast<uint64_t>(step));
        Rng trans_rng = Rng::derive(cfg.seed, kStreamTransform, static_cast<uint64_t>(step));
        Rng noise_rng = Rng::derive(cfg.seed, kStreamNoise, static_cast<uint64_t>(step));
        Rng token_rng = Rng::derive(cfg.seed, kStreamTokens, static_cast<uint64_t>(step));

        std::vector<BatchSample> batch;
        for (int64_t b = 0; b < cfg.batch_size; ++b) {
            const size_t pick = splits.train[static_cast<size_t>(
                batch_rng.uniform_int(int64_t{0}, static_cast<int64_t>(splits.train.size()) - 1))];
            batch.push_back({&data.items[pick], data.ids[pick], group.sample(trans_rng)});
        }

        TotalLossResult r = total_loss(batch, *vb, *teacher, disc.get(), cfg.loss, noise_rng, token_rng);
        require_finite({{"align_cos", r.values.align_cos},
                        {"align_dist", r.values.align_dist},
                        {"latent_eq", r.values.latent_eq},
                        {"rec", r.values.rec},
                        {"gan", r.values.gan},
                        {"kl", r.values.kl},
                        {"total", r.values.total}},
                       step);

        vb->model.params().zero_grad();
        ad::backward(r.total);
        opt.step(vb->model.params());

        double disc_loss = 0.0;
        if (disc) {
            for (size_t i = 0; i < r.decoded.size(); ++i)
                disc_loss += discriminator_step(*disc, disc_opt, r.targets[i], r.decoded[i]);
            disc_loss /= static_cast<double>(r.decoded.size());
        }

        nlohmann::json line = {{"step", step},          {"total", r.values.total},
                               {"align_cos", r.values.align_cos}, {"align_dist", r.values.align_dist},
                               {"latent_eq", r.values.latent_eq}, {"rec", r.values.rec},
                               {"gan", r.values.gan},   {"reg", r.values.reg},
                               {"kl", r.values.kl},     {"grad_norm", opt.last_grad_norm()}};
        if (disc) line["disc"] = disc_loss;
        log << line.dump() << "\n";

        const bool last = step + 1 == cfg.steps;
        if ((cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last) {
            for (const PerTransformRow& row : r.rows) {
                nlohmann::json tl = {{"step", step},        {"transform", row.transform},
                                     {"latent_eq", row.latent_eq}, {"rec", row.rec},
                                     {"gan", row.gan},      {"reg", row.reg}};
                log << tl.dump() << "\n";
            }
            if (!splits.val.empty()) {
                EvalPoint p = eval_recon(vb->model, data, splits.val, 16);
                nlohmann::json el = {{"step", step}, {"eval_psnr", p.psnr}, {"eval_ssim", p.ssim}};
                log << el.dump() << "\n";
                if (progress)
                    (*progress) << "step " << step + 1 << "/" << cfg.steps << " total " << r.values.total
                                << " val psnr " << p.psnr << " ssim " << p.ssim << "\n";
            }
        }
        log.flush();
        if (progress && (step % 25 == 0 || last))
            (*progress) << "step " << step + 1 << "/" << cfg.steps << " total " << r.values.total
                        << " rec " << r.values.rec << " eq " << r.values.latent_eq << "\n";

        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !last) {
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06lld.rqta", static_cast<long long>(step + 1));
            save_vae_checkpoint((fs::path(cfg.out_dir) / name).string(), *vb, cfg_json, step + 1, &opt,
                                disc.get(), disc ? &disc_opt : nullptr);
        }
        result.final_loss = r.values;
    }

    result.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.rqta").string();
    save_vae_checkpoint(result.checkpoint_path, *vb, cfg_json, cfg.steps, &opt, disc.get(),
                        disc ? &disc_opt : nullptr);
    result.metrics_path = metrics_path;
    result.steps_run = cfg.steps - start_step;
    return result;
}

}  // namespace reqvae
