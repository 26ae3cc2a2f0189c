#include "reqvae/enhancer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "reqvae/checkpoint.hpp"
#include "reqvae/metrics.hpp"
#include "reqvae/png_io.hpp"
#include "reqvae/vae_trainer.hpp"

namespace fs = std::filesystem;

namespace reqvae {

namespace {

constexpr uint64_t kStreamDegrade = 0xd364;
constexpr uint64_t kStreamInit = 0x6e4d;
constexpr uint64_t kStreamClipSeed = 0x5cf0;
constexpr uint64_t kStreamPick = 0x21;
constexpr uint64_t kStreamNoise = 0x22;
constexpr uint64_t kStreamSample = 0x2e5a;

constexpr int64_t kTimeDim = 32;

double scalar(const ad::Var& v) { return v->value.data()[0]; }

Tensor as_batch(const Tensor& t) { return t.reshaped({1, t.size(0), t.size(1), t.size(2)}); }

Tensor time_embedding(double s) {
    Tensor e({1, kTimeDim});
    const int64_t half = kTimeDim / 2;
    for (int64_t k = 0; k < half; ++k) {
        const double freq = std::pow(1000.0, static_cast<double>(k) / static_cast<double>(half - 1));
        e.at(0, k) = std::sin(s * freq);
        e.at(0, half + k) = std::cos(s * freq);
    }
    return e;
}

int64_t stage_count(int64_t down_factor) {
    int64_t s = 0, f = 1;
    while (f < down_factor) {
        f *= 2;
        ++s;
    }
    if (f != down_factor) throw std::invalid_argument("down factor must be a power of two");
    return s;
}

}  // namespace

NoiseSchedule NoiseSchedule::cosine(int64_t points) {
    if (points < 2) throw std::invalid_argument("schedule needs at least 2 points");
    return {points};
}

void NoiseSchedule::check(int64_t i) const {
    if (i < 1 || i > points)
        throw std::out_of_range("timestep " + std::to_string(i) + " outside [1, " +
                                std::to_string(points) + "]");
}

double NoiseSchedule::frac(int64_t i) const {
    check(i);
    return static_cast<double>(i - 1) / static_cast<double>(points - 1);
}

double NoiseSchedule::alpha(int64_t i) const { return std::cos(0.5 * M_PI * frac(i)); }

double NoiseSchedule::sigma(int64_t i) const { return std::sin(0.5 * M_PI * frac(i)); }

Tensor v_target(const Tensor& x0, const Tensor& eps, double alpha, double sigma) {
    if (!x0.same_shape(eps))
        throw std::invalid_argument("v_target: x0 " + shape_str(x0.shape()) + " vs eps " +
                                    shape_str(eps.shape()));
    Tensor v = x0;
    for (int64_t i = 0; i < v.numel(); ++i) v.data()[i] = alpha * eps.data()[i] - sigma * x0.data()[i];
    return v;
}

std::vector<std::array<int64_t, 4>> sample_occlusions(int64_t h, int64_t w, double fraction, Rng& rng) {
    std::vector<std::array<int64_t, 4>> rects;
    if (fraction <= 0.0) return rects;
    const int64_t target = static_cast<int64_t>(fraction * static_cast<double>(h * w));
    std::vector<char> covered(static_cast<size_t>(h * w), 0);
    int64_t area = 0;
    while (area < target && rects.size() < 200) {
        const int64_t rh = std::max<int64_t>(1, rng.uniform_int(h / 8, h / 4));
        const int64_t rw = std::max<int64_t>(1, rng.uniform_int(w / 8, w / 4));
        const int64_t y = rng.uniform_int(int64_t{0}, h - rh);
        const int64_t x = rng.uniform_int(int64_t{0}, w - rw);
        rects.push_back({y, x, rh, rw});
        for (int64_t yy = y; yy < y + rh; ++yy)
            for (int64_t xx = x; xx < x + rw; ++xx) {
                char& c = covered[static_cast<size_t>(yy * w + xx)];
                area += c == 0;
                c = 1;
            }
    }
    return rects;
}

namespace {

void blur_circular(Tensor& img, double sigma) {
    const int64_t h = img.size(1), w = img.size(2);
    const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
        k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        sum += k[static_cast<size_t>(i + radius)];
    }
    for (double& v : k) v /= sum;

    std::vector<double> tmp(static_cast<size_t>(h * w));
    for (int64_t c = 0; c < 3; ++c) {
        double* plane = img.data() + c * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                double s = 0.0;
                for (int64_t i = -radius; i <= radius; ++i) {
                    int64_t xx = (x + i) % w;
                    if (xx < 0) xx += w;
                    s += k[static_cast<size_t>(i + radius)] * plane[y * w + xx];
                }
                tmp[static_cast<size_t>(y * w + x)] = s;
            }
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                double s = 0.0;
                for (int64_t i = -radius; i <= radius; ++i) {
                    int64_t yy = (y + i) % h;
                    if (yy < 0) yy += h;
                    s += k[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(yy * w + x)];
                }
                plane[y * w + x] = s;
            }
    }
}

}  // namespace

CoarseRender degrade(const std::vector<Tensor>& frames, double severity, uint64_t seed) {
    if (severity < 0.0 || severity > 1.0) throw std::invalid_argument("severity must be in [0, 1]");
    CoarseRender out;
    out.frames = frames;
    if (severity == 0.0) return out;

    out.degradation = {severity * 2.0, severity * 0.25, severity * 0.1};
    Rng rng = Rng::derive(seed, kStreamDegrade);
    for (Tensor& f : out.frames) {
        if (f.ndim() != 3 || f.size(0) != 3) throw std::invalid_argument("frames must be [3,H,W]");
        const int64_t h = f.size(1), w = f.size(2);
        blur_circular(f, out.degradation.blur_sigma);
        for (const auto& [y, x, rh, rw] : sample_occlusions(h, w, out.degradation.occlusion, rng))
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t yy = y; yy < y + rh; ++yy)
                    for (int64_t xx = x; xx < x + rw; ++xx) f.at(c, yy, xx) = 0.0;
        for (int64_t i = 0; i < f.numel(); ++i)
            f.data()[i] = std::clamp(f.data()[i] + rng.normal(0.0, out.degradation.noise), -1.0, 1.0);
    }
    return out;
}

void save_render(const std::string& dir, const CoarseRender& render) {
    if (render.frames.empty()) throw std::invalid_argument("no frames to save");
    fs::create_directories(dir);
    char name[32];
    for (size_t i = 0; i < render.frames.size(); ++i) {
        std::snprintf(name, sizeof(name), "frame_%04zu.png", i);
        write_png((fs::path(dir) / name).string(), render.frames[i]);
    }
    nlohmann::json j = {{"frames", render.frames.size()},
                        {"height", render.frames[0].size(1)},
                        {"width", render.frames[0].size(2)},
                        {"blur_sigma", render.degradation.blur_sigma},
                        {"occlusion", render.degradation.occlusion},
                        {"noise", render.degradation.noise}};
    std::ofstream out(fs::path(dir) / "render.json");
    out << j.dump(2) << "\n";
}

CoarseRender load_render(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "render.json");
    if (!in) throw std::runtime_error(dir + ": missing render.json");
    nlohmann::json j;
    in >> j;
    CoarseRender out;
    out.degradation = {j.value("blur_sigma", 0.0), j.value("occlusion", 0.0), j.value("noise", 0.0)};
    const size_t n = j.at("frames").get<size_t>();
    char name[32];
    for (size_t i = 0; i < n; ++i) {
        std::snprintf(name, sizeof(name), "frame_%04zu.png", i);
        out.frames.push_back(read_png((fs::path(dir) / name).string()));
    }
    return out;
}

FeatureHead::FeatureHead(nn::ParamStore& ps, int64_t down_factor, int64_t base_width,
                         int64_t latent_channels, Rng& rng) {
    const int64_t stages = stage_count(down_factor);
    const int64_t mult[] = {1, 2, 4, 4};
    int64_t cin = 3;
    for (int64_t s = 0; s < stages; ++s) {
        const int64_t cout = base_width * mult[std::min<int64_t>(s, 3)];
        down_.emplace_back(ps, "head.down" + std::to_string(s), cin, cout, 3, 2, ad::PadMode::circular,
                           rng);
        norms_.emplace_back(ps, "head.norm" + std::to_string(s), cout);
        cin = cout;
    }
    head_ = nn::Conv2d(ps, "head.out", cin, latent_channels, 3, 1, ad::PadMode::circular, rng);
}

ad::Var FeatureHead::operator()(const ad::Var& frames) const {
    ad::Var h = frames;
    for (size_t i = 0; i < down_.size(); ++i) h = ad::silu(norms_[i](down_[i](h)));
    return head_(h);
}

DenoiserUNet::Block DenoiserUNet::make_block(nn::ParamStore& ps, const std::string& name, int64_t cin,
                                             int64_t cout, Rng& rng) {
    Block b;
    b.n1 = nn::GroupNorm(ps, name + ".n1", cin);
    b.c1 = nn::Conv2d(ps, name + ".c1", cin, cout, 3, 1, ad::PadMode::circular, rng);
    b.temb = nn::Linear(ps, name + ".temb", kTimeDim, cout, rng);
    b.n2 = nn::GroupNorm(ps, name + ".n2", cout);
    b.c2 = nn::Conv2d(ps, name + ".c2", cout, cout, 3, 1, ad::PadMode::circular, rng);
    b.project = cin != cout;
    if (b.project) b.skip = nn::Conv2d(ps, name + ".skip", cin, cout, 1, 1, ad::PadMode::zeros, rng);
    return b;
}

ad::Var DenoiserUNet::run_block(const Block& b, const ad::Var& x, const ad::Var& emb) const {
    ad::Var h = b.c1(ad::silu(b.n1(x)));
    ad::Var t = ad::reshape(b.temb(emb), {1, h->value.size(1), 1, 1});
    h = ad::add(h, t);
    h = b.c2(ad::silu(b.n2(h)));
    return ad::add(h, b.project ? b.skip(x) : x);
}

DenoiserUNet::DenoiserUNet(nn::ParamStore& ps, int64_t latent_channels, int64_t base_width, Rng& rng) {
    const int64_t f = base_width;
    in_ = nn::Conv2d(ps, "unet.in", 2 * latent_channels, f, 3, 1, ad::PadMode::circular, rng);
    down_block_ = make_block(ps, "unet.enc", f, f, rng);
    down_ = nn::Conv2d(ps, "unet.down", f, 2 * f, 3, 2, ad::PadMode::circular, rng);
    mid_ = make_block(ps, "unet.mid", 2 * f, 2 * f, rng);
    up_ = nn::Conv2d(ps, "unet.up", 2 * f, f, 3, 1, ad::PadMode::circular, rng);
    out_block_ = make_block(ps, "unet.dec", 2 * f, f, rng);
    out_norm_ = nn::GroupNorm(ps, "unet.out_norm", f);
    out_ = nn::Conv2d(ps, "unet.out", f, latent_channels, 3, 1, ad::PadMode::circular, rng);
}

ad::Var DenoiserUNet::operator()(const ad::Var& x_with_cond, double time_frac) const {
    const Tensor& v = x_with_cond->value;
    if (v.ndim() != 4 || v.size(1) != in_.w->value.size(1))
        throw std::invalid_argument("denoiser expects [B," + std::to_string(in_.w->value.size(1)) +
                                    ",h,w], got " + shape_str(v.shape()));
    if (v.size(2) < 2 || v.size(2) % 2 != 0 || v.size(3) < 2 || v.size(3) % 2 != 0)
        throw std::invalid_argument("latent grid must be even and at least 2x2 for the denoiser");

    ad::Var emb = ad::constant(time_embedding(time_frac));
    ad::Var h0 = in_(x_with_cond);
    ad::Var h1 = run_block(down_block_, h0, emb);
    ad::Var h2 = run_block(mid_, down_(h1), emb);
    ad::Var h3 = up_(ad::upsample_nearest2(h2));
    ad::Var h4 = run_block(out_block_, ad::concat({h3, h1}, 1), emb);
    return out_(ad::silu(out_norm_(h4)));
}

EnhancerBundle::EnhancerBundle(int64_t latent_channels_, int64_t down_factor_, int64_t base_width,
                               uint64_t seed)
    : latent_channels(latent_channels_), down_factor(down_factor_) {
    Rng rng = Rng::derive(seed, kStreamInit);
    head = FeatureHead(ps, down_factor, base_width, latent_channels, rng);
    unet = DenoiserUNet(ps, latent_channels, base_width, rng);
}

void save_enhancer_checkpoint(const std::string& path, const EnhancerBundle& bundle,
                              const nlohmann::json& config_json, int64_t step, uint64_t vae_hash,
                              const nn::Adam* opt) {
    char hash[24];
    std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(vae_hash));
    TensorArchive a;
    a.meta = {{"kind", "enhancer"}, {"step", step},
              {"config", config_json}, {"vae_hash", hash},
              {"latent_channels", bundle.latent_channels}, {"down_factor", bundle.down_factor},
              {"latent_scale", bundle.latent_scale}};
    a.tensors = bundle.ps.state();
    if (opt) opt->serialize(a.tensors, "opt.");
    a.save(path);
}

LoadedEnhancer load_enhancer_checkpoint(const std::string& path) {
    TensorArchive a = TensorArchive::load(path);
    if (a.meta.value("kind", "") != "enhancer")
        throw std::runtime_error(path + ": not an enhancer checkpoint (kind '" +
                                 a.meta.value("kind", "") + "')");
    LoadedEnhancer out;
    out.config_json = a.meta.at("config");
    out.config = EnhancerConfig::from_json(out.config_json);
    out.step = a.meta.at("step").get<int64_t>();
    out.vae_hash = std::stoull(a.meta.at("vae_hash").get<std::string>(), nullptr, 16);
    out.bundle = std::make_unique<EnhancerBundle>(a.meta.at("latent_channels").get<int64_t>(),
                                                  a.meta.at("down_factor").get<int64_t>(),
                                                  out.config.base_width, out.config.seed);
    out.bundle->latent_scale = a.meta.value("latent_scale", 1.0);
    std::map<std::string, Tensor> state;
    for (const auto& [name, t] : a.tensors) {
        if (name.rfind("opt.", 0) == 0)
            out.extra.emplace(name, t);
        else
            state.emplace(name, t);
    }
    out.bundle->ps.load_state(state);
    return out;
}

namespace {

struct ClipCache {
    std::vector<Tensor> gt, coarse;   // [3,H,W]
    std::vector<Tensor> gt_latent;    // [C,h,w], posterior means under the frozen VAE
    std::vector<Tensor> gt_features;  // teacher grids for the perceptual term
};

double latent_fit(const EnhancerBundle& bundle, const std::vector<const ClipCache*>& clips) {
    double acc = 0.0;
    int64_t n = 0;
    for (const ClipCache* c : clips)
        for (size_t f = 0; f < c->coarse.size(); ++f) {
            ad::Var cond = bundle.head(ad::constant(as_batch(c->coarse[f])));
            acc += scalar(ad::mse_loss(cond, ad::constant(as_batch(c->gt_latent[f]))));
            ++n;
        }
    return acc / static_cast<double>(std::max<int64_t>(n, 1));
}

}  // namespace

EnhancerTrainResult train_enhancer(const EnhancerConfig& cfg, std::ostream* progress) {
    if (auto errs = cfg.validate(); !errs.empty()) {
        std::string msg = "invalid enhancer config:";
        for (const auto& e : errs) msg += "\n  " + e;
        throw std::invalid_argument(msg);
    }
    fs::create_directories(cfg.out_dir);

    LoadedVae vae = load_vae_checkpoint(cfg.vae_checkpoint);
    vae.bundle->model.params().set_requires_grad(false);
    const uint64_t vae_hash0 = vae.content_hash;
    const Autoencoder& dec = vae.bundle->model;
    const int64_t d = dec.config().down_factor;
    const int64_t c = dec.config().latent_channels;
    if (cfg.resolution % d != 0)
        throw std::invalid_argument("resolution " + std::to_string(cfg.resolution) +
                                    " does not sit on the VAE latent grid (d=" + std::to_string(d) + ")");
    const int64_t grid = cfg.resolution / d;
    if (grid < 2 || grid % 2 != 0)
        throw std::invalid_argument("conditioning grid " + std::to_string(grid) +
                                    "x" + std::to_string(grid) + " is too small for the denoiser");

    std::unique_ptr<Teacher> teacher = build_teacher(cfg.teacher);

    std::vector<ClipCache> clips(static_cast<size_t>(cfg.clip_count));
    const std::vector<std::string> one_id(1);
    for (int64_t i = 0; i < cfg.clip_count; ++i) {
        const uint64_t cs = Rng::derive(cfg.data_seed, kStreamClipSeed, static_cast<uint64_t>(i)).next_u64();
        SceneClip sc = generate_scene(cs, cfg.clip_len, cfg.resolution, cfg.resolution);
        CoarseRender cr = degrade(sc.frames, cfg.severity, cs);
        ClipCache& cc = clips[static_cast<size_t>(i)];
        cc.gt = std::move(sc.frames);
        cc.coarse = std::move(cr.frames);
        for (const Tensor& f : cc.gt) {
            cc.gt_latent.push_back(dec.encode_mean(f));
            cc.gt_features.push_back(teacher->extract_plain(f, one_id));
        }
    }
    SplitIndices sp = split(clips.size(), 1.0 - cfg.val_fraction, cfg.val_fraction, 0.0, cfg.data_seed);
    if (sp.train.empty()) throw std::invalid_argument("no training clips left after the split");
    std::vector<const ClipCache*> val_clips;
    for (size_t i : (sp.val.empty() ? sp.train : sp.val)) val_clips.push_back(&clips[i]);
    if (val_clips.size() > 4) val_clips.resize(4);

    // Normalize the code space to unit rms so the schedule's noise end is
    // commensurate with the signal; the scale is measured on the training
    // split only and folded back in at decode time.
    double sq = 0.0;
    int64_t sq_n = 0;
    for (size_t i : sp.train)
        for (const Tensor& z : clips[i].gt_latent) {
            for (int64_t k = 0; k < z.numel(); ++k) sq += z.data()[k] * z.data()[k];
            sq_n += z.numel();
        }
    const double scale = std::max(std::sqrt(sq / static_cast<double>(std::max<int64_t>(sq_n, 1))), 1e-6);
    for (ClipCache& cc : clips)
        for (Tensor& z : cc.gt_latent)
            for (int64_t k = 0; k < z.numel(); ++k) z.data()[k] /= scale;

    EnhancerBundle bundle(c, d, cfg.base_width, cfg.seed);
    bundle.latent_scale = scale;
    nn::Adam opt({.lr = cfg.lr});
    NoiseSchedule sched = NoiseSchedule::cosine(cfg.train_schedule);

    EnhancerTrainResult result;
    result.initial_latent_loss = latent_fit(bundle, val_clips);

    const std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    std::ofstream log(metrics_path, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open " + metrics_path);
    const nlohmann::json cfg_json = cfg.to_json();

    for (int64_t step = 0; step < cfg.steps; ++step) {
        Rng pick_rng = Rng::derive(cfg.seed, kStreamPick, static_cast<uint64_t>(step));
        Rng noise_rng = Rng::derive(cfg.seed, kStreamNoise, static_cast<uint64_t>(step));

        std::vector<ad::Var> v_terms, rec_terms, lat_terms;
        for (int64_t b = 0; b < cfg.batch_clips; ++b) {
            const ClipCache& clip =
                clips[sp.train[static_cast<size_t>(pick_rng.uniform_int(
                    int64_t{0}, static_cast<int64_t>(sp.train.size()) - 1))]];
            for (size_t f = 0; f < clip.gt.size(); ++f) {
                ad::Var cond = bundle.head(ad::constant(as_batch(clip.coarse[f])));
                const Tensor lat4 = as_batch(clip.gt_latent[f]);
                lat_terms.push_back(ad::mse_loss(cond, ad::constant(lat4)));

                const int64_t ti = pick_rng.uniform_int(int64_t{1}, sched.points);
                const double a = sched.alpha(ti), s = sched.sigma(ti);
                Tensor eps = Tensor::randn(lat4.shape(), noise_rng);
                Tensor xt = lat4;
                for (int64_t i = 0; i < xt.numel(); ++i)
                    xt.data()[i] = a * xt.data()[i] + s * eps.data()[i];
                const Tensor vt = v_target(lat4, eps, a, s);

                ad::Var xt_c = ad::constant(xt);
                ad::Var vhat = bundle.unet(ad::concat({xt_c, cond}, 1), sched.frac(ti));
                v_terms.push_back(ad::mse_loss(vhat, ad::constant(vt)));

                ad::Var x0hat = ad::sub(ad::scale(xt_c, a), ad::scale(vhat, s));
                ad::Var decoded = dec.decode(ad::scale(x0hat, bundle.latent_scale));
                ad::Var rec = ad::mse_loss(decoded, ad::constant(as_batch(clip.gt[f])));
                ad::Var feats = teacher->extract(decoded, one_id);
                rec = ad::add(rec, ad::scale(ad::mse_loss(feats, ad::constant(clip.gt_features[f])),
                                             0.1));
                rec_terms.push_back(rec);
            }
        }

        const double inv = 1.0 / static_cast<double>(v_terms.size());
        auto mean_of = [inv](const std::vector<ad::Var>& terms) {
            ad::Var s = terms.at(0);
            for (size_t i = 1; i < terms.size(); ++i) s = ad::add(s, terms[i]);
            return terms.size() == 1 ? s : ad::scale(s, inv);
        };
        ad::Var v_loss = mean_of(v_terms), rec_loss = mean_of(rec_terms), lat_loss = mean_of(lat_terms);
        ad::Var total = ad::add(v_loss, ad::add(ad::scale(rec_loss, cfg.w_rec),
                                                ad::scale(lat_loss, cfg.w_lat)));

        const double vv = scalar(v_loss), rv = scalar(rec_loss), lv = scalar(lat_loss),
                     tv = scalar(total);
        const std::pair<const char*, double> checks[] = {{"v", vv}, {"rec", rv}, {"lat", lv},
                                                         {"total", tv}};
        for (auto [name, value] : checks)
            if (!std::isfinite(value))
                throw std::runtime_error("non-finite enhancer loss at step " + std::to_string(step) +
                                         ": term '" + std::string(name) + "'");

        bundle.ps.zero_grad();
        ad::backward(total);
        opt.step(bundle.ps);

        nlohmann::json line = {{"step", step}, {"total", tv},         {"v", vv},
                               {"rec", rv},    {"lat", lv},           {"grad_norm", opt.last_grad_norm()}};
        log << line.dump() << "\n";

        const bool last = step + 1 == cfg.steps;
        if ((cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || last) {
            double p_enh = 0.0, p_coarse = 0.0;
            int64_t n = 0;
            const size_t probe = std::min<size_t>(val_clips.size(), 2);
            for (size_t ci = 0; ci < probe; ++ci) {
                const ClipCache& clip = *val_clips[ci];
                std::vector<Tensor> enhanced =
                    enhance(bundle, dec, clip.coarse, cfg.sample_steps, cfg.seed);
                for (size_t f = 0; f < clip.gt.size(); ++f) {
                    p_enh += psnr(enhanced[f], clip.gt[f]);
                    p_coarse += psnr(clip.coarse[f], clip.gt[f]);
                    ++n;
                }
            }
            const double lat_val = latent_fit(bundle, val_clips);
            nlohmann::json el = {{"step", step},
                                 {"eval_psnr_enhanced", p_enh / n},
                                 {"eval_psnr_coarse", p_coarse / n},
                                 {"eval_lat", lat_val}};
            log << el.dump() << "\n";
            if (progress)
                (*progress) << "step " << step + 1 << "/" << cfg.steps << " psnr "
                            << p_enh / n << " vs coarse " << p_coarse / n << " lat " << lat_val << "\n";
        }
        log.flush();
        if (progress && step % 25 == 0)
            (*progress) << "step " << step + 1 << "/" << cfg.steps << " total " << tv << " v " << vv
                        << " rec " << rv << " lat " << lv << "\n";
    }

    result.final_latent_loss = latent_fit(bundle, val_clips);
    nlohmann::json summary = {{"lat_initial", result.initial_latent_loss},
                              {"lat_final", result.final_latent_loss}};
    log << summary.dump() << "\n";

    if (content_hash(vae.bundle->model.params().state()) != vae_hash0)
        throw std::logic_error("frozen autoencoder parameters changed during enhancer training");

    result.checkpoint_path = (fs::path(cfg.out_dir) / "enhancer.rqta").string();
    save_enhancer_checkpoint(result.checkpoint_path, bundle, cfg_json, cfg.steps, vae_hash0, &opt);
    result.metrics_path = metrics_path;
    result.steps_run = cfg.steps;
    return result;
}

std::vector<Tensor> enhance(const EnhancerBundle& bundle, const Autoencoder& vae,
                            const std::vector<Tensor>& coarse, int64_t steps, uint64_t seed) {
    if (steps < 1) throw std::invalid_argument("need at least one denoising step");
    if (coarse.empty()) throw std::invalid_argument("empty clip");
    if (vae.config().latent_channels != bundle.latent_channels ||
        vae.config().down_factor != bundle.down_factor)
        throw std::invalid_argument("enhancer was trained against a different latent layout");

    NoiseSchedule sched = NoiseSchedule::cosine(steps + 1);
    std::vector<Tensor> out;
    for (size_t f = 0; f < coarse.size(); ++f) {
        ad::Var cond = bundle.head(ad::constant(as_batch(coarse[f])));
        Rng rng = Rng::derive(seed, kStreamSample, f);
        Tensor x = Tensor::randn(cond->value.shape(), rng);
        for (int64_t i = steps + 1; i >= 2; --i) {
            const double a = sched.alpha(i), s = sched.sigma(i);
            const double an = sched.alpha(i - 1), sn = sched.sigma(i - 1);
            Tensor vhat = bundle.unet(ad::concat({ad::constant(x), cond}, 1), sched.frac(i))->value;
            for (int64_t k = 0; k < x.numel(); ++k) {
                const double x0 = a * x.data()[k] - s * vhat.data()[k];
                const double eps = s * x.data()[k] + a * vhat.data()[k];
                x.data()[k] = an * x0 + sn * eps;
            }
        }
        for (int64_t k = 0; k < x.numel(); ++k) x.data()[k] *= bundle.latent_scale;
        Tensor img = vae.decode_plain(x);
        out.push_back(img.reshaped({img.size(1), img.size(2), img.size(3)}));
    }
    return out;
}

}  // namespace reqvae
