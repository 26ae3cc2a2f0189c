#include "reqvae/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "reqvae/vae_trainer.hpp"

namespace fs = std::filesystem;

namespace reqvae {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_same_images(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("image shapes differ: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

constexpr int kWin = 11;
constexpr double kSigma = 1.5;

std::array<double, kWin> gaussian_window() {
    std::array<double, kWin> w{};
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double x = i - (kWin - 1) / 2.0;
        w[static_cast<size_t>(i)] = std::exp(-0.5 * x * x / (kSigma * kSigma));
        sum += w[static_cast<size_t>(i)];
    }
    for (double& v : w) v /= sum;
    return w;
}

/// Valid-mode separable Gaussian filtering of an h x w buffer.
std::vector<double> filter_valid(const std::vector<double>& img, int64_t h, int64_t w) {
    static const std::array<double, kWin> g = gaussian_window();
    const int64_t hw = w - kWin + 1;
    std::vector<double> rows(static_cast<size_t>(h * hw));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < hw; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWin; ++k) s += g[static_cast<size_t>(k)] * img[static_cast<size_t>(y * w + x + k)];
            rows[static_cast<size_t>(y * hw + x)] = s;
        }
    const int64_t hh = h - kWin + 1;
    std::vector<double> out(static_cast<size_t>(hh * hw));
    for (int64_t y = 0; y < hh; ++y)
        for (int64_t x = 0; x < hw; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWin; ++k) s += g[static_cast<size_t>(k)] * rows[static_cast<size_t>((y + k) * hw + x)];
            out[static_cast<size_t>(y * hw + x)] = s;
        }
    return out;
}

/// Luma in [0, 1] from a [3,H,W] image in [-1, 1].
std::vector<double> luma01(const Tensor& img) {
    const int64_t h = img.size(1), w = img.size(2);
    std::vector<double> out(static_cast<size_t>(h * w));
    const double* r = img.data();
    const double* g = r + h * w;
    const double* b = g + h * w;
    for (int64_t i = 0; i < h * w; ++i) {
        const double y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
        out[static_cast<size_t>(i)] = 0.5 * (y + 1.0);
    }
    return out;
}

MatRM unbiased_covariance(const MatRM& x, const Eigen::VectorXd& mu) {
    const Eigen::Index n = x.rows();
    MatRM centered = x.rowwise() - mu.transpose();
    return centered.transpose() * centered / static_cast<double>(n - 1);
}

MatRM symmetric_sqrt(const MatRM& m) {
    Eigen::SelfAdjointEigenSolver<MatRM> eig(0.5 * (m + m.transpose()));
    Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
    require_same_images(a, b);
    const int64_t n = a.numel();
    if (n == 0) throw std::invalid_argument("psnr of empty tensors");
    double mse = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = 0.5 * (a.data()[i] - b.data()[i]);  // [-1,1] -> [0,1] difference
        mse += d * d;
    }
    mse /= static_cast<double>(n);
    if (mse <= 1e-10) return 100.0;
    return std::min(100.0, -10.0 * std::log10(mse));
}

double ssim(const Tensor& a, const Tensor& b) {
    require_same_images(a, b);
    if (a.ndim() != 3 || a.size(0) != 3) throw std::invalid_argument("ssim expects [3,H,W] images");
    const int64_t h = a.size(1), w = a.size(2);
    if (h < kWin || w < kWin)
        throw std::invalid_argument("ssim needs images of at least " + std::to_string(kWin) + " px");

    const std::vector<double> x = luma01(a), y = luma01(b);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const std::vector<double> mx = filter_valid(x, h, w), my = filter_valid(y, h, w);
    const std::vector<double> mxx = filter_valid(xx, h, w), myy = filter_valid(yy, h, w);
    const std::vector<double> mxy = filter_valid(xy, h, w);

    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double acc = 0.0;
    for (size_t i = 0; i < mx.size(); ++i) {
        const double vx = mxx[i] - mx[i] * mx[i];
        const double vy = myy[i] - my[i] * my[i];
        const double cxy = mxy[i] - mx[i] * my[i];
        const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
        const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
        acc += num / den;
    }
    return acc / static_cast<double>(mx.size());
}

double frechet_from_features(const Tensor& fa, const Tensor& fb, bool* ridged) {
    if (fa.ndim() != 2 || fb.ndim() != 2 || fa.size(1) != fb.size(1))
        throw std::invalid_argument("feature rows must be [N,D] with matching D");
    const int64_t d = fa.size(1);
    if (fa.size(0) < 2 || fb.size(0) < 2)
        throw std::invalid_argument("need at least 2 feature rows per set");

    Eigen::Map<const MatRM> xa(fa.data(), fa.size(0), d), xb(fb.data(), fb.size(0), d);
    const Eigen::VectorXd mua = xa.colwise().mean(), mub = xb.colwise().mean();
    MatRM ca = unbiased_covariance(xa, mua), cb = unbiased_covariance(xb, mub);

    const bool ridge = fa.size(0) < d + 1 || fb.size(0) < d + 1;
    if (ridged) *ridged = ridge;
    if (ridge) {
        ca.diagonal().array() += 1e-6;
        cb.diagonal().array() += 1e-6;
    }

    MatRM root_a = symmetric_sqrt(ca);
    Eigen::SelfAdjointEigenSolver<MatRM> eig(
        MatRM(0.5 * ((root_a * cb * root_a) + (root_a * cb * root_a).transpose())));
    const double tr_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double v = (mua - mub).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if (v < -1e-6)
        throw std::runtime_error("feature distance " + std::to_string(v) + " below the numeric floor");
    return std::max(v, 0.0);
}

Tensor pooled_teacher_features(const std::vector<Tensor>& images, const Teacher& teacher) {
    if (images.empty()) throw std::invalid_argument("no images to pool");
    const int64_t d = teacher.feature_dim();
    Tensor rows({static_cast<int64_t>(images.size()), d});
    const std::vector<std::string> one_id(1);
    for (size_t i = 0; i < images.size(); ++i) {
        Tensor f = teacher.extract_plain(images[i], one_id);  // [D,ht,wt]
        const int64_t spatial = f.size(1) * f.size(2);
        for (int64_t c = 0; c < d; ++c) {
            double s = 0.0;
            const double* p = f.data() + c * spatial;
            for (int64_t k = 0; k < spatial; ++k) s += p[k];
            rows.at(static_cast<int64_t>(i), c) = s / static_cast<double>(spatial);
        }
    }
    return rows;
}

double frechet_feature_distance(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b,
                                const Teacher& teacher, bool* ridged) {
    return frechet_from_features(pooled_teacher_features(set_a, teacher),
                                 pooled_teacher_features(set_b, teacher), ridged);
}

ViolationReport equivariance_violation(const PlainEncoderFn& encode, int64_t d,
                                       const std::vector<Tensor>& images, const TransformGroup& group) {
    if (images.empty()) throw std::invalid_argument("no images to audit");
    std::vector<std::pair<std::string, double>> sums;
    for (const auto& [name, weight] : group.entries()) sums.emplace_back(name, 0.0);

    for (const Tensor& img : images) {
        const Tensor z = encode(img);
        double den = 1e-12;
        for (int64_t i = 0; i < z.numel(); ++i) den += z.data()[i] * z.data()[i];
        for (auto& [name, sum] : sums) {
            const TransformSpec t = TransformSpec::parse(name);
            const Tensor tz = apply_to_latent(z, t, d);
            const Tensor zt = encode(apply_to_image(img, t));
            double num = 0.0;
            for (int64_t i = 0; i < tz.numel(); ++i) {
                const double e = tz.data()[i] - zt.data()[i];
                num += e * e;
            }
            sum += num / den;
        }
    }

    ViolationReport rep;
    const double n = static_cast<double>(images.size());
    for (auto& [name, sum] : sums) {
        rep.per_transform.emplace_back(name, sum / n);
        rep.score += sum / n;
    }
    rep.score /= static_cast<double>(sums.size());
    return rep;
}

ViolationReport equivariance_violation(const Autoencoder& model, const std::vector<Tensor>& images,
                                       const TransformGroup& group) {
    return equivariance_violation([&model](const Tensor& img) { return model.encode_mean(img); },
                                  model.config().down_factor, images, group);
}

void MetricsReport::recompute_aggregates() {
    mean_psnr = mean_ssim = mean_perceptual = 0.0;
    if (rows.empty()) return;
    for (const MetricsRow& r : rows) {
        mean_psnr += r.psnr;
        mean_ssim += r.ssim;
        mean_perceptual += r.perceptual;
    }
    const double n = static_cast<double>(rows.size());
    mean_psnr /= n;
    mean_ssim /= n;
    mean_perceptual /= n;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json jrows = nlohmann::json::array();
    for (const MetricsRow& r : rows)
        jrows.push_back({{"id", r.id}, {"psnr", r.psnr}, {"ssim", r.ssim}, {"perceptual", r.perceptual}});
    nlohmann::json j = {{"rows", jrows},
                        {"mean_psnr", mean_psnr},
                        {"mean_ssim", mean_ssim},
                        {"mean_perceptual", mean_perceptual},
                        {"ffd", ffd},
                        {"config_hash", config_hash},
                        {"seed", seed}};
    j["violation"] = violation ? nlohmann::json(*violation) : nlohmann::json(nullptr);
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    for (const auto& row : j.at("rows"))
        r.rows.push_back({row.at("id").get<std::string>(), row.at("psnr").get<double>(),
                          row.at("ssim").get<double>(), row.at("perceptual").get<double>()});
    r.mean_psnr = j.at("mean_psnr").get<double>();
    r.mean_ssim = j.at("mean_ssim").get<double>();
    r.mean_perceptual = j.at("mean_perceptual").get<double>();
    r.ffd = j.at("ffd").get<double>();
    if (!j.at("violation").is_null()) r.violation = j.at("violation").get<double>();
    r.config_hash = j.value("config_hash", "");
    r.seed = j.value("seed", uint64_t{0});
    return r;
}

void MetricsReport::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << to_json().dump(2) << "\n";
}

MetricsReport MetricsReport::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
}

std::string MetricsReport::render_table() const {
    std::ostringstream out;
    char buf[128];
    out << "id              psnr     ssim  perceptual\n";
    for (const MetricsRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-12s %8.3f %8.4f %10.5f\n", r.id.c_str(), r.psnr, r.ssim,
                      r.perceptual);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-12s %8.3f %8.4f %10.5f\n", "mean", mean_psnr, mean_ssim,
                  mean_perceptual);
    out << buf;
    std::snprintf(buf, sizeof(buf), "ffd %.5f", ffd);
    out << buf;
    if (violation) {
        std::snprintf(buf, sizeof(buf), "   violation %.6g", *violation);
        out << buf;
    }
    out << "\n";
    return out.str();
}

MetricsReport evaluate_model(const Autoencoder& model, const Teacher& teacher, const Dataset& data,
                             const std::vector<size_t>& indices, const TransformGroup* group) {
    if (indices.empty()) throw std::invalid_argument("no images selected for evaluation");
    MetricsReport rep;
    std::vector<Tensor> originals, recons;
    const std::vector<std::string> one_id(1);
    for (size_t idx : indices) {
        const Tensor& img = data.items.at(idx);
        Tensor rec = model.decode_plain(model.encode_mean(img));
        const Tensor fo = teacher.extract_plain(img, one_id);
        const Tensor fr = teacher.extract_plain(rec, one_id);
        double perc = 0.0;
        for (int64_t i = 0; i < fo.numel(); ++i) {
            const double d = fo.data()[i] - fr.data()[i];
            perc += d * d;
        }
        rep.rows.push_back({data.ids.at(idx), psnr(rec, img), ssim(rec, img),
                            perc / static_cast<double>(fo.numel())});
        originals.push_back(img);
        recons.push_back(std::move(rec));
    }
    rep.recompute_aggregates();
    rep.ffd = frechet_feature_distance(recons, originals, teacher);
    if (group) {
        const size_t cap = std::min<size_t>(originals.size(), 8);
        std::vector<Tensor> probe(originals.begin(), originals.begin() + static_cast<long>(cap));
        rep.violation = equivariance_violation(model, probe, *group).score;
    }
    return rep;
}

void ablation_harness(const std::vector<int64_t>& channels, const TrainConfig& base,
                      std::vector<AblationRow>& rows, std::ostream* progress) {
    if (channels.empty()) throw std::invalid_argument("no channel counts given");
    for (int64_t c : channels) {
        TrainConfig cfg = base;
        cfg.model.latent_channels = c;
        cfg.out_dir = (fs::path(base.out_dir) / ("c" + std::to_string(c))).string();
        if (progress) (*progress) << "[ablation] training latent_channels=" << c << "\n";
        TrainResult tr = train_vae(cfg, "", progress);

        Dataset data = build_dataset(cfg.data);
        SplitIndices sp = split(data.size(), cfg.data.split[0], cfg.data.split[1], cfg.data.split[2],
                                cfg.data.seed);
        const std::vector<size_t>& eval_idx = sp.val.empty() ? sp.test : sp.val;
        std::unique_ptr<Teacher> teacher = build_teacher(cfg.teacher);
        LoadedVae loaded = load_vae_checkpoint(tr.checkpoint_path);
        TransformGroup group = cfg.transform_group();
        MetricsReport rep = evaluate_model(loaded.bundle->model, *teacher, data, eval_idx, &group);
        rep.config_hash = config_hash(cfg.to_json());
        rep.seed = cfg.seed;
        rep.save((fs::path(cfg.out_dir) / "metrics_report.json").string());

        rows.push_back({c, rep.mean_psnr, rep.mean_ssim, rep.mean_perceptual, rep.ffd, cfg.out_dir});
        if (progress)
            (*progress) << "[ablation] c=" << c << " psnr " << rep.mean_psnr << " ssim " << rep.mean_ssim
                        << " ffd " << rep.ffd << "\n";
    }
}

std::string render_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    char buf[160];
    out << "channels     psnr     ssim  perceptual        ffd\n";
    for (const AblationRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%8lld %8.3f %8.4f %10.5f %10.5f\n",
                      static_cast<long long>(r.channels), r.psnr, r.ssim, r.perceptual, r.ffd);
        out << buf;
    }
    return out.str();
}

}  // namespace reqvae
