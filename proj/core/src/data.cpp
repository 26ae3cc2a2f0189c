#include "reqvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"
#include "reqvae/png_io.hpp"
#include "reqvae/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace reqvae {

namespace {

double wrapd(double x, double n) { return x - std::floor(x / n) * n; }

struct Grating {
    double fy, fx, phase;
    double amp[3];
};

struct Octave {
    int64_t cell, ly, lx;
    double amp;
    std::vector<double> lattice[3];
};

struct Polygon {
    double cy, cx, radius, rot, alpha;
    int sides;
    double color[3];
};

struct Texture {
    int64_t h, w;
    std::vector<Grating> gratings;
    std::vector<Octave> octaves;
    std::vector<Polygon> polys;

    /// Wraps coordinates first: integer-offset evaluations then reuse the
    /// identical canonical coordinate, making periodicity bit-exact.
    void eval(double u, double v, double out[3]) const {
        const double uw = wrapd(u, static_cast<double>(h));
        const double vw = wrapd(v, static_cast<double>(w));
        out[0] = out[1] = out[2] = 0.0;
        constexpr double tau = 2.0 * std::numbers::pi;
        for (const auto& g : gratings) {
            const double s = std::sin(tau * (g.fy * uw / h + g.fx * vw / w) + g.phase);
            for (int c = 0; c < 3; ++c) out[c] += g.amp[c] * s;
        }
        for (const auto& o : octaves) {
            const double lu = uw / o.cell;
            const double lv = vw / o.cell;
            const int64_t i0 = static_cast<int64_t>(lu) % o.ly, j0 = static_cast<int64_t>(lv) % o.lx;
            const int64_t i1 = (i0 + 1) % o.ly, j1 = (j0 + 1) % o.lx;
            const double fu = lu - std::floor(lu), fv = lv - std::floor(lv);
            for (int c = 0; c < 3; ++c) {
                const auto& lat = o.lattice[c];
                const double top = lat[i0 * o.lx + j0] * (1 - fv) + lat[i0 * o.lx + j1] * fv;
                const double bot = lat[i1 * o.lx + j0] * (1 - fv) + lat[i1 * o.lx + j1] * fv;
                out[c] += o.amp * (top * (1 - fu) + fu * bot);
            }
        }
        for (const auto& p : polys) {
            bool inside = false;
            for (int oy = -1; oy <= 1 && !inside; ++oy)
                for (int ox = -1; ox <= 1 && !inside; ++ox) {
                    const double py = uw - (p.cy + oy * h), px = vw - (p.cx + ox * w);
                    if (py * py + px * px > p.radius * p.radius * 1.1) continue;
                    inside = true;
                    for (int e = 0; e < p.sides && inside; ++e) {
                        const double a0 = p.rot + tau * e / p.sides;
                        const double a1 = p.rot + tau * (e + 1) / p.sides;
                        const double ey = p.radius * (std::sin(a1) - std::sin(a0));
                        const double ex = p.radius * (std::cos(a1) - std::cos(a0));
                        const double ry = py - p.radius * std::sin(a0);
                        const double rx = px - p.radius * std::cos(a0);
                        if (ex * ry - ey * rx < 0.0) inside = false;
                    }
                }
            if (inside)
                for (int c = 0; c < 3; ++c) out[c] = out[c] * (1.0 - p.alpha) + p.color[c] * p.alpha;
        }
        for (int c = 0; c < 3; ++c) out[c] = std::clamp(out[c], -1.0, 1.0);
    }
};

Texture make_texture(uint64_t seed, int64_t h, int64_t w) {
    Texture t;
    t.h = h;
    t.w = w;
    Rng rng = Rng::derive(seed, 0x7e87);

    const int ng = static_cast<int>(rng.uniform_int(2, 4));
    for (int i = 0; i < ng; ++i) {
        Grating g;
        g.fy = static_cast<double>(rng.uniform_int(0, 4));
        g.fx = static_cast<double>(rng.uniform_int(0, 4));
        if (g.fy == 0.0 && g.fx == 0.0) g.fx = 1.0;
        g.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (int c = 0; c < 3; ++c) g.amp[c] = rng.uniform(0.1, 0.4);
        t.gratings.push_back(g);
    }

    for (int64_t cell : {8, 16}) {
        Octave o;
        o.cell = cell;
        o.ly = h / cell;
        o.lx = w / cell;
        o.amp = cell == 8 ? 0.25 : 0.4;
        for (int c = 0; c < 3; ++c) {
            o.lattice[c].resize(static_cast<size_t>(o.ly * o.lx));
            for (auto& v : o.lattice[c]) v = rng.uniform(-1.0, 1.0);
        }
        t.octaves.push_back(std::move(o));
    }

    const int np = static_cast<int>(rng.uniform_int(1, 3));
    for (int i = 0; i < np; ++i) {
        Polygon p;
        p.cy = rng.uniform(0.0, static_cast<double>(h));
        p.cx = rng.uniform(0.0, static_cast<double>(w));
        p.radius = rng.uniform(0.1, 0.3) * std::min(h, w);
        p.rot = rng.uniform(0.0, 2.0 * std::numbers::pi);
        p.sides = static_cast<int>(rng.uniform_int(3, 6));
        p.alpha = rng.uniform(0.5, 0.9);
        for (int c = 0; c < 3; ++c) p.color[c] = rng.uniform(-0.9, 0.9);
        t.polys.push_back(p);
    }
    return t;
}

Tensor render(const Texture& t, double off_y, double off_x, double zoom) {
    Tensor img({3, t.h, t.w});
    const double cy = (t.h - 1) * 0.5, cx = (t.w - 1) * 0.5;
    double px[3];
    for (int64_t y = 0; y < t.h; ++y)
        for (int64_t x = 0; x < t.w; ++x) {
            const double u = zoom == 1.0 ? y + off_y : cy + (y - cy) * zoom + off_y;
            const double v = zoom == 1.0 ? x + off_x : cx + (x - cx) * zoom + off_x;
            t.eval(u, v, px);
            for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) = px[c];
        }
    return img;
}

}  // namespace

SceneClip generate_scene(uint64_t seed, int64_t t, int64_t h, int64_t w, std::optional<PathKind> force_path) {
    if (h % 16 || w % 16)
        throw std::invalid_argument("generate_scene: dims must be divisible by 16, got " + std::to_string(h) +
                                    "x" + std::to_string(w));
    const Texture tex = make_texture(seed, h, w);
    Rng rng = Rng::derive(seed, 0x9a7b);

    SceneClip clip;
    clip.seed = seed;
    clip.path = force_path.value_or(rng.uniform() < 0.7 ? PathKind::translate : PathKind::zoom);
    if (clip.path == PathKind::translate) {
        int64_t py = 0, px = 0;
        while (py == 0 && px == 0) {
            py = rng.uniform_int(-3, 3);
            px = rng.uniform_int(-3, 3);
        }
        clip.step_y = -py;
        clip.step_x = -px;
        for (int64_t i = 0; i < t; ++i)
            clip.frames.push_back(render(tex, static_cast<double>(i * py), static_cast<double>(i * px), 1.0));
    } else {
        double rate = 0.0;
        while (std::fabs(rate) < 0.02) rate = rng.uniform(-0.08, 0.08);
        clip.zoom_rate = rate;
        for (int64_t i = 0; i < t; ++i) clip.frames.push_back(render(tex, 0.0, 0.0, std::exp(rate * i)));
    }
    return clip;
}

Dataset generate_corpus(uint64_t seed, int64_t count, int64_t h, int64_t w) {
    Dataset ds;
    ds.h = h;
    ds.w = w;
    for (int64_t i = 0; i < count; ++i) {
        const uint64_t scene_seed = Rng::derive(seed, 0xc0'9f, static_cast<uint64_t>(i)).next_u64();
        ds.items.push_back(std::move(generate_scene(scene_seed, 1, h, w).frames[0]));
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scene_%05lld", static_cast<long long>(i));
        ds.ids.emplace_back(buf);
    }
    return ds;
}

Dataset load_folder(const std::string& path, int64_t resolution) {
    if (!fs::is_directory(path)) throw std::runtime_error("load_folder: not a directory: " + path);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(path))
        if (entry.is_regular_file() && entry.path().extension() == ".png") names.push_back(entry.path().filename());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw std::runtime_error("load_folder: no .png files in " + path);

    Dataset ds;
    ds.h = ds.w = resolution;
    for (const auto& name : names) {
        Tensor img = read_png((fs::path(path) / name).string());
        const int64_t h = img.size(1), w = img.size(2);
        const int64_t side = std::min(h, w);
        if (h != w) {
            const int64_t y0 = (h - side) / 2, x0 = (w - side) / 2;
            Tensor crop({3, side, side});
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t y = 0; y < side; ++y)
                    for (int64_t x = 0; x < side; ++x) crop.at(c, y, x) = img.at(c, y0 + y, x0 + x);
            img = std::move(crop);
        }
        if (side != resolution) img = resize_area(img, resolution, resolution);
        ds.items.push_back(std::move(img));
        ds.ids.push_back(fs::path(name).stem().string());
    }
    return ds;
}

SplitIndices split(size_t n, double ftrain, double fval, double ftest, uint64_t seed) {
    if (std::fabs(ftrain + fval + ftest - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions must sum to 1");
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng = Rng::derive(seed, 0x5b'11);
    rng.shuffle(idx);
    const size_t ntrain = static_cast<size_t>(std::llround(ftrain * static_cast<double>(n)));
    const size_t nval = static_cast<size_t>(std::llround(fval * static_cast<double>(n)));
    SplitIndices s;
    for (size_t i = 0; i < n; ++i) {
        if (i < ntrain)
            s.train.push_back(idx[i]);
        else if (i < ntrain + nval)
            s.val.push_back(idx[i]);
        else
            s.test.push_back(idx[i]);
    }
    return s;
}

void save_clip(const std::string& dir, const SceneClip& clip) {
    fs::create_directories(dir);
    for (size_t i = 0; i < clip.frames.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "frame_%04zu.png", i);
        write_png((fs::path(dir) / buf).string(), clip.frames[i]);
    }
    json meta;
    meta["frames"] = clip.frames.size();
    meta["height"] = clip.frames.empty() ? 0 : clip.frames[0].size(1);
    meta["width"] = clip.frames.empty() ? 0 : clip.frames[0].size(2);
    meta["seed"] = clip.seed;
    meta["path"] = clip.path == PathKind::translate ? "translate" : "zoom";
    meta["step"] = {clip.step_y, clip.step_x};
    meta["zoom_rate"] = clip.zoom_rate;
    std::ofstream out(fs::path(dir) / "clip.json");
    out << meta.dump(2) << "\n";
}

SceneClip load_clip(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "clip.json");
    if (!in) throw std::runtime_error("load_clip: missing " + dir + "/clip.json");
    json meta = json::parse(in);
    SceneClip clip;
    clip.seed = meta.value("seed", 0ull);
    clip.path = meta.value("path", "translate") == std::string("zoom") ? PathKind::zoom : PathKind::translate;
    if (meta.contains("step")) {
        clip.step_y = meta["step"][0].get<int64_t>();
        clip.step_x = meta["step"][1].get<int64_t>();
    }
    clip.zoom_rate = meta.value("zoom_rate", 0.0);
    const size_t t = meta.at("frames").get<size_t>();
    for (size_t i = 0; i < t; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "frame_%04zu.png", i);
        clip.frames.push_back(read_png((fs::path(dir) / buf).string()));
    }
    return clip;
}

}  // namespace reqvae
