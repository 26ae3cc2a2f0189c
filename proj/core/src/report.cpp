#include "reqvae/report.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "reqvae/png_io.hpp"

namespace fs = std::filesystem;

namespace reqvae {

namespace {

struct Glyph {
    char c;
    uint8_t rows[7];
};

constexpr Glyph kFont[] = {
    {' ', {0, 0, 0, 0, 0, 0, 0}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'.', {0, 0, 0, 0, 0, 0x0C, 0x0C}},
    {',', {0, 0, 0, 0, 0x0C, 0x04, 0x08}},
    {'-', {0, 0, 0, 0x1F, 0, 0, 0}},
    {'+', {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}},
    {':', {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}},
    {'=', {0, 0, 0x1F, 0, 0x1F, 0, 0}},
    {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {'_', {0, 0, 0, 0, 0, 0, 0x1F}},
    {'%', {0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13}},
};

const uint8_t* glyph_rows(char c) {
    for (const Glyph& g : kFont)
        if (g.c == c) return g.rows;
    return nullptr;
}

void put_pixel(Tensor& img, int64_t y, int64_t x, const std::array<double, 3>& color) {
    if (y < 0 || x < 0 || y >= img.size(1) || x >= img.size(2)) return;
    for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) = color[static_cast<size_t>(c)];
}

void draw_line(Tensor& img, int64_t y0, int64_t x0, int64_t y1, int64_t x1,
               const std::array<double, 3>& color) {
    const int64_t dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int64_t sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int64_t err = dx + dy;
    while (true) {
        put_pixel(img, y0, x0, color);
        if (x0 == x1 && y0 == y1) break;
        const int64_t e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

void draw_marker(Tensor& img, int64_t y, int64_t x, const std::array<double, 3>& color) {
    for (int64_t dy = -1; dy <= 1; ++dy)
        for (int64_t dx = -1; dx <= 1; ++dx) put_pixel(img, y + dy, x + dx, color);
}

std::string format_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

constexpr std::array<double, 3> kPalette[] = {
    {0.10, 0.25, 0.85},   // blue
    {0.85, 0.15, 0.15},   // red
    {0.05, 0.55, 0.20},   // green
    {0.75, 0.45, 0.05},   // orange
    {0.50, 0.10, 0.60},   // purple
    {0.05, 0.55, 0.55},   // teal
};

}  // namespace

void draw_text(Tensor& img, int64_t y, int64_t x, const std::string& text,
               const std::array<double, 3>& color, int64_t scale) {
    int64_t cx = x;
    for (char raw : text) {
        const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
        const uint8_t* rows = glyph_rows(c);
        if (rows) {
            for (int64_t ry = 0; ry < 7; ++ry)
                for (int64_t rx = 0; rx < 5; ++rx)
                    if (rows[ry] & (1 << (4 - rx)))
                        for (int64_t sy = 0; sy < scale; ++sy)
                            for (int64_t sx = 0; sx < scale; ++sx)
                                put_pixel(img, y + ry * scale + sy, cx + rx * scale + sx, color);
        }
        cx += 6 * scale;
    }
}

Tensor render_plot(const std::vector<Series>& series, const std::string& title,
                   const std::string& xlabel, const std::string& ylabel, int64_t width,
                   int64_t height) {
    if (series.empty()) throw std::invalid_argument("nothing to plot");
    Tensor img({3, height, width});
    std::fill(img.data(), img.data() + img.numel(), 1.0);

    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const Series& s : series) {
        if (s.x.size() != s.y.size()) throw std::invalid_argument("series x/y lengths differ");
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (!std::isfinite(xmin) || !std::isfinite(ymin)) throw std::invalid_argument("empty series");
    if (xmax - xmin < 1e-12) {
        xmin -= 1.0;
        xmax += 1.0;
    }
    if (ymax - ymin < 1e-12) {
        ymin -= 1.0;
        ymax += 1.0;
    }
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    const int64_t left = 56, right = width - 16, top = 24, bottom = height - 32;
    const std::array<double, 3> axis{0.15, 0.15, 0.15};
    const std::array<double, 3> grid{0.85, 0.85, 0.85};

    auto px = [&](double x) {
        return left + static_cast<int64_t>(std::lround((x - xmin) / (xmax - xmin) * (right - left)));
    };
    auto py = [&](double y) {
        return bottom - static_cast<int64_t>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top)));
    };

    for (int t = 0; t <= 4; ++t) {
        const double yv = ymin + (ymax - ymin) * t / 4.0;
        const double xv = xmin + (xmax - xmin) * t / 4.0;
        draw_line(img, py(yv), left, py(yv), right, grid);
        draw_line(img, top, px(xv), bottom, px(xv), grid);
        draw_text(img, py(yv) - 3, 2, format_tick(yv), axis);
        draw_text(img, bottom + 4, px(xv) - 8, format_tick(xv), axis);
    }
    draw_line(img, top, left, bottom, left, axis);
    draw_line(img, bottom, left, bottom, right, axis);
    draw_text(img, 6, left, title, axis);
    draw_text(img, height - 12, (left + right) / 2, xlabel, axis);
    draw_text(img, top, 2, ylabel, axis);

    for (size_t si = 0; si < series.size(); ++si) {
        const Series& s = series[si];
        const auto& color = kPalette[si % std::size(kPalette)];
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            draw_line(img, py(s.y[i]), px(s.x[i]), py(s.y[i + 1]), px(s.x[i + 1]), color);
        for (size_t i = 0; i < s.x.size(); ++i) draw_marker(img, py(s.y[i]), px(s.x[i]), color);
        draw_text(img, top + 10 * static_cast<int64_t>(si) + 2, right - 6 * static_cast<int64_t>(s.label.size()),
                  s.label, color);
    }

    for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = 2.0 * img.data()[i] - 1.0;
    return img;
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::vector<nlohmann::json> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        lines.push_back(nlohmann::json::parse(line));
    }
    return lines;
}

void write_ablation_plots(const std::vector<AblationRow>& rows, const std::string& dir) {
    if (rows.empty()) throw std::invalid_argument("no ablation rows to plot");
    fs::create_directories(dir);
    std::vector<double> x;
    for (const AblationRow& r : rows) x.push_back(static_cast<double>(r.channels));
    const struct {
        const char* name;
        const char* title;
        double AblationRow::* field;
    } plots[] = {
        {"psnr_vs_channels.png", "psnr vs latent channels", &AblationRow::psnr},
        {"ssim_vs_channels.png", "ssim vs latent channels", &AblationRow::ssim},
        {"perceptual_vs_channels.png", "teacher distance vs latent channels", &AblationRow::perceptual},
        {"ffd_vs_channels.png", "feature frechet distance vs latent channels", &AblationRow::ffd},
    };
    for (const auto& p : plots) {
        Series s;
        s.label = "value";
        s.x = x;
        for (const AblationRow& r : rows) s.y.push_back(r.*p.field);
        write_png((fs::path(dir) / p.name).string(),
                  render_plot({s}, p.title, "latent channels", ""));
    }
}

void write_training_plots(const std::string& metrics_jsonl, const std::string& dir) {
    const std::vector<nlohmann::json> lines = read_jsonl(metrics_jsonl);
    if (lines.empty()) throw std::runtime_error(metrics_jsonl + " has no records");
    fs::create_directories(dir);

    std::map<std::string, Series> train, eval;
    for (const nlohmann::json& l : lines) {
        if (!l.contains("step")) continue;
        const double step = l.at("step").get<double>();
        for (const auto& [key, value] : l.items()) {
            if (key == "step" || key == "transform" || !value.is_number()) continue;
            auto& bucket = key.rfind("eval_", 0) == 0 ? eval : train;
            Series& s = bucket[key];
            s.label = key;
            s.x.push_back(step);
            s.y.push_back(value.get<double>());
        }
    }

    if (!train.empty()) {
        std::vector<Series> series;
        for (auto& [key, s] : train) series.push_back(std::move(s));
        write_png((fs::path(dir) / "loss_curves.png").string(),
                  render_plot(series, "training terms", "step", ""));
    }
    if (!eval.empty()) {
        std::vector<Series> series;
        for (auto& [key, s] : eval) series.push_back(std::move(s));
        write_png((fs::path(dir) / "eval_curves.png").string(),
                  render_plot(series, "held-out metrics", "step", ""));
    }
}

}  // namespace reqvae
