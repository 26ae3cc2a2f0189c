#pragma once

#include <array>
#include <string>
#include <vector>

#include "json.hpp"
#include "reqvae/metrics.hpp"
#include "reqvae/tensor.hpp"

namespace reqvae {

struct Series {
    std::string label;
    std::vector<double> x, y;
};

/// 5x7 bitmap text (uppercased); coordinates are the top-left corner.
void draw_text(Tensor& img, int64_t y, int64_t x, const std::string& text,
               const std::array<double, 3>& color, int64_t scale = 1);

/// Line plot over a white background with axes, tick labels and a
/// legend; returns a [3,H,W] image in [-1, 1].
Tensor render_plot(const std::vector<Series>& series, const std::string& title,
                   const std::string& xlabel, const std::string& ylabel, int64_t width = 480,
                   int64_t height = 320);

std::vector<nlohmann::json> read_jsonl(const std::string& path);

/// Metric-vs-channel-count plots from already-computed ablation rows.
void write_ablation_plots(const std::vector<AblationRow>& rows, const std::string& dir);

/// Loss and eval curves from a stored metrics.jsonl, no recomputation.
void write_training_plots(const std::string& metrics_jsonl, const std::string& dir);

}  // namespace reqvae
