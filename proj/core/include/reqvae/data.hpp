#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "reqvae/tensor.hpp"

namespace reqvae {

enum class PathKind { translate, zoom };

/// A short procedurally generated clip. Textures are periodic in both
/// axes, so translation paths with integer steps make consecutive frames
/// exact circular shifts of each other.
struct SceneClip {
    std::vector<Tensor> frames;  // each [3,H,W], values in [-1, 1]
    uint64_t seed = 0;
    PathKind path = PathKind::translate;
    /// For translate paths: frame t+1 == apply(shift(step_y, step_x), frame t).
    int64_t step_y = 0, step_x = 0;
    double zoom_rate = 0.0;
};

SceneClip generate_scene(uint64_t seed, int64_t t, int64_t h, int64_t w,
                         std::optional<PathKind> force_path = std::nullopt);

struct Dataset {
    std::vector<Tensor> items;  // each [3,H,W]
    std::vector<std::string> ids;
    int64_t h = 0, w = 0;

    size_t size() const { return items.size(); }
};

/// `count` single frames from distinct scene seeds derived from `seed`.
Dataset generate_corpus(uint64_t seed, int64_t count, int64_t h, int64_t w);

/// Sorted *.png files, center-cropped square and box-resized to
/// `resolution`, normalized to [-1, 1].
Dataset load_folder(const std::string& path, int64_t resolution);

struct SplitIndices {
    std::vector<size_t> train, val, test;
};

/// Disjoint, exhaustive, seed-deterministic assignment of n items.
SplitIndices split(size_t n, double ftrain, double fval, double ftest, uint64_t seed);

/// Clip directory: numbered frame PNGs plus a clip.json sidecar.
void save_clip(const std::string& dir, const SceneClip& clip);
SceneClip load_clip(const std::string& dir);

}  // namespace reqvae
