#pragma once

#include <memory>
#include <string>
#include <vector>

#include "reqvae/autodiff.hpp"
#include "reqvae/nn.hpp"
#include "reqvae/rng.hpp"

namespace reqvae {

/// Frozen feature extractor providing alignment targets and the
/// perceptual distance. Gradients never reach teacher parameters; the
/// builtin teacher is still differentiable with respect to its input.
class Teacher {
public:
    virtual ~Teacher() = default;
    virtual int64_t feature_dim() const = 0;
    /// False for the file-backed teacher: features exist only for known
    /// dataset ids, so no gradient path through extraction.
    virtual bool differentiable() const = 0;
    /// imgs: [B,3,H,W] -> features [B,D,ht,wt]. ids parallel the batch;
    /// the builtin teacher ignores them.
    virtual ad::Var extract(const ad::Var& imgs, const std::vector<std::string>& ids) const = 0;

    Tensor extract_plain(const Tensor& imgs, const std::vector<std::string>& ids) const;
};

/// Small frozen conv net with seeded portable initialization (D = 64,
/// grid H/4 x W/4). Identical weights for identical seeds everywhere.
std::unique_ptr<Teacher> make_builtin_teacher(uint64_t seed);

/// Tensor archive with one feature grid per image id; grid dims declared
/// in the archive metadata and enforced on every lookup.
std::unique_ptr<Teacher> load_file_teacher(const std::string& archive_path);

/// Bilinear spatial resample of a feature grid [D,h,w] or [B,D,h,w],
/// corner-aligned so a 2x2 grid blown up to 3x3 puts the corner mean at
/// the center.
Tensor resample_to_grid(const Tensor& f, int64_t h, int64_t w);

/// mean over tokens of ReLU(1 - m1 - cos(z_proj_i, f_i)).
/// z_proj: [N,D] (differentiable), f: [N,D] treated as constant.
ad::Var cosine_align_loss(const ad::Var& z_proj, const Tensor& f, double m1);

/// mean over the N^2 token pairs of ReLU(|cos(z_i,z_j) - cos(f_i,f_j)| - m2).
/// z: [N,C] (differentiable), f: [N,Dt] constant; C and Dt may differ.
ad::Var distance_align_loss(const ad::Var& z_tokens, const Tensor& f_tokens, double m2);

/// Row indices selecting at most `cap` of n tokens, seeded uniform
/// subsample without replacement; identity permutation-free when n <= cap.
std::vector<int64_t> subsample_tokens(int64_t n, int64_t cap, Rng& rng);

}  // namespace reqvae
