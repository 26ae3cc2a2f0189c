#pragma once

#include <string>

#include "reqvae/tensor.hpp"

namespace reqvae {

/// Writes a [3,H,W] tensor with values in [-1, 1] as an 8-bit RGB PNG.
void write_png(const std::string& path, const Tensor& img);

/// Reads any PNG as RGB into a [3,H,W] tensor in [-1, 1].
Tensor read_png(const std::string& path);

}  // namespace reqvae
