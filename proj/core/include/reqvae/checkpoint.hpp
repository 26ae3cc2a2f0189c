#pragma once

#include <map>
#include <string>

#include "json.hpp"
#include "reqvae/tensor.hpp"

namespace reqvae {

/// Self-describing binary tensor archive: magic, format version, a JSON
/// metadata block, then named float64 tensors. Round-trips bit-exactly.
struct TensorArchive {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;

    void save(const std::string& path) const;
    static TensorArchive load(const std::string& path);
};

/// FNV-1a over shapes and raw tensor bytes in name order; detects any
/// parameter drift (used by the frozen-model contracts).
uint64_t content_hash(const std::map<std::string, Tensor>& tensors);

}  // namespace reqvae
