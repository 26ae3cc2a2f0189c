#include "reqvae/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace reqvae {

namespace {

constexpr char kMagic[4] = {'R', 'Q', 'T', 'A'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& is) {
    uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::istream& is) {
    uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is) {
    const uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

}  // namespace

void TensorArchive::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("archive save: cannot open " + path);
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_str(os, meta.dump());
    write_u64(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_str(os, name);
        write_u32(os, static_cast<uint32_t>(t.ndim()));
        for (int64_t i = 0; i < t.ndim(); ++i) write_u64(os, static_cast<uint64_t>(t.size(i)));
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
    }
    if (!os) throw std::runtime_error("archive save: write failed for " + path);
}

TensorArchive TensorArchive::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("archive load: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("archive load: " + path + " is not a tensor archive");
    const uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error("archive load: unsupported format version " + std::to_string(version));

    TensorArchive a;
    a.meta = nlohmann::json::parse(read_str(is));
    const uint64_t count = read_u64(is);
    for (uint64_t i = 0; i < count; ++i) {
        const std::string name = read_str(is);
        const uint32_t ndim = read_u32(is);
        Shape shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int64_t>(read_u64(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
        if (!is) throw std::runtime_error("archive load: truncated tensor " + name + " in " + path);
        a.tensors.emplace(name, std::move(t));
    }
    return a;
}

uint64_t content_hash(const std::map<std::string, Tensor>& tensors) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& [name, t] : tensors) {
        mix(name.data(), name.size());
        for (int64_t i = 0; i < t.ndim(); ++i) {
            const int64_t s = t.size(i);
            mix(&s, sizeof(s));
        }
        mix(t.data(), static_cast<size_t>(t.numel()) * 8);
    }
    return h;
}

}  // namespace reqvae
