#include "reqvae/config.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace reqvae {

namespace {

template <class T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    read_field(j, "seed", c.seed);
    read_field(j, "steps", c.steps);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "lr", c.lr);
    read_field(j, "eval_every", c.eval_every);
    read_field(j, "checkpoint_every", c.checkpoint_every);
    read_field(j, "out_dir", c.out_dir);
    if (j.contains("data")) {
        const json& d = j.at("data");
        read_field(d, "kind", c.data.kind);
        read_field(d, "path", c.data.path);
        read_field(d, "count", c.data.count);
        read_field(d, "resolution", c.data.resolution);
        read_field(d, "seed", c.data.seed);
        if (d.contains("split")) {
            const auto& s = d.at("split");
            for (size_t i = 0; i < 3 && i < s.size(); ++i) c.data.split[i] = s[i].get<double>();
        }
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        read_field(m, "down_factor", c.model.down_factor);
        read_field(m, "latent_channels", c.model.latent_channels);
        read_field(m, "base_width", c.model.base_width);
        read_field(m, "padding", c.model.padding);
    }
    if (j.contains("loss")) {
        const json& l = j.at("loss");
        read_field(l, "w_align", c.loss.w_align);
        read_field(l, "w_equi", c.loss.w_equi);
        read_field(l, "m1", c.loss.m1);
        read_field(l, "m2", c.loss.m2);
        read_field(l, "lambda_gan", c.loss.lambda_gan);
        read_field(l, "lambda_reg", c.loss.lambda_reg);
        read_field(l, "beta_kl", c.loss.beta_kl);
        read_field(l, "perceptual", c.loss.perceptual);
        read_field(l, "token_cap", c.loss.token_cap);
    }
    if (j.contains("teacher")) {
        const json& t = j.at("teacher");
        read_field(t, "kind", c.teacher.kind);
        read_field(t, "seed", c.teacher.seed);
        read_field(t, "path", c.teacher.path);
    }
    if (j.contains("gan")) {
        const json& g = j.at("gan");
        read_field(g, "enabled", c.gan.enabled);
        read_field(g, "base_width", c.gan.base_width);
        read_field(g, "down_layers", c.gan.down_layers);
        read_field(g, "lr", c.gan.lr);
    }
    if (j.contains("transforms")) {
        const json& t = j.at("transforms");
        read_field(t, "preset", c.transforms.preset);
        if (t.contains("entries"))
            for (const auto& e : t.at("entries"))
                c.transforms.entries.emplace_back(e[0].get<std::string>(), e[1].get<double>());
    }
    return c;
}

json TrainConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["steps"] = steps;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["eval_every"] = eval_every;
    j["checkpoint_every"] = checkpoint_every;
    j["out_dir"] = out_dir;
    j["data"] = {{"kind", data.kind},
                 {"path", data.path},
                 {"count", data.count},
                 {"resolution", data.resolution},
                 {"split", {data.split[0], data.split[1], data.split[2]}},
                 {"seed", data.seed}};
    j["model"] = {{"down_factor", model.down_factor},
                  {"latent_channels", model.latent_channels},
                  {"base_width", model.base_width},
                  {"padding", model.padding}};
    j["loss"] = {{"w_align", loss.w_align}, {"w_equi", loss.w_equi},
                 {"m1", loss.m1},           {"m2", loss.m2},
                 {"lambda_gan", loss.lambda_gan}, {"lambda_reg", loss.lambda_reg},
                 {"beta_kl", loss.beta_kl}, {"perceptual", loss.perceptual},
                 {"token_cap", loss.token_cap}};
    j["teacher"] = {{"kind", teacher.kind}, {"seed", teacher.seed}, {"path", teacher.path}};
    j["gan"] = {{"enabled", gan.enabled},
                {"base_width", gan.base_width},
                {"down_layers", gan.down_layers},
                {"lr", gan.lr}};
    json entries = json::array();
    for (const auto& [s, w] : transforms.entries) entries.push_back({s, w});
    j["transforms"] = {{"preset", transforms.preset}, {"entries", entries}};
    return j;
}

std::vector<std::string> TrainConfig::validate() const {
    std::vector<std::string> errs;
    auto require = [&errs](bool ok, const std::string& msg) {
        if (!ok) errs.push_back(msg);
    };
    require(steps >= 1, "steps must be >= 1");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(lr > 0.0, "lr must be positive");
    require(eval_every >= 0, "eval_every must be >= 0");
    require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
    require(!out_dir.empty(), "out_dir must be set");

    require(data.kind == "synthetic" || data.kind == "folder", "data.kind must be 'synthetic' or 'folder'");
    require(data.kind != "folder" || !data.path.empty(), "data.path required for data.kind=folder");
    require(data.kind != "synthetic" || data.count >= 1, "data.count must be >= 1");
    require(data.resolution >= 16, "data.resolution must be >= 16");
    const double fsum = data.split[0] + data.split[1] + data.split[2];
    require(std::fabs(fsum - 1.0) < 1e-9, "data.split fractions must sum to 1");
    for (double f : data.split) require(f >= 0.0, "data.split fractions must be nonnegative");

    require(model.down_factor == 8 || model.down_factor == 16, "model.down_factor must be 8 or 16");
    require(model.latent_channels >= 1 && model.latent_channels <= 512,
            "model.latent_channels must be in [1, 512]");
    require(model.base_width >= 4, "model.base_width must be >= 4");
    require(model.padding == "circular" || model.padding == "zeros",
            "model.padding must be 'circular' or 'zeros'");
    require(data.resolution % model.down_factor == 0, "data.resolution must be divisible by model.down_factor");

    require(loss.w_align >= 0.0, "loss.w_align must be >= 0");
    require(loss.w_equi >= 0.0, "loss.w_equi must be >= 0");
    require(loss.m1 >= 0.0 && loss.m1 <= 1.0, "loss.m1 must be in [0,1]");
    require(loss.m2 >= 0.0 && loss.m2 <= 1.0, "loss.m2 must be in [0,1]");
    require(loss.lambda_gan >= 0.0, "loss.lambda_gan must be >= 0");
    require(loss.lambda_reg >= 0.0, "loss.lambda_reg must be >= 0");
    require(loss.beta_kl >= 0.0, "loss.beta_kl must be >= 0");
    require(loss.perceptual >= 0.0, "loss.perceptual must be >= 0");
    require(loss.token_cap >= 1, "loss.token_cap must be >= 1");
    require(loss.lambda_gan == 0.0 || gan.enabled, "loss.lambda_gan > 0 requires gan.enabled");

    require(teacher.kind == "builtin" || teacher.kind == "file", "teacher.kind must be 'builtin' or 'file'");
    require(teacher.kind != "file" || !teacher.path.empty(), "teacher.path required for teacher.kind=file");
    require(teacher.kind == "builtin" || loss.perceptual == 0.0,
            "file teacher has no gradient path; set loss.perceptual=0");

    require(gan.base_width >= 4, "gan.base_width must be >= 4");
    require(gan.down_layers >= 1 && gan.down_layers <= 4, "gan.down_layers must be in [1,4]");
    require(gan.lr > 0.0, "gan.lr must be positive");

    require(transforms.preset == "default" || transforms.preset == "identity" ||
                transforms.preset == "custom",
            "transforms.preset must be 'default', 'identity', or 'custom'");
    if (transforms.preset == "custom") {
        require(!transforms.entries.empty(), "transforms.entries required for preset=custom");
        try {
            TransformGroup::from_entries(transforms.entries);
        } catch (const std::exception& e) {
            errs.push_back(std::string("transforms.entries: ") + e.what());
        }
    }
    return errs;
}

EncoderConfig TrainConfig::encoder_config() const {
    EncoderConfig ec;
    ec.down_factor = model.down_factor;
    ec.latent_channels = model.latent_channels;
    ec.base_width = model.base_width;
    ec.padding = model.padding == "zeros" ? ad::PadMode::zeros : ad::PadMode::circular;
    return ec;
}

TransformGroup TrainConfig::transform_group() const {
    if (transforms.preset == "identity") return TransformGroup::identity_only();
    if (transforms.preset == "custom") return TransformGroup::from_entries(transforms.entries);
    return TransformGroup::default_group(model.down_factor);
}

EnhancerConfig EnhancerConfig::from_json(const json& j) {
    EnhancerConfig c;
    read_field(j, "seed", c.seed);
    read_field(j, "steps", c.steps);
    read_field(j, "batch_clips", c.batch_clips);
    read_field(j, "lr", c.lr);
    read_field(j, "eval_every", c.eval_every);
    read_field(j, "out_dir", c.out_dir);
    read_field(j, "vae_checkpoint", c.vae_checkpoint);
    read_field(j, "clip_count", c.clip_count);
    read_field(j, "clip_len", c.clip_len);
    read_field(j, "resolution", c.resolution);
    read_field(j, "data_seed", c.data_seed);
    read_field(j, "val_fraction", c.val_fraction);
    read_field(j, "severity", c.severity);
    read_field(j, "sample_steps", c.sample_steps);
    read_field(j, "train_schedule", c.train_schedule);
    read_field(j, "base_width", c.base_width);
    read_field(j, "w_rec", c.w_rec);
    read_field(j, "w_lat", c.w_lat);
    if (j.contains("teacher")) {
        const json& t = j.at("teacher");
        read_field(t, "kind", c.teacher.kind);
        read_field(t, "seed", c.teacher.seed);
        read_field(t, "path", c.teacher.path);
    }
    return c;
}

json EnhancerConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["steps"] = steps;
    j["batch_clips"] = batch_clips;
    j["lr"] = lr;
    j["eval_every"] = eval_every;
    j["out_dir"] = out_dir;
    j["vae_checkpoint"] = vae_checkpoint;
    j["clip_count"] = clip_count;
    j["clip_len"] = clip_len;
    j["resolution"] = resolution;
    j["data_seed"] = data_seed;
    j["val_fraction"] = val_fraction;
    j["severity"] = severity;
    j["sample_steps"] = sample_steps;
    j["train_schedule"] = train_schedule;
    j["base_width"] = base_width;
    j["w_rec"] = w_rec;
    j["w_lat"] = w_lat;
    j["teacher"] = {{"kind", teacher.kind}, {"seed", teacher.seed}, {"path", teacher.path}};
    return j;
}

std::vector<std::string> EnhancerConfig::validate() const {
    std::vector<std::string> errs;
    auto require = [&errs](bool ok, const std::string& msg) {
        if (!ok) errs.push_back(msg);
    };
    require(steps >= 1, "steps must be >= 1");
    require(batch_clips >= 1, "batch_clips must be >= 1");
    require(lr > 0.0, "lr must be positive");
    require(!out_dir.empty(), "out_dir must be set");
    require(!vae_checkpoint.empty(), "vae_checkpoint must be set");
    require(clip_count >= 2, "clip_count must be >= 2");
    require(clip_len >= 1, "clip_len must be >= 1");
    require(resolution >= 16 && resolution % 16 == 0, "resolution must be a positive multiple of 16");
    require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must be in (0,1)");
    require(severity >= 0.0 && severity <= 1.0, "severity must be in [0,1]");
    require(sample_steps >= 1, "sample_steps must be >= 1");
    require(train_schedule >= 2, "train_schedule must be >= 2");
    require(base_width >= 4, "base_width must be >= 4");
    require(w_rec >= 0.0, "w_rec must be >= 0");
    require(w_lat >= 0.0, "w_lat must be >= 0");
    require(teacher.kind == "builtin", "enhancer training supports only the builtin teacher");
    return errs;
}

json apply_overrides(json config, const std::vector<std::string>& overrides) {
    for (const std::string& ov : overrides) {
        const size_t eq = ov.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::invalid_argument("override must look like path.to.key=value, got '" + ov + "'");
        const std::string path = ov.substr(0, eq);
        const std::string raw = ov.substr(eq + 1);

        json* node = &config;
        size_t start = 0;
        while (true) {
            const size_t dot = path.find('.', start);
            const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (key.empty()) throw std::invalid_argument("override has an empty path segment: '" + ov + "'");
            if (dot == std::string::npos) {
                json value;
                try {
                    value = json::parse(raw);
                } catch (const json::parse_error&) {
                    value = raw;  // bare strings need no quotes
                }
                (*node)[key] = value;
                break;
            }
            node = &(*node)[key];
            start = dot + 1;
        }
    }
    return config;
}

// ---------- SHA-256 ----------

namespace {

constexpr uint32_t kSha256K[64] = {
    0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
    0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
    0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
    0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
    0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
    0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
    0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
    0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};

inline uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

}  // namespace

std::string sha256_hex(const std::string& data) {
    uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                     0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};

    std::string msg = data;
    const uint64_t bit_len = static_cast<uint64_t>(data.size()) * 8;
    msg.push_back('\x80');
    while (msg.size() % 64 != 56) msg.push_back('\0');
    for (int i = 7; i >= 0; --i) msg.push_back(static_cast<char>((bit_len >> (i * 8)) & 0xff));

    for (size_t off = 0; off < msg.size(); off += 64) {
        uint32_t w[64];
        for (int i = 0; i < 16; ++i)
            w[i] = (static_cast<uint32_t>(static_cast<unsigned char>(msg[off + i * 4])) << 24) |
                   (static_cast<uint32_t>(static_cast<unsigned char>(msg[off + i * 4 + 1])) << 16) |
                   (static_cast<uint32_t>(static_cast<unsigned char>(msg[off + i * 4 + 2])) << 8) |
                   static_cast<uint32_t>(static_cast<unsigned char>(msg[off + i * 4 + 3]));
        for (int i = 16; i < 64; ++i) {
            const uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            const uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
        for (int i = 0; i < 64; ++i) {
            const uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            const uint32_t ch = (e & f) ^ (~e & g);
            const uint32_t t1 = hh + s1 + ch + kSha256K[i] + w[i];
            const uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            const uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            const uint32_t t2 = s0 + maj;
            hh = g;
            g = f;
            f = e;
            e = d + t1;
            d = c;
            c = b;
            b = a;
            a = t1 + t2;
        }
        h[0] += a;
        h[1] += b;
        h[2] += c;
        h[3] += d;
        h[4] += e;
        h[5] += f;
        h[6] += g;
        h[7] += hh;
    }

    char out[65];
    for (int i = 0; i < 8; ++i) std::snprintf(out + i * 8, 9, "%08x", h[i]);
    return std::string(out, 64);
}

std::string config_hash(const json& config) { return sha256_hex(config.dump()); }

DirLock::DirLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".lock").string();
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST)
            throw std::runtime_error("output directory " + dir +
                                     " is locked by another run (delete " + path_ + " if stale)");
        throw std::runtime_error("cannot create lockfile " + path_ + ": " + std::strerror(errno));
    }
    ::close(fd);
}

DirLock::~DirLock() { ::unlink(path_.c_str()); }

std::string iso_timestamp_utc() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_manifest(const std::string& dir, const json& manifest) {
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

}  // namespace reqvae
