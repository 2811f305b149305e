#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mpem/common.hpp"
#include "mpem/model.hpp"

namespace mpem::model {

// Checkpoint container: magic + version, the ModelConfig, then every
// parameter block by name with explicit shape, data as little-endian
// 32-bit floats. The loader rebuilds params from the stored config and
// demands exact name/shape agreement and finite values.
namespace ckpt_detail {

constexpr char kMagic[8] = {'M', 'P', 'E', 'M', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v, const std::string& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint " + path + ": truncated");
}

}  // namespace ckpt_detail

inline void save_checkpoint(const GeneratorParams& p, const std::string& path) {
    using namespace ckpt_detail;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    write_pod(out, static_cast<int32_t>(p.cfg.d));
    write_pod(out, static_cast<int32_t>(p.cfg.n_layers));
    write_pod(out, static_cast<int32_t>(p.cfg.n_heads));
    write_pod(out, static_cast<int32_t>(p.cfg.d_ff));
    write_pod(out, static_cast<int32_t>(p.cfg.max_seq_len));
    write_pod(out, static_cast<int32_t>(p.cfg.vocab_size));
    write_pod(out, p.cfg.init_scale);
    write_pod(out, static_cast<uint64_t>(p.cfg.seed));

    auto blocks = named_blocks(p);
    write_pod(out, static_cast<uint32_t>(blocks.size()));
    std::vector<float> buf;
    for (auto& [name, m] : blocks) {
        write_pod(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(out, static_cast<int32_t>(m->rows));
        write_pod(out, static_cast<int32_t>(m->cols));
        buf.resize(m->a.size());
        for (size_t i = 0; i < m->a.size(); ++i) buf[i] = static_cast<float>(m->a[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw DataError("checkpoint write failed: " + path);
}

inline GeneratorParams load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("checkpoint " + path + ": bad magic");
    uint32_t version = 0;
    read_pod(in, version, path);
    if (version != kVersion)
        throw DataError("checkpoint " + path + ": unsupported version " +
                        std::to_string(version));

    ModelConfig cfg;
    int32_t v32;
    read_pod(in, v32, path); cfg.d = v32;
    read_pod(in, v32, path); cfg.n_layers = v32;
    read_pod(in, v32, path); cfg.n_heads = v32;
    read_pod(in, v32, path); cfg.d_ff = v32;
    read_pod(in, v32, path); cfg.max_seq_len = v32;
    read_pod(in, v32, path); cfg.vocab_size = v32;
    read_pod(in, cfg.init_scale, path);
    uint64_t seed;
    read_pod(in, seed, path);
    cfg.seed = seed;
    validate_config(cfg);

    GeneratorParams p = init_params(cfg);
    auto blocks = named_blocks(p);
    uint32_t n_blocks = 0;
    read_pod(in, n_blocks, path);
    if (n_blocks != blocks.size())
        throw DataError("checkpoint " + path + ": block count mismatch");
    std::vector<float> buf;
    for (auto& [name, m] : blocks) {
        uint32_t name_len = 0;
        read_pod(in, name_len, path);
        std::string stored(name_len, '\0');
        in.read(stored.data(), name_len);
        if (!in || stored != name)
            throw DataError("checkpoint " + path + ": expected block '" + name + "', found '" +
                            stored + "'");
        int32_t rows = 0, cols = 0;
        read_pod(in, rows, path);
        read_pod(in, cols, path);
        if (rows != m->rows || cols != m->cols)
            throw DataError("checkpoint " + path + ": shape mismatch for '" + name + "'");
        buf.resize(m->a.size());
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!in) throw DataError("checkpoint " + path + ": truncated block '" + name + "'");
        for (size_t i = 0; i < buf.size(); ++i) {
            if (!std::isfinite(buf[i]))
                throw DataError("checkpoint " + path + ": non-finite value in '" + name + "'");
            m->a[i] = static_cast<double>(buf[i]);
        }
    }
    return p;
}

}  // namespace mpem::model
