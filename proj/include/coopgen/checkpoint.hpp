#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "coopgen/arch.hpp"
#include "coopgen/coop_train.hpp"

namespace coopgen {

// Self-describing binary checkpoint: magic, version, little-endian lengths
// and payloads. Carries both architectures, all parameters, Adam moments,
// the epoch counter and the RNG state, so load(save(x)) == x bit for bit and
// a resumed run is step-identical to an uninterrupted one.
namespace ckpt {

constexpr char kMagic[8] = {'C', 'O', 'O', 'P', 'G', 'E', 'N', '1'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
    std::ofstream out;
    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw IoError("cannot write checkpoint " + path);
    }
    void bytes(const void* p, std::size_t n) { out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) {
        std::uint8_t b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
        bytes(b, 4);
    }
    void u64(std::uint64_t v) {
        std::uint8_t b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
        bytes(b, 8);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
};

struct Reader {
    std::ifstream in;
    std::string path;
    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("cannot open checkpoint " + p);
    }
    void bytes(void* p, std::size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n)) throw IoError("truncated checkpoint " + path);
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint8_t b[4];
        bytes(b, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint8_t b[8];
        bytes(b, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        std::string s(u64(), '\0');
        bytes(s.data(), s.size());
        return s;
    }
};

template <typename T>
void write_scalar(Writer& w, T v) {
    if constexpr (sizeof(T) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        w.u32(bits);
    } else {
        w.f64(static_cast<double>(v));
    }
}

template <typename T>
T read_scalar(Reader& r) {
    if constexpr (sizeof(T) == 4) {
        std::uint32_t bits = r.u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    } else {
        return static_cast<T>(r.f64());
    }
}

template <typename T>
void write_tensor_map(Writer& w, const NamedTensors<T>& m) {
    w.u64(m.size());
    for (const auto& [name, t] : m) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
        for (std::int64_t i = 0; i < t.numel(); ++i) write_scalar<T>(w, t[i]);
    }
}

template <typename T>
NamedTensors<T> read_tensor_map(Reader& r) {
    NamedTensors<T> m;
    const std::uint64_t count = r.u64();
    for (std::uint64_t k = 0; k < count; ++k) {
        std::string name = r.str();
        Shape shape(r.u32());
        for (auto& d : shape) d = static_cast<std::int64_t>(r.u64());
        TensorT<T> t(shape);
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = read_scalar<T>(r);
        m.emplace(std::move(name), std::move(t));
    }
    return m;
}

}  // namespace ckpt

template <typename T>
void save_checkpoint(const std::string& path, const TrainState<T>& state) {
    ckpt::Writer w(path);
    w.bytes(ckpt::kMagic, 8);
    w.u32(ckpt::kVersion);
    w.u8(sizeof(T));
    w.str(arch_to_string(state.generator.arch));
    w.str(arch_to_string(state.energy.arch));
    w.f64(static_cast<double>(state.generator.residual_std));
    w.f64(static_cast<double>(state.energy.reference_std));
    w.u64(static_cast<std::uint64_t>(state.epoch));
    w.u64(static_cast<std::uint64_t>(state.adam_gen.t));
    w.u64(static_cast<std::uint64_t>(state.adam_energy.t));
    ckpt::write_tensor_map(w, state.generator.params);
    ckpt::write_tensor_map(w, state.energy.params);
    ckpt::write_tensor_map(w, state.adam_gen.m);
    ckpt::write_tensor_map(w, state.adam_gen.v);
    ckpt::write_tensor_map(w, state.adam_energy.m);
    ckpt::write_tensor_map(w, state.adam_energy.v);
    w.str(state.rng.serialize());
    if (!w.out) throw IoError("checkpoint write failed: " + path);
}

// Element width (4 or 8) recorded in the checkpoint header.
inline int checkpoint_dtype(const std::string& path) {
    ckpt::Reader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, ckpt::kMagic, 8) != 0) throw IoError("not a checkpoint: " + path);
    const std::uint32_t version = r.u32();
    if (version != ckpt::kVersion)
        throw IoError("checkpoint version " + std::to_string(version) + " unsupported (want " +
                      std::to_string(ckpt::kVersion) + "): " + path);
    return r.u8();
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path) {
    ckpt::Reader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, ckpt::kMagic, 8) != 0) throw IoError("not a checkpoint: " + path);
    const std::uint32_t version = r.u32();
    if (version != ckpt::kVersion)
        throw IoError("checkpoint version " + std::to_string(version) + " unsupported (want " +
                      std::to_string(ckpt::kVersion) + "): " + path);
    const int dtype = r.u8();
    if (dtype != sizeof(T))
        throw IoError("checkpoint precision is " + std::to_string(dtype * 8) + "-bit, loader expects " +
                      std::to_string(sizeof(T) * 8) + "-bit: " + path);

    TrainState<T> state;
    const ArchDescriptor gen_arch = arch_from_string(r.str());
    const ArchDescriptor energy_arch = arch_from_string(r.str());
    const double sigma = r.f64();
    const double ref_std = r.f64();
    state.epoch = static_cast<std::int64_t>(r.u64());
    const auto gen_t = static_cast<std::int64_t>(r.u64());
    const auto energy_t = static_cast<std::int64_t>(r.u64());

    state.generator.arch = gen_arch;
    state.generator.graph = build_generator_graph(gen_arch);
    state.generator.residual_std = static_cast<T>(sigma);
    state.generator.params = ckpt::read_tensor_map<T>(r);
    state.energy.arch = energy_arch;
    state.energy.graph = build_energy_graph(energy_arch);
    state.energy.reference_std = static_cast<T>(ref_std);
    state.energy.params = ckpt::read_tensor_map<T>(r);
    state.adam_gen.t = gen_t;
    state.adam_gen.m = ckpt::read_tensor_map<T>(r);
    state.adam_gen.v = ckpt::read_tensor_map<T>(r);
    state.adam_energy.t = energy_t;
    state.adam_energy.m = ckpt::read_tensor_map<T>(r);
    state.adam_energy.v = ckpt::read_tensor_map<T>(r);
    state.rng.deserialize(r.str());

    // the stored tensors must match the graphs rebuilt from the descriptors
    for (const auto& name : state.generator.graph.param_names())
        if (!state.generator.params.count(name)) throw IoError("checkpoint missing generator param " + name);
    for (const auto& name : state.energy.graph.param_names())
        if (!state.energy.params.count(name)) throw IoError("checkpoint missing energy param " + name);
    return state;
}

}  // namespace coopgen
