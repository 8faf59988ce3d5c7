#pragma once

// Binary training-state container: magic "EHRCKPT1", u32 version, the
// length-prefixed canonical config text (the configuration fingerprint), the
// named parameter tensors, the optimizer state in the same tensor encoding
// (moments plus step/epoch counters), and finally the RNG state. All
// little-endian; f64 payloads make save/load bitwise.

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ehrseq/adam.hpp"
#include "ehrseq/binio.hpp"
#include "ehrseq/rng.hpp"
#include "ehrseq/tensor.hpp"

namespace ehrseq {

inline constexpr std::array<char, 8> kCheckpointMagic{'E', 'H', 'R', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::vector<std::pair<std::string, Tensor>> opt_state;
    std::vector<std::uint8_t> rng_state;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail {

inline void write_named_tensors(std::ostream& os,
                                const std::vector<std::pair<std::string, Tensor>>& tensors) {
    binio::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        binio::write_string(os, name);
        binio::write_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) binio::write_u64(os, e);
        for (double v : t.data()) binio::write_f64(os, v);
    }
}

inline std::vector<std::pair<std::string, Tensor>> read_named_tensors(std::istream& is,
                                                                      const char* what) {
    const std::uint32_t count = binio::read_u32(is, what);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = binio::read_string(is, what);
        const std::uint32_t rank = binio::read_u32(is, what);
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (auto& e : shape) {
            e = static_cast<std::size_t>(binio::read_u64(is, what));
            numel *= e;
        }
        std::vector<double> data(numel);
        for (auto& v : data) v = binio::read_f64(is, what);
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    binio::write_u32(out, ckpt.version);
    binio::write_string(out, ckpt.config_text);
    detail::write_named_tensors(out, ckpt.tensors);
    detail::write_named_tensors(out, ckpt.opt_state);
    binio::write_bytes(out, ckpt.rng_state);
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kCheckpointMagic)
        throw std::runtime_error("'" + path + "' is not a checkpoint (bad magic)");
    Checkpoint ckpt;
    ckpt.version = binio::read_u32(in, "version");
    if (ckpt.version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " +
                                 std::to_string(ckpt.version));
    ckpt.config_text = binio::read_string(in, "config");
    ckpt.tensors = detail::read_named_tensors(in, "parameters");
    ckpt.opt_state = detail::read_named_tensors(in, "optimizer state");
    ckpt.rng_state = binio::read_bytes(in, "rng state");
    return ckpt;
}

/// Snapshot of live training state.
inline Checkpoint make_checkpoint(const std::string& config_text, const ParameterStore& params,
                                  const AdamState& adam, std::size_t epoch, const Rng& rng) {
    Checkpoint ckpt;
    ckpt.config_text = config_text;
    for (const auto& [name, t] : params.items())
        ckpt.tensors.emplace_back(name, Tensor(t.shape(), t.data()));
    for (std::size_t p = 0; p < params.count(); ++p) {
        const auto& name = params.items()[p].first;
        const auto& shape = params.items()[p].second.shape();
        if (p < adam.m.size()) {
            ckpt.opt_state.emplace_back(name + ".m", Tensor(shape, adam.m[p]));
            ckpt.opt_state.emplace_back(name + ".v", Tensor(shape, adam.v[p]));
        }
    }
    ckpt.opt_state.emplace_back("opt.step",
                                Tensor::scalar(static_cast<double>(adam.step)));
    ckpt.opt_state.emplace_back("opt.epoch", Tensor::scalar(static_cast<double>(epoch)));
    ckpt.rng_state = rng.serialize();
    return ckpt;
}

/// Restores a snapshot into live objects; returns the stored epoch.
inline std::size_t restore_checkpoint(const Checkpoint& ckpt, ParameterStore& params,
                                      AdamState& adam, Rng& rng) {
    if (ckpt.tensors.size() != params.count())
        throw std::runtime_error("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                                 " tensors but the model has " + std::to_string(params.count()));
    adam.reset(params);
    for (std::size_t p = 0; p < params.count(); ++p) {
        auto& [name, t] = params.items()[p];
        const auto& [saved_name, saved] = ckpt.tensors[p];
        if (saved_name != name)
            throw std::runtime_error("checkpoint tensor '" + saved_name +
                                     "' does not match model parameter '" + name + "'");
        if (saved.shape() != t.shape())
            throw std::runtime_error("checkpoint tensor '" + name + "' has mismatched shape");
        t.data() = saved.data();
    }
    std::size_t epoch = 0;
    for (const auto& [name, t] : ckpt.opt_state) {
        if (name == "opt.step") {
            adam.step = static_cast<std::uint64_t>(t.value());
            continue;
        }
        if (name == "opt.epoch") {
            epoch = static_cast<std::size_t>(t.value());
            continue;
        }
        if (name.size() < 2 ||
            (name.substr(name.size() - 2) != ".m" && name.substr(name.size() - 2) != ".v"))
            throw std::runtime_error("unrecognized optimizer-state entry '" + name + "'");
        const bool is_m = name.substr(name.size() - 2) == ".m";
        const std::string base = name.substr(0, name.size() - 2);
        bool found = false;
        for (std::size_t p = 0; p < params.count(); ++p) {
            if (params.items()[p].first != base) continue;
            (is_m ? adam.m[p] : adam.v[p]) = t.data();
            found = true;
            break;
        }
        if (!found)
            throw std::runtime_error("optimizer-state entry '" + name +
                                     "' has no matching parameter");
    }
    if (!ckpt.rng_state.empty() && !rng.deserialize(ckpt.rng_state))
        throw std::runtime_error("checkpoint carries an invalid rng state");
    return epoch;
}

}  // namespace ehrseq
