#pragma once

// Binary matrix container for externally produced note/discharge embeddings:
// magic "EHREMB1\0", u32 row count, u32 dim, then row-major 32-bit floats,
// all little-endian.

#include <array>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ehrseq/binio.hpp"

namespace ehrseq {

inline constexpr std::array<char, 8> kEmbeddingMagic{'E', 'H', 'R', 'E', 'M', 'B', '1', '\0'};

inline void write_embedding_matrix(const std::string& path,
                                   const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(kEmbeddingMagic.data(), kEmbeddingMagic.size());
    const std::size_t dim = rows.empty() ? 0 : rows.front().size();
    binio::write_u32(out, static_cast<std::uint32_t>(rows.size()));
    binio::write_u32(out, static_cast<std::uint32_t>(dim));
    for (const auto& row : rows) {
        if (row.size() != dim)
            throw std::invalid_argument("embedding rows must share one dimension");
        for (double v : row) binio::write_f32(out, static_cast<float>(v));
    }
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::vector<std::vector<double>> read_embedding_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open embedding file '" + path + "'");
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kEmbeddingMagic)
        throw std::runtime_error("'" + path + "' is not an embedding matrix file (bad magic)");
    const std::uint32_t n_rows = binio::read_u32(in, "row count");
    const std::uint32_t dim = binio::read_u32(in, "dimension");
    std::vector<std::vector<double>> rows(n_rows, std::vector<double>(dim));
    for (auto& row : rows)
        for (auto& v : row) v = static_cast<double>(binio::read_f32(in, "embedding value"));
    return rows;
}

}  // namespace ehrseq
