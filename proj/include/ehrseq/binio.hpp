#pragma once

// Little-endian binary stream helpers shared by the file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; add byte swapping for this platform");

namespace ehrseq::binio {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const char* what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error(std::string("unexpected end of file reading ") + what);
    return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_raw(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_raw(os, v); }
inline void write_f64(std::ostream& os, double v) { write_raw(os, v); }
inline void write_f32(std::ostream& os, float v) { write_raw(os, v); }

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    return read_raw<std::uint32_t>(is, what);
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
    return read_raw<std::uint64_t>(is, what);
}
inline double read_f64(std::istream& is, const char* what) { return read_raw<double>(is, what); }
inline float read_f32(std::istream& is, const char* what) { return read_raw<float>(is, what); }

inline void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
    const std::uint64_t len = read_u64(is, what);
    std::string s(len, '\0');
    is.read(s.data(), static_cast<std::streamsize>(len));
    if (!is) throw std::runtime_error(std::string("unexpected end of file reading ") + what);
    return s;
}

inline void write_bytes(std::ostream& os, const std::vector<std::uint8_t>& bytes) {
    write_u64(os, bytes.size());
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_bytes(std::istream& is, const char* what) {
    const std::uint64_t len = read_u64(is, what);
    std::vector<std::uint8_t> bytes(len);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(len));
    if (!is) throw std::runtime_error(std::string("unexpected end of file reading ") + what);
    return bytes;
}

/// FNV-1a over an arbitrary byte span; used for content fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ULL) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace ehrseq::binio
