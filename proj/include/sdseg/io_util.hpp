#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sdseg/errors.hpp"

namespace sdseg {

// Little-endian binary IO helpers shared by the dataset and checkpoint files.

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
    unsigned char buf[sizeof(T)];
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
    write_bytes(os, buf, sizeof(T));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw FormatError(std::string("truncated file while reading ") + what);
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    unsigned char buf[sizeof(T)];
    read_bytes(is, buf, sizeof(T), what);
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    T v;
    std::memcpy(&v, &bits, sizeof(T));
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is, const char* what) {
    const auto n = read_le<std::uint16_t>(is, what);
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n, what);
    return s;
}

/// FNV-1a 64-bit digest of a byte range / file; used for artifact checksums
/// in run manifests and sweep resume bookkeeping.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t file_checksum(const std::string& path);
std::string checksum_hex(std::uint64_t h);

}  // namespace sdseg
