#include "sdseg/io_util.hpp"

#include <array>
#include <sstream>

namespace sdseg {

std::uint64_t file_checksum(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open file for checksum: " + path);
    std::array<char, 1 << 16> buf;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    while (is) {
        is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h = fnv1a64(buf.data(), static_cast<std::size_t>(is.gcount()), h);
    }
    return h;
}

std::string checksum_hex(std::uint64_t h) {
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) s[i] = "0123456789abcdef"[(h >> (4 * (15 - i))) & 0xf];
    return s;
}

}  // namespace sdseg
