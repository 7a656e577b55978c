#pragma once

// Little-endian primitives for the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "capt/errors.hpp"

namespace capt::binio {

inline void put_u32(std::ostream& os, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) {
        os.put(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

inline void put_u64(std::ostream& os, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i) {
        os.put(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_str(std::ostream& os, const std::string& s)
{
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
    Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

    std::uint64_t u64()
    {
        unsigned char b[8];
        read(b, 8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) {
            v = (v << 8) | b[i];
        }
        return v;
    }
    std::uint32_t u32()
    {
        unsigned char b[4];
        read(b, 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t max_len = 1 << 16)
    {
        const std::uint32_t n = u32();
        if (n > max_len) {
            corrupt("string length " + std::to_string(n));
        }
        std::string s(n, '\0');
        read(reinterpret_cast<unsigned char*>(s.data()), n);
        return s;
    }
    void bytes(unsigned char* out, std::size_t n) { read(out, n); }
    [[noreturn]] void corrupt(const std::string& why) const
    {
        throw ConfigError(what_ + ": corrupt or truncated file (" + why + ")");
    }
    bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

private:
    void read(unsigned char* out, std::size_t n)
    {
        is_.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            corrupt("unexpected end of data");
        }
    }
    std::istream& is_;
    std::string what_;
};

// Writes through `writer` into a temporary sibling, then renames over `path`.
template <class Fn>
void write_atomically(const std::filesystem::path& path, Fn&& writer);

} // namespace capt::binio

#include <fstream>

template <class Fn>
void capt::binio::write_atomically(const std::filesystem::path& path, Fn&& writer)
{
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw ConfigError("cannot open " + tmp.string() + " for writing");
        }
        writer(os);
        os.flush();
        if (!os) {
            throw ConfigError("write failed for " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}
