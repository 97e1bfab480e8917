#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pgssl/tensor.hpp"

namespace pgssl {

// Checkpoint container: magic "PGSSL1", u32 format version, u32 tensor
// count, then per tensor (sorted by name): u16 name length, UTF-8 name,
// u8 rank, u32 dims, little-endian f32 payload. Sorting makes the byte
// stream a pure function of the tensor contents.
namespace ckpt {

constexpr char kMagic[6] = {'P', 'G', 'S', 'S', 'L', '1'};
constexpr std::uint32_t kVersion = 1;

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    os.write(b, 2);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}
inline void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

struct Reader {
    std::ifstream in;
    std::size_t offset = 0;
    std::string path;

    void read(char* dst, std::size_t n, const char* what) {
        in.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw IoError("checkpoint '" + path + "': truncated while reading " + what +
                          " at byte offset " + std::to_string(offset));
        offset += n;
    }
    std::uint16_t u16(const char* what) {
        unsigned char b[2];
        read(reinterpret_cast<char*>(b), 2, what);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        read(reinterpret_cast<char*>(b), 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    float f32(const char* what) {
        const std::uint32_t v = u32(what);
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
};

}  // namespace detail

inline void save(const std::string& path, std::vector<std::pair<std::string, TensorF>> tensors) {
    std::sort(tensors.begin(), tensors.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 6);
    detail::put_u32(os, kVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw IoError("checkpoint: tensor name too long: " + name);
        detail::put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        if (t.rank() > 0xff) throw IoError("checkpoint: rank too large for tensor " + name);
        const char rank = static_cast<char>(t.rank());
        os.write(&rank, 1);
        for (std::size_t d = 0; d < t.rank(); ++d)
            detail::put_u32(os, static_cast<std::uint32_t>(t.dim(d)));
        for (float v : t.values()) detail::put_f32(os, v);
    }
    if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

inline std::vector<std::pair<std::string, TensorF>> load(const std::string& path) {
    detail::Reader r;
    r.path = path;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw IoError("checkpoint: cannot open '" + path + "'");
    char magic[6];
    r.read(magic, 6, "magic");
    if (std::memcmp(magic, kMagic, 6) != 0)
        throw IoError("checkpoint '" + path + "': bad magic at byte offset 0");
    const std::uint32_t version = r.u32("version");
    if (version != kVersion)
        throw IoError("checkpoint '" + path + "': unsupported format version " +
                      std::to_string(version));
    const std::uint32_t count = r.u32("tensor count");
    std::vector<std::pair<std::string, TensorF>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        std::string name(name_len, '\0');
        r.read(name.data(), name_len, "name");
        char rank_c;
        r.read(&rank_c, 1, "rank");
        const std::size_t rank = static_cast<unsigned char>(rank_c);
        Shape shape(rank);
        for (std::size_t d = 0; d < rank; ++d) shape[d] = r.u32("dimension");
        std::vector<float> data(numel(shape));
        for (float& v : data) v = r.f32("payload");
        out.emplace_back(std::move(name), TensorF(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace ckpt
}  // namespace pgssl
