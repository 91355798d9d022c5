#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvga/tensor.hpp"

namespace uvga::img {

/// 8-bit image, row-major, interleaved channels (1 = gray, 3 = RGB).
struct ImageU8 {
    int width = 0, height = 0, channels = 0;
    std::vector<unsigned char> data;

    std::size_t stride() const { return static_cast<std::size_t>(width) * channels; }
};

/// Quantize a [C,H,W] float frame in [0,1] to 8 bits (round half up).
template <class T>
ImageU8 from_frame(const Tensor<T>& frame, int channels) {
    if (frame.rank() != 3 || frame.dim(0) < channels)
        throw std::invalid_argument("from_frame: expected [C,H,W] with C >= channels");
    ImageU8 out;
    out.height = frame.dim(1);
    out.width = frame.dim(2);
    out.channels = channels;
    out.data.resize(static_cast<std::size_t>(out.width) * out.height * channels);
    const std::int64_t plane = static_cast<std::int64_t>(out.height) * out.width;
    for (std::int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < channels; ++c) {
            double v = static_cast<double>(frame[c * plane + p]);
            v = std::min(1.0, std::max(0.0, v));
            out.data[static_cast<std::size_t>(p) * channels + c] =
                static_cast<unsigned char>(std::lround(v * 255.0));
        }
    return out;
}

template <class T>
Tensor<T> to_frame(const ImageU8& im) {
    Tensor<T> out({im.channels, im.height, im.width});
    const std::int64_t plane = static_cast<std::int64_t>(im.height) * im.width;
    for (std::int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < im.channels; ++c)
            out[c * plane + p] = static_cast<T>(im.data[static_cast<std::size_t>(p) * im.channels + c] / 255.0);
    return out;
}

// ---------------------------------------------------------------------------
// Minimal PNG codec (8-bit gray / RGB, non-interlaced). Writing always uses
// filter 0 scanlines; reading handles filters 0-4.
// ---------------------------------------------------------------------------

namespace detail {
inline void be32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

inline std::uint32_t rd32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void chunk(std::vector<unsigned char>& out, const char type[4], const std::vector<unsigned char>& payload) {
    be32(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    be32(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}
}  // namespace detail

inline std::vector<unsigned char> encode_png(const ImageU8& im) {
    if (im.channels != 1 && im.channels != 3) throw std::invalid_argument("png: 1 or 3 channels only");
    if (im.data.size() != im.stride() * im.height) throw std::invalid_argument("png: bad buffer size");
    // raw scanlines, filter byte 0
    std::vector<unsigned char> raw;
    raw.reserve((im.stride() + 1) * im.height);
    for (int y = 0; y < im.height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), im.data.begin() + static_cast<std::ptrdiff_t>(y * im.stride()),
                   im.data.begin() + static_cast<std::ptrdiff_t>((y + 1) * im.stride()));
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> z(zlen);
    if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png: deflate failed");
    z.resize(zlen);

    std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<unsigned char> ihdr;
    detail::be32(ihdr, static_cast<std::uint32_t>(im.width));
    detail::be32(ihdr, static_cast<std::uint32_t>(im.height));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(im.channels == 1 ? 0 : 2);            // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::chunk(out, "IHDR", ihdr);
    detail::chunk(out, "IDAT", z);
    detail::chunk(out, "IEND", {});
    return out;
}

inline ImageU8 decode_png(const std::vector<unsigned char>& bytes) {
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0) throw std::runtime_error("png: bad signature");
    ImageU8 im;
    std::vector<unsigned char> idat;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = detail::rd32(bytes.data() + pos);
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const unsigned char* payload = bytes.data() + pos + 8;
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("png: truncated chunk");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            im.width = static_cast<int>(detail::rd32(payload));
            im.height = static_cast<int>(detail::rd32(payload + 4));
            const int depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8 || (color != 0 && color != 2) || interlace != 0)
                throw std::runtime_error("png: unsupported format (8-bit gray/rgb only)");
            im.channels = color == 0 ? 1 : 3;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (im.width <= 0 || im.height <= 0) throw std::runtime_error("png: missing IHDR");
    const std::size_t stride = im.stride();
    std::vector<unsigned char> raw((stride + 1) * im.height);
    uLongf rawlen = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &rawlen, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        rawlen != raw.size())
        throw std::runtime_error("png: inflate failed");

    im.data.assign(stride * im.height, 0);
    const int bpp = im.channels;
    for (int y = 0; y < im.height; ++y) {
        const unsigned char filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
        const unsigned char* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
        unsigned char* dst = im.data.data() + static_cast<std::size_t>(y) * stride;
        const unsigned char* up = y > 0 ? im.data.data() + static_cast<std::size_t>(y - 1) * stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw std::runtime_error("png: bad filter type");
            }
            dst[x] = static_cast<unsigned char>(v & 0xff);
        }
    }
    return im;
}

inline void write_png(const ImageU8& im, const std::string& path) {
    const auto bytes = encode_png(im);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("png: cannot open for write: " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("png: write failed: " + path);
}

inline ImageU8 read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("png: cannot open for read: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

}  // namespace uvga::img
