#include <cstdint>
#include <cstring>
#include <vector>

#include "evresid/binio.hpp"
#include "evresid/flowio.hpp"

// Dependency-free PNG emitter: 16-bit grayscale, zlib stream made of
// stored (uncompressed) deflate blocks. IWE images are small; size is not
// a concern here.

namespace evresid {

namespace {

uint32_t crc32(const uint8_t* data, size_t n, uint32_t crc = 0xffffffffu) {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc;
}

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& body) {
    put_u32_be(out, uint32_t(body.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    const uint32_t crc = crc32(out.data() + start, out.size() - start) ^ 0xffffffffu;
    put_u32_be(out, crc);
}

std::vector<uint8_t> zlib_stored(const std::vector<uint8_t>& raw) {
    std::vector<uint8_t> z;
    z.push_back(0x78); // deflate, 32k window
    z.push_back(0x01);
    size_t pos = 0;
    do {
        const size_t chunk = std::min<size_t>(raw.size() - pos, 65535);
        const bool final = (pos + chunk == raw.size());
        z.push_back(final ? 1 : 0);
        z.push_back(uint8_t(chunk & 0xff));
        z.push_back(uint8_t(chunk >> 8));
        z.push_back(uint8_t(~chunk & 0xff));
        z.push_back(uint8_t((~chunk >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + chunk);
        pos += chunk;
    } while (pos < raw.size());
    // adler32
    uint32_t a = 1, b = 0;
    for (uint8_t byte : raw) {
        a = (a + byte) % 65521;
        b = (b + a) % 65521;
    }
    put_u32_be(z, (b << 16) | a);
    return z;
}

} // namespace

void save_png16(const Tensor& image, const std::string& path) {
    if (image.shape().rank() != 2) throw IoError("save_png16: image must be rank 2");
    const int64_t H = image.shape()[0], W = image.shape()[1];
    double maxv = 0.0;
    for (int64_t i = 0; i < image.numel(); ++i) maxv = std::max(maxv, image[i]);
    const double scl = maxv > 0 ? 65535.0 / maxv : 0.0;

    std::vector<uint8_t> raw;
    raw.reserve(size_t(H) * (size_t(W) * 2 + 1));
    for (int64_t y = 0; y < H; ++y) {
        raw.push_back(0); // filter: none
        for (int64_t x = 0; x < W; ++x) {
            double v = image[y * W + x] * scl;
            v = std::min(std::max(v, 0.0), 65535.0);
            const uint16_t q = uint16_t(v + 0.5);
            raw.push_back(uint8_t(q >> 8));
            raw.push_back(uint8_t(q & 0xff));
        }
    }

    std::vector<uint8_t> png = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    put_u32_be(ihdr, uint32_t(W));
    put_u32_be(ihdr, uint32_t(H));
    ihdr.push_back(16); // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(png, "IHDR", ihdr);
    put_chunk(png, "IDAT", zlib_stored(raw));
    put_chunk(png, "IEND", {});

    BinWriter w(path);
    w.bytes(png.data(), png.size());
    w.close();
}

} // namespace evresid
