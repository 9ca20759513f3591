#include "tfd/image.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <zlib.h>

namespace tfd {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw std::runtime_error(path + ": " + what);
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    in.seekg(0, std::ios::end);
    std::vector<uint8_t> buf(size_t(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!in) fail(path, "short read");
    return buf;
}

void write_file(const std::string& path, const uint8_t* data, size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(path, "cannot open for write");
    out.write(reinterpret_cast<const char*>(data), std::streamsize(n));
    if (!out) fail(path, "short write");
}

// Skips whitespace and '#' comments between PNM header tokens.
int pnm_token(std::istream& in, const std::string& path) {
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
        } else if (!std::isspace(c)) {
            break;
        }
    }
    if (c == EOF) fail(path, "truncated header");
    int value = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) fail(path, "malformed header token");
    return value;
}

uint32_t be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

std::vector<uint8_t> zlib_inflate(const uint8_t* data, size_t n, size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf out_len = uLongf(expected);
    int rc = uncompress(out.data(), &out_len, data, uLong(n));
    if (rc != Z_OK || out_len != expected)
        throw std::runtime_error("zlib inflate failed (rc=" + std::to_string(rc) + ")");
    return out;
}

std::vector<uint8_t> zlib_deflate(const uint8_t* data, size_t n) {
    uLongf cap = compressBound(uLong(n));
    std::vector<uint8_t> out(cap);
    int rc = compress2(out.data(), &cap, data, uLong(n), Z_DEFAULT_COMPRESSION);
    if (rc != Z_OK) throw std::runtime_error("zlib deflate failed (rc=" + std::to_string(rc) + ")");
    out.resize(cap);
    return out;
}

constexpr uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

} // namespace

ImagePlane to_float(const Image8& img) {
    ImagePlane out(img.width, img.height, img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, y, x) = float(img.at(y, x, c)) / 255.0f;
    return out;
}

Image8 to_8bit(const ImagePlane& img) {
    Image8 out;
    out.width = img.width;
    out.height = img.height;
    out.channels = img.channels;
    out.pix.resize(size_t(img.width) * size_t(img.height) * size_t(img.channels));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                float s = std::round(img.at(c, y, x) * 255.0f);
                s = std::clamp(s, 0.0f, 255.0f);
                out.pix[(size_t(y) * size_t(img.width) + size_t(x)) * size_t(img.channels) + size_t(c)] =
                    uint8_t(s);
            }
    return out;
}

Image8 load_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    char magic[2];
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
        fail(path, "not a P5/P6 file");
    Image8 img;
    img.channels = (magic[1] == '6') ? 3 : 1;
    img.width = pnm_token(in, path);
    img.height = pnm_token(in, path);
    int maxval = pnm_token(in, path);
    if (maxval != 255) fail(path, "unsupported maxval " + std::to_string(maxval));
    if (img.width <= 0 || img.height <= 0) fail(path, "bad dimensions");
    img.pix.resize(size_t(img.width) * size_t(img.height) * size_t(img.channels));
    in.read(reinterpret_cast<char*>(img.pix.data()), std::streamsize(img.pix.size()));
    if (!in) fail(path, "truncated pixel data");
    return img;
}

void save_pnm(const Image8& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3)
        fail(path, "PNM supports 1 or 3 channels, got " + std::to_string(img.channels));
    std::ostringstream head;
    head << (img.channels == 3 ? "P6" : "P5") << "\n"
         << img.width << " " << img.height << "\n255\n";
    std::string h = head.str();
    std::vector<uint8_t> buf(h.begin(), h.end());
    buf.insert(buf.end(), img.pix.begin(), img.pix.end());
    write_file(path, buf.data(), buf.size());
}

Image8 decode_png(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
        throw std::runtime_error("not a PNG stream");

    size_t pos = 8;
    uint32_t width = 0, height = 0;
    int bit_depth = 0, color_type = -1;
    std::vector<uint8_t> idat;
    std::vector<std::array<uint8_t, 3>> palette;
    bool saw_iend = false;

    while (pos + 8 <= bytes.size()) {
        uint32_t len = be32(&bytes[pos]);
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("PNG chunk overruns stream");
        const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
        const uint8_t* data = &bytes[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error("bad IHDR length");
            width = be32(data);
            height = be32(data + 4);
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw std::runtime_error("interlaced PNG unsupported");
            if (bit_depth != 8) throw std::runtime_error("only 8-bit PNG supported");
        } else if (std::memcmp(type, "PLTE", 4) == 0) {
            if (len % 3 != 0) throw std::runtime_error("bad PLTE length");
            for (uint32_t i = 0; i < len; i += 3)
                palette.push_back({data[i], data[i + 1], data[i + 2]});
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
            break;
        }
        pos += 12 + len;
    }
    if (!saw_iend) throw std::runtime_error("PNG missing IEND");
    if (width == 0 || height == 0) throw std::runtime_error("PNG missing IHDR");

    int src_ch;
    switch (color_type) {
        case 0: src_ch = 1; break; // gray
        case 2: src_ch = 3; break; // rgb
        case 3: src_ch = 1; break; // palette index
        case 4: src_ch = 2; break; // gray+alpha
        case 6: src_ch = 4; break; // rgba
        default: throw std::runtime_error("unsupported PNG color type " + std::to_string(color_type));
    }
    if (color_type == 3 && palette.empty()) throw std::runtime_error("palette PNG missing PLTE");

    size_t stride = size_t(width) * size_t(src_ch);
    std::vector<uint8_t> raw = zlib_inflate(idat.data(), idat.size(), (stride + 1) * height);

    // Undo per-scanline filters in place into `flat`.
    std::vector<uint8_t> flat(stride * height);
    int bpp = src_ch;
    for (uint32_t y = 0; y < height; ++y) {
        uint8_t filter = raw[(stride + 1) * y];
        const uint8_t* src = &raw[(stride + 1) * y + 1];
        uint8_t* dst = &flat[stride * y];
        const uint8_t* up = y > 0 ? &flat[stride * (y - 1)] : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= size_t(bpp) ? dst[i - bpp] : 0;
            int b = up ? up[i] : 0;
            int c = (up && i >= size_t(bpp)) ? up[i - bpp] : 0;
            int x = src[i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default: throw std::runtime_error("bad PNG filter " + std::to_string(filter));
            }
            dst[i] = uint8_t(x);
        }
    }

    Image8 img;
    img.width = int(width);
    img.height = int(height);
    img.channels = (color_type == 0 || color_type == 4) ? 1 : 3;
    img.pix.resize(size_t(width) * size_t(height) * size_t(img.channels));
    for (uint32_t y = 0; y < height; ++y)
        for (uint32_t x = 0; x < width; ++x) {
            const uint8_t* s = &flat[stride * y + size_t(x) * size_t(src_ch)];
            uint8_t* d = &img.pix[(size_t(y) * width + x) * size_t(img.channels)];
            switch (color_type) {
                case 0: case 4: d[0] = s[0]; break;
                case 2: case 6: d[0] = s[0]; d[1] = s[1]; d[2] = s[2]; break;
                case 3: {
                    if (s[0] >= palette.size()) throw std::runtime_error("palette index out of range");
                    const auto& p = palette[s[0]];
                    d[0] = p[0]; d[1] = p[1]; d[2] = p[2];
                    break;
                }
            }
        }
    return img;
}

std::vector<uint8_t> encode_png(const Image8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::runtime_error("PNG encoder supports 1 or 3 channels");
    size_t stride = size_t(img.width) * size_t(img.channels);
    std::vector<uint8_t> raw((stride + 1) * size_t(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw[(stride + 1) * size_t(y)] = 0; // filter: none
        std::memcpy(&raw[(stride + 1) * size_t(y) + 1], &img.pix[stride * size_t(y)], stride);
    }
    std::vector<uint8_t> compressed = zlib_deflate(raw.data(), raw.size());

    std::vector<uint8_t> out(kPngSig, kPngSig + 8);
    auto chunk = [&out](const char* type, const std::vector<uint8_t>& body) {
        put_be32(out, uint32_t(body.size()));
        size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), body.begin(), body.end());
        uint32_t crc = uint32_t(crc32(0, &out[start], uInt(out.size() - start)));
        put_be32(out, crc);
    };

    std::vector<uint8_t> ihdr;
    put_be32(ihdr, uint32_t(img.width));
    put_be32(ihdr, uint32_t(img.height));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(img.channels == 3 ? 2 : 0);
    ihdr.push_back(0); // compression
    ihdr.push_back(0); // filter
    ihdr.push_back(0); // interlace
    chunk("IHDR", ihdr);
    chunk("IDAT", compressed);
    chunk("IEND", {});
    return out;
}

Image8 load_png(const std::string& path) {
    try {
        return decode_png(read_file(path));
    } catch (const std::exception& e) {
        fail(path, e.what());
    }
}

void save_png(const Image8& img, const std::string& path) {
    std::vector<uint8_t> bytes = encode_png(img);
    write_file(path, bytes.data(), bytes.size());
}

Image8 load_image(const std::string& path) {
    auto dot = path.find_last_of('.');
    std::string ext = dot == std::string::npos ? "" : path.substr(dot);
    for (auto& ch : ext) ch = char(std::tolower(ch));
    if (ext == ".png") return load_png(path);
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return load_pnm(path);
    fail(path, "unsupported image extension '" + ext + "'");
}

ImagePlane resize_bilinear(const ImagePlane& img, int new_w, int new_h) {
    if (new_w <= 0 || new_h <= 0)
        throw std::invalid_argument("resize_bilinear: target dimensions must be positive");
    ImagePlane out(new_w, new_h, img.channels);
    double sx = double(img.width) / new_w;
    double sy = double(img.height) / new_h;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < new_h; ++y) {
            double fy = (y + 0.5) * sy - 0.5;
            int y0 = int(std::floor(fy));
            double wy = fy - y0;
            int y0c = std::clamp(y0, 0, img.height - 1);
            int y1c = std::clamp(y0 + 1, 0, img.height - 1);
            for (int x = 0; x < new_w; ++x) {
                double fx = (x + 0.5) * sx - 0.5;
                int x0 = int(std::floor(fx));
                double wx = fx - x0;
                int x0c = std::clamp(x0, 0, img.width - 1);
                int x1c = std::clamp(x0 + 1, 0, img.width - 1);
                double top = img.at(c, y0c, x0c) * (1 - wx) + img.at(c, y0c, x1c) * wx;
                double bot = img.at(c, y1c, x0c) * (1 - wx) + img.at(c, y1c, x1c) * wx;
                out.at(c, y, x) = float(top * (1 - wy) + bot * wy);
            }
        }
    return out;
}

void draw_box(Image8& img, double x1, double y1, double x2, double y2,
              const std::vector<uint8_t>& color) {
    auto plot = [&](int y, int x) {
        if (y < 0 || y >= img.height || x < 0 || x >= img.width) return;
        for (int c = 0; c < img.channels; ++c)
            img.pix[(size_t(y) * size_t(img.width) + size_t(x)) * size_t(img.channels) + size_t(c)] =
                color[size_t(c) % color.size()];
    };
    int ix1 = int(std::lround(x1)), iy1 = int(std::lround(y1));
    int ix2 = int(std::lround(x2)), iy2 = int(std::lround(y2));
    for (int t = 0; t < 2; ++t) {
        for (int x = ix1; x <= ix2; ++x) {
            plot(iy1 + t, x);
            plot(iy2 - t, x);
        }
        for (int y = iy1; y <= iy2; ++y) {
            plot(y, ix1 + t);
            plot(y, ix2 - t);
        }
    }
}

} // namespace tfd
