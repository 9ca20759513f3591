#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tfd {

// Planar float image in [0,1]; 1 or 3 channels. Plane c is h*w row-major.
struct ImagePlane {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> v;

    ImagePlane() = default;
    ImagePlane(int w, int h, int c, float fill = 0.0f)
        : width(w), height(h), channels(c), v(size_t(w) * size_t(h) * size_t(c), fill) {}

    float at(int c, int y, int x) const {
        return v[(size_t(c) * size_t(height) + size_t(y)) * size_t(width) + size_t(x)];
    }
    float& at(int c, int y, int x) {
        return v[(size_t(c) * size_t(height) + size_t(y)) * size_t(width) + size_t(x)];
    }
    size_t pixel_count() const { return size_t(width) * size_t(height); }
};

// Axis-aligned box, pixel coordinates, (x, y) top-left.
struct BoxXYWH {
    double x = 0, y = 0, w = 0, h = 0;
    double x2() const { return x + w; }
    double y2() const { return y + h; }
    double area() const { return w * h; }
};

// 8-bit image container used at the file boundary.
struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 0; // 1 or 3
    std::vector<uint8_t> pix; // interleaved row-major

    uint8_t at(int y, int x, int c = 0) const {
        return pix[(size_t(y) * size_t(width) + size_t(x)) * size_t(channels) + size_t(c)];
    }
};

ImagePlane to_float(const Image8& img);
// round(255*x) half away from zero, clamped.
Image8 to_8bit(const ImagePlane& img);

// PGM (P5) / PPM (P6), maxval 255.
Image8 load_pnm(const std::string& path);
void save_pnm(const Image8& img, const std::string& path);

// PNG: 8-bit gray/gray-alpha/RGB/RGBA/palette, non-interlaced; alpha dropped
// on load. Writes color type 0 or 2.
Image8 load_png(const std::string& path);
void save_png(const Image8& img, const std::string& path);
std::vector<uint8_t> encode_png(const Image8& img);
Image8 decode_png(const std::vector<uint8_t>& bytes);

// Dispatch on extension (.png/.ppm/.pgm/.pnm).
Image8 load_image(const std::string& path);

ImagePlane resize_bilinear(const ImagePlane& img, int new_w, int new_h);

// 2-pixel-wide rectangle outline; value per channel.
void draw_box(Image8& img, double x1, double y1, double x2, double y2,
              const std::vector<uint8_t>& color);

} // namespace tfd
