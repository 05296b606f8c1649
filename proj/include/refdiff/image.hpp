#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refdiff/tensor.hpp"

namespace refdiff {

// Interleaved 8-bit raster, row-major, origin top-left.
struct ImageU8 {
    int width    = 0;
    int height   = 0;
    int channels = 0;  // 3 (PPM) or 1 (PGM)
    std::vector<uint8_t> pixels;

    uint8_t at(int y, int x, int c = 0) const {
        return pixels[(size_t(y) * width + x) * channels + c];
    }
    void set(int y, int x, int c, uint8_t v) { pixels[(size_t(y) * width + x) * channels + c] = v; }

    static ImageU8 filled(int w, int h, int ch, uint8_t v) {
        ImageU8 img;
        img.width    = w;
        img.height   = h;
        img.channels = ch;
        img.pixels.assign(size_t(w) * h * ch, v);
        return img;
    }
};

void write_ppm(const std::string& path, const ImageU8& img);  // P6, maxval 255
void write_pgm(const std::string& path, const ImageU8& img);  // P5, maxval 255
ImageU8 read_pnm(const std::string& path);                    // P5 or P6

// [0,255] bytes <-> [0,1] float tensor [1,c,h,w]
Tensor image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const Tensor& t);

ImageU8 resize_nearest(const ImageU8& img, int out_w, int out_h);
ImageU8 resize_bilinear(const ImageU8& img, int out_w, int out_h);
ImageU8 make_grid(const std::vector<ImageU8>& tiles, int columns, int gap = 2);

}  // namespace refdiff
