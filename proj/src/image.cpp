#include "refdiff/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "refdiff/error.hpp"

namespace refdiff {

namespace {

void skip_ws_comments(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
            in.get();
        } else {
            return;
        }
    }
}

int read_pnm_int(std::istream& in) {
    skip_ws_comments(in);
    int v = -1;
    in >> v;
    return v;
}

}  // namespace

void write_ppm(const std::string& path, const ImageU8& img) {
    if (img.channels != 3) throw io_error("write_ppm expects 3 channels, got " + std::to_string(img.channels));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (!out) throw io_error("short write: " + path);
}

void write_pgm(const std::string& path, const ImageU8& img) {
    if (img.channels != 1) throw io_error("write_pgm expects 1 channel, got " + std::to_string(img.channels));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (!out) throw io_error("short write: " + path);
}

ImageU8 read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    std::string magic;
    in >> magic;
    int channels = 0;
    if (magic == "P6")
        channels = 3;
    else if (magic == "P5")
        channels = 1;
    else
        throw io_error("unsupported PNM magic '" + magic + "' in " + path);
    const int w = read_pnm_int(in);
    const int h = read_pnm_int(in);
    const int maxval = read_pnm_int(in);
    if (w <= 0 || h <= 0 || maxval != 255) throw io_error("bad PNM header in " + path);
    in.get();  // single whitespace after maxval
    ImageU8 img;
    img.width    = w;
    img.height   = h;
    img.channels = channels;
    img.pixels.resize(size_t(w) * h * channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (in.gcount() != std::streamsize(img.pixels.size())) throw io_error("truncated PNM payload in " + path);
    return img;
}

Tensor image_to_tensor(const ImageU8& img) {
    Tensor t(Shape{1, img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                t[t.offset4(0, c, y, x)] =
                    float(img.pixels[(size_t(y) * img.width + x) * img.channels + c]) / 255.0f;
    return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
    if (t.rank() != 4 || t.dim(0) != 1)
        throw dimension_error("tensor_to_image expects [1,c,h,w], got " + shape_str(t.shape));
    ImageU8 img;
    img.channels = t.dim(1);
    img.height   = t.dim(2);
    img.width    = t.dim(3);
    img.pixels.resize(size_t(img.width) * img.height * img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const float v = std::clamp(t[t.offset4(0, c, y, x)], 0.0f, 1.0f);
                img.pixels[(size_t(y) * img.width + x) * img.channels + c] =
                    uint8_t(std::lround(v * 255.0f));
            }
    return img;
}

ImageU8 resize_nearest(const ImageU8& img, int out_w, int out_h) {
    ImageU8 out;
    out.width    = out_w;
    out.height   = out_h;
    out.channels = img.channels;
    out.pixels.resize(size_t(out_w) * out_h * img.channels);
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(img.height - 1, int((int64_t(y) * img.height) / out_h));
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(img.width - 1, int((int64_t(x) * img.width) / out_w));
            for (int c = 0; c < img.channels; ++c)
                out.pixels[(size_t(y) * out_w + x) * img.channels + c] =
                    img.pixels[(size_t(sy) * img.width + sx) * img.channels + c];
        }
    }
    return out;
}

ImageU8 resize_bilinear(const ImageU8& img, int out_w, int out_h) {
    ImageU8 out;
    out.width    = out_w;
    out.height   = out_h;
    out.channels = img.channels;
    out.pixels.resize(size_t(out_w) * out_h * img.channels);
    const float sx = float(img.width) / float(out_w);
    const float sy = float(img.height) / float(out_h);
    for (int y = 0; y < out_h; ++y) {
        float fy  = (float(y) + 0.5f) * sy - 0.5f;
        fy        = std::clamp(fy, 0.0f, float(img.height - 1));
        const int y0 = int(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const float wy = fy - float(y0);
        for (int x = 0; x < out_w; ++x) {
            float fx  = (float(x) + 0.5f) * sx - 0.5f;
            fx        = std::clamp(fx, 0.0f, float(img.width - 1));
            const int x0 = int(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const float wx = fx - float(x0);
            for (int c = 0; c < img.channels; ++c) {
                auto at = [&](int yy, int xx) {
                    return float(img.pixels[(size_t(yy) * img.width + xx) * img.channels + c]);
                };
                const float v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                                wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
                out.pixels[(size_t(y) * out_w + x) * img.channels + c] = uint8_t(std::lround(v));
            }
        }
    }
    return out;
}

ImageU8 make_grid(const std::vector<ImageU8>& tiles, int columns, int gap) {
    if (tiles.empty()) throw validation_error("make_grid: no tiles");
    const int tw = tiles[0].width, th = tiles[0].height;
    const int cols = std::max(1, std::min(columns, int(tiles.size())));
    const int rows = int((tiles.size() + size_t(cols) - 1) / size_t(cols));
    ImageU8 grid;
    grid.channels = 3;
    grid.width    = cols * tw + (cols - 1) * gap;
    grid.height   = rows * th + (rows - 1) * gap;
    grid.pixels.assign(size_t(grid.width) * grid.height * 3, 30);
    for (size_t i = 0; i < tiles.size(); ++i) {
        const auto& t = tiles[i];
        if (t.width != tw || t.height != th || t.channels != 3)
            throw validation_error("make_grid: tiles must share 3-channel shape");
        const int oy = int(i) / cols * (th + gap);
        const int ox = int(i) % cols * (tw + gap);
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x)
                for (int c = 0; c < 3; ++c)
                    grid.pixels[(size_t(oy + y) * grid.width + (ox + x)) * 3 + c] =
                        t.pixels[(size_t(y) * tw + x) * 3 + c];
    }
    return grid;
}

}  // namespace refdiff
