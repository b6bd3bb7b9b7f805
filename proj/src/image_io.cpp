#include "lesionkit/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <vector>

#include <png.h>

namespace fs = std::filesystem;

namespace lesionkit {

namespace {

std::uint8_t to_byte(float v) {
    float scaled = v * 255.0f + 0.5f;
    if (scaled < 0.0f) scaled = 0.0f;
    if (scaled > 255.0f) scaled = 255.0f;
    return static_cast<std::uint8_t>(scaled);
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// 8-bit interleaved samples; channels is 1 or 3.
struct RawRaster {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;
};

bool has_ext(const std::string& path, const char* ext) {
    auto e = fs::path(path).extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ext;
}

RawRaster read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw ParseError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ComputeError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ParseError("corrupt PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = static_cast<int>(png_get_channels(png, info));
    RawRaster out;
    out.width = static_cast<int>(w);
    out.height = static_cast<int>(h);
    out.channels = channels;
    out.data.resize(static_cast<std::size_t>(w) * h * channels);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = out.data.data() + static_cast<std::size_t>(y) * w * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png(const RawRaster& raster, const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw UsageError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw ComputeError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ComputeError("PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    int color = raster.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, raster.width, raster.height, 8, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(raster.height);
    for (int y = 0; y < raster.height; ++y)
        rows[y] = const_cast<png_bytep>(raster.data.data() +
                                        static_cast<std::size_t>(y) * raster.width * raster.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

int read_pnm_token(std::istream& in) {
    // Skips whitespace and '#' comments.
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string junk;
            std::getline(in, junk);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int value = -1;
    in >> value;
    if (!in) throw ParseError("truncated PNM header");
    return value;
}

RawRaster read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path);
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
        throw ParseError("not a binary PGM/PPM file: " + path);
    RawRaster out;
    out.channels = magic[1] == '5' ? 1 : 3;
    out.width = read_pnm_token(in);
    out.height = read_pnm_token(in);
    int maxval = read_pnm_token(in);
    if (out.width < 1 || out.height < 1 || maxval < 1 || maxval > 255)
        throw ParseError("unsupported PNM header in " + path);
    in.get();  // single whitespace after maxval
    out.data.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
    in.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(out.data.size()));
    if (!in) throw ParseError("truncated PNM data in " + path);
    return out;
}

void write_pnm(const RawRaster& raster, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path);
    out << (raster.channels == 1 ? "P5" : "P6") << "\n"
        << raster.width << " " << raster.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(raster.data.data()),
              static_cast<std::streamsize>(raster.data.size()));
}

RawRaster read_raster(const std::string& path) {
    if (has_ext(path, ".png")) return read_png(path);
    if (has_ext(path, ".pgm") || has_ext(path, ".ppm") || has_ext(path, ".pnm"))
        return read_pnm(path);
    throw ParseError("unsupported raster format: " + path);
}

void write_raster(const RawRaster& raster, const std::string& path) {
    if (has_ext(path, ".png")) {
        write_png(raster, path);
    } else if (has_ext(path, ".pgm") || has_ext(path, ".ppm") || has_ext(path, ".pnm")) {
        if ((raster.channels == 1) != has_ext(path, ".pgm"))
            throw UsageError("channel count does not match PNM extension: " + path);
        write_pnm(raster, path);
    } else {
        throw UsageError("unsupported raster format: " + path);
    }
}

}  // namespace

FundusImage load_image(const std::string& path) {
    RawRaster raw = read_raster(path);
    FundusImage img(fs::path(path).stem().string(), raw.width, raw.height);
    const float inv = 1.0f / 255.0f;
    std::size_t n = static_cast<std::size_t>(raw.width) * raw.height;
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            img.pixels[i * 3 + c] =
                inv * raw.data[i * raw.channels + (raw.channels == 3 ? c : 0)];
    return img;
}

void save_image(const FundusImage& img, const std::string& path) {
    RawRaster raw;
    raw.width = img.width;
    raw.height = img.height;
    raw.channels = 3;
    raw.data.resize(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) raw.data[i] = to_byte(img.pixels[i]);
    write_raster(raw, path);
}

BinaryMask load_mask(const std::string& path) {
    RawRaster raw = read_raster(path);
    BinaryMask mask(raw.width, raw.height);
    std::size_t n = static_cast<std::size_t>(raw.width) * raw.height;
    for (std::size_t i = 0; i < n; ++i) {
        bool set = false;
        for (int c = 0; c < raw.channels; ++c) set = set || raw.data[i * raw.channels + c] != 0;
        if (set) mask.set(static_cast<int>(i % raw.width), static_cast<int>(i / raw.width));
    }
    return mask;
}

void save_mask(const BinaryMask& mask, const std::string& path) {
    RawRaster raw;
    raw.width = mask.width();
    raw.height = mask.height();
    raw.channels = 1;
    raw.data.resize(static_cast<std::size_t>(raw.width) * raw.height);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x)
            raw.data[static_cast<std::size_t>(y) * raw.width + x] = mask.get(x, y) ? 255 : 0;
    write_raster(raw, path);
}

std::pair<int, int> probe_raster_dims(const std::string& path) {
    if (has_ext(path, ".png")) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ParseError("cannot open " + path);
        std::uint8_t header[24];
        in.read(reinterpret_cast<char*>(header), sizeof(header));
        static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
        if (!in || std::memcmp(header, sig, 8) != 0 || std::memcmp(header + 12, "IHDR", 4) != 0)
            throw ParseError("not a PNG file: " + path);
        auto be32 = [&](int off) {
            return (header[off] << 24) | (header[off + 1] << 16) | (header[off + 2] << 8) |
                   header[off + 3];
        };
        return {be32(16), be32(20)};
    }
    if (has_ext(path, ".pgm") || has_ext(path, ".ppm") || has_ext(path, ".pnm")) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ParseError("cannot open " + path);
        char magic[2];
        in.read(magic, 2);
        if (magic[0] != 'P') throw ParseError("not a PNM file: " + path);
        int w = read_pnm_token(in);
        int h = read_pnm_token(in);
        return {w, h};
    }
    throw ParseError("unsupported raster format: " + path);
}

}  // namespace lesionkit
