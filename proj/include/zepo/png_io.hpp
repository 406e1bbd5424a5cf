#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"

namespace zepo {

class PngError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
    auto* message = static_cast<std::string*>(png_get_error_ptr(png));
    if (message) *message = msg;
    png_longjmp(png, 1);
}

inline void png_warn(png_structp, png_const_charp) {}

// libpng reports errors by longjmp; these frames hold no objects with destructors.
inline bool png_read_header(png_structp png, png_infop info, std::FILE* file) {
    if (setjmp(png_jmpbuf(png))) return false;
    png_init_io(png, file);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_expand_gray_1_2_4_to_8(png);
        png_set_gray_to_rgb(png);
    }
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    return true;
}

inline bool png_read_body(png_structp png, png_infop info, png_bytepp rows) {
    if (setjmp(png_jmpbuf(png))) return false;
    png_read_image(png, rows);
    png_read_end(png, info);
    return true;
}

inline bool png_write_body(png_structp png, png_infop info, std::FILE* file, int width, int height, png_bytepp rows,
                           png_textp chunks, int chunk_count) {
    if (setjmp(png_jmpbuf(png))) return false;
    png_init_io(png, file);
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    if (chunk_count > 0) png_set_text(png, info, chunks, chunk_count);
    png_write_info(png, info);
    png_write_image(png, rows);
    png_write_end(png, nullptr);
    return true;
}

} // namespace detail

/// Reads any PNG as 8-bit RGB and converts to [0, 1]. Text chunks are returned through `text`.
inline ImageBuffer read_png(const std::string& path, std::map<std::string, std::string>* text = nullptr) {
    detail::FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw PngError("cannot open '" + path + "'");

    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw PngError("'" + path + "' is not a PNG file");
    }

    std::string message;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, detail::png_fail, detail::png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw PngError("libpng allocation failed");
    }

    const std::string failure = "failed to decode '" + path + "': ";
    if (!detail::png_read_header(png, info, file.get())) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw PngError(failure + message);
    }

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const std::size_t stride = png_get_rowbytes(png, info);
    std::vector<unsigned char> buffer(stride * h);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = buffer.data() + stride * y;
    if (!detail::png_read_body(png, info, rows.data())) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw PngError(failure + message);
    }

    if (text) {
        png_textp chunks = nullptr;
        int count = 0;
        png_get_text(png, info, &chunks, &count);
        for (int i = 0; i < count; ++i) (*text)[chunks[i].key] = chunks[i].text ? chunks[i].text : "";
    }
    png_destroy_read_struct(&png, &info, nullptr);

    if (w <= 0 || h <= 0) throw PngError("'" + path + "' has zero dimensions");
    ImageBuffer img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rows[y][x * 3 + c] / 255.0;
    img.source_path = path;
    return img;
}

inline unsigned char to_byte(double v) {
    if (!std::isfinite(v)) v = 0.0;
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes 8-bit RGB. Output bytes depend only on pixels and text, so equal inputs give equal files.
inline void write_png(const std::string& path, const ImageBuffer& img,
                      const std::map<std::string, std::string>& text = {}) {
    if (img.empty()) throw PngError("write_png: empty image");
    detail::FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw PngError("cannot create '" + path + "'");

    std::string message;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, detail::png_fail, detail::png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw PngError("libpng allocation failed");
    }

    std::vector<unsigned char> buffer(static_cast<std::size_t>(img.width) * img.height * 3);
    for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = to_byte(img.pixels[i]);
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * img.width * 3;

    std::vector<std::string> keys, values;
    for (const auto& [k, v] : text) {
        keys.push_back(k);
        values.push_back(v);
    }
    std::vector<png_text> chunks(keys.size());

    for (std::size_t i = 0; i < chunks.size(); ++i) {
        chunks[i].compression = PNG_TEXT_COMPRESSION_NONE;
        chunks[i].key = keys[i].data();
        chunks[i].text = values[i].data();
        chunks[i].text_length = values[i].size();
    }
    if (!detail::png_write_body(png, info, file.get(), img.width, img.height, rows.data(), chunks.data(),
                                static_cast<int>(chunks.size()))) {
        png_destroy_write_struct(&png, &info);
        throw PngError("failed to encode '" + path + "': " + message);
    }
    png_destroy_write_struct(&png, &info);
}

} // namespace zepo
