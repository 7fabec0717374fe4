#pragma once

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "octx/tensor.hpp"

namespace octx {

class DecodeError : public std::runtime_error {
public:
    DecodeError(const std::string& path, const std::string& why)
        : std::runtime_error("cannot decode image " + path + ": " + why), path_(path) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

// 8-bit interleaved raster; channels is 1 (gray) or 3 (RGB).
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;

    Image8() = default;
    Image8(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
    bool operator==(const Image8&) const = default;
};

namespace detail {

struct PngReadCtx {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos;
};

inline void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
    auto* ctx = static_cast<PngReadCtx*>(png_get_io_ptr(png));
    if (ctx->pos + n > ctx->size) png_error(png, "unexpected end of data");
    std::memcpy(out, ctx->data + ctx->pos, n);
    ctx->pos += n;
}

inline void png_write_mem(png_structp png, png_bytep in, png_size_t n) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), in, in + n);
}

inline void png_flush_mem(png_structp) {}

inline void png_error_fn(png_structp png, png_const_charp msg) {
    auto* err = static_cast<std::string*>(png_get_error_ptr(png));
    if (err) *err = msg;
    png_longjmp(png, 1);
}

inline void png_warn_fn(png_structp, png_const_charp) {}

inline Image8 decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warn_fn);
    if (!png) throw DecodeError(name, "libpng init failed");
    png_infop info = png_create_info_struct(png);
    PngReadCtx ctx{bytes.data(), bytes.size(), 0};
    Image8 img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DecodeError(name, err.empty() ? "corrupt PNG" : err);
    }
    png_set_read_fn(png, &ctx, png_read_mem);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.channels = png_get_channels(png, info);
    if (img.channels != 1 && img.channels != 3) png_error(png, "unsupported channel layout");
    img.pixels.resize(img.width * img.height * img.channels);
    rows.resize(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

struct JpegErr {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
    char msg[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* e = reinterpret_cast<JpegErr*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, e->msg);
    std::longjmp(e->jump, 1);
}

inline Image8 decode_jpeg(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    jpeg_decompress_struct cinfo{};
    JpegErr err{};
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    Image8 img;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw DecodeError(name, err.msg);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    if (cinfo.jpeg_color_space != JCS_GRAYSCALE) cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    img.width = cinfo.output_width;
    img.height = cinfo.output_height;
    img.channels = static_cast<std::size_t>(cinfo.output_components);
    img.pixels.resize(img.width * img.height * img.channels);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.pixels.data() + cinfo.output_scanline * img.width * img.channels;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

}  // namespace detail

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// PNG or JPEG, sniffed from the leading bytes.
inline Image8 decode_image(const std::vector<std::uint8_t>& bytes, const std::string& name = "<memory>") {
    static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0) return detail::decode_png(bytes, name);
    if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF)
        return detail::decode_jpeg(bytes, name);
    throw DecodeError(name, "unrecognized image format");
}

inline Image8 read_image(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_file_bytes(path);
    } catch (const std::exception& e) {
        throw DecodeError(path.string(), e.what());
    }
    return decode_image(bytes, path.string());
}

// Deterministic PNG encoding (fixed zlib level, no timestamps).
inline std::vector<std::uint8_t> encode_png(const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("encode_png: channels must be 1 or 3");
    std::vector<std::uint8_t> out;
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warn_fn);
    if (!png) throw std::runtime_error("libpng init failed");
    png_infop info = png_create_info_struct(png);
    std::vector<png_bytep> rows(img.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG encode failed: " + err);
    }
    png_set_write_fn(png, &out, detail::png_write_mem, detail::png_flush_mem);
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline void write_png(const std::filesystem::path& path, const Image8& img) { write_file_bytes(path, encode_png(img)); }

// Bilinear resize with half-pixel centres and edge clamping. Interpolates as
// a + f*(b - a) so flat regions stay exact.
inline TensorD resize_bilinear(const TensorD& src, std::size_t out_h, std::size_t out_w) {
    require_rank(src.shape(), 3, "resize_bilinear");
    const std::size_t H = src.dim(0), W = src.dim(1), C = src.dim(2);
    TensorD dst({out_h, out_w, C});
    auto coord = [](std::size_t o, std::size_t in_n, std::size_t out_n, std::size_t& i0, std::size_t& i1, double& f) {
        double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
        if (s < 0) s = 0;
        const double maxs = static_cast<double>(in_n - 1);
        if (s > maxs) s = maxs;
        i0 = static_cast<std::size_t>(s);
        i1 = std::min(i0 + 1, in_n - 1);
        f = s - static_cast<double>(i0);
    };
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        std::size_t y0, y1;
        double fy;
        coord(oy, H, out_h, y0, y1, fy);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            std::size_t x0, x1;
            double fx;
            coord(ox, W, out_w, x0, x1, fx);
            for (std::size_t c = 0; c < C; ++c) {
                const double a = src.at(y0, x0, c), b = src.at(y0, x1, c);
                const double cc = src.at(y1, x0, c), d = src.at(y1, x1, c);
                const double top = a + fx * (b - a);
                const double bot = cc + fx * (d - cc);
                dst.at(oy, ox, c) = top + fy * (bot - top);
            }
        }
    }
    return dst;
}

// Decoded raster -> size x size x 3 float tensor in [0, 1]: bilinear resize,
// gray replicated to three channels, then /255.
inline Tensor preprocess(const Image8& img, std::size_t size = 224) {
    TensorD src({img.height, img.width, img.channels});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) src[i] = img.pixels[i];
    const TensorD r = resize_bilinear(src, size, size);
    Tensor out({size, size, 3});
    for (std::size_t p = 0; p < size * size; ++p)
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = r[p * img.channels + (img.channels == 1 ? 0 : c)];
            out[p * 3 + c] = static_cast<float>(v / 255.0);
        }
    return out;
}

inline Tensor load_and_preprocess(const std::filesystem::path& path, std::size_t size = 224) {
    return preprocess(read_image(path), size);
}

inline std::uint8_t to_u8(double v) {
    if (!(v > 0.0)) return 0;
    if (v >= 1.0) return 255;
    return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

// HWC float [0,1] tensor -> RGB raster.
inline Image8 to_image8(const Tensor& t) {
    require_rank(t.shape(), 3, "to_image8");
    if (t.dim(2) != 3 && t.dim(2) != 1) throw DimensionError("to_image8: channels must be 1 or 3");
    Image8 img(t.dim(1), t.dim(0), t.dim(2));
    for (std::size_t i = 0; i < t.size(); ++i) img.pixels[i] = to_u8(t[i]);
    return img;
}

}  // namespace octx
