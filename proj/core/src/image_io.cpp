#include "uninpaint/image_io.hpp"

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "uninpaint/errors.hpp"

namespace uninpaint {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    return f;
}

bool has_png_signature(std::FILE* f) {
    unsigned char header[8] = {};
    const auto read = std::fread(header, 1, 8, f);
    std::rewind(f);
    return read == 8 && png_sig_cmp(header, 0, 8) == 0;
}

// Returns interleaved 8-bit samples plus geometry.
struct Decoded {
    std::vector<std::uint8_t> data;
    int width = 0;
    int height = 0;
    int channels = 0;
};

Decoded decode_png(std::FILE* f, const std::filesystem::path& path) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    Decoded out;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG '" + path.string() + "'");
    }
    png_init_io(png, f);
    png_read_info(png, info);

    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) {
        png_set_strip_16(png);
    }
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    if (png_get_valid(png, info, PNG_INFO_tRNS)) {
        png_set_tRNS_to_alpha(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) {
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);

    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = png_get_channels(png, info);
    const auto stride = png_get_rowbytes(png, info);
    out.data.resize(stride * static_cast<std::size_t>(out.height));
    rows.resize(static_cast<std::size_t>(out.height));
    for (int r = 0; r < out.height; ++r) {
        rows[static_cast<std::size_t>(r)] = out.data.data() + stride * static_cast<std::size_t>(r);
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    std::longjmp(err->jump, 1);
}

Decoded decode_jpeg(std::FILE* f, const std::filesystem::path& path) {
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    Decoded out;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError("cannot decode '" + path.string() + "'");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, f);
    jpeg_read_header(&cinfo, TRUE);
    if (cinfo.num_components != 1) {
        cinfo.out_color_space = JCS_RGB;
    }
    jpeg_start_decompress(&cinfo);
    out.width = static_cast<int>(cinfo.output_width);
    out.height = static_cast<int>(cinfo.output_height);
    out.channels = cinfo.output_components;
    const auto stride = static_cast<std::size_t>(out.width * out.channels);
    out.data.resize(stride * static_cast<std::size_t>(out.height));
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out.data.data() + stride * cinfo.output_scanline;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

void encode_png(const std::filesystem::path& path, const std::uint8_t* data, int width, int height,
                int color_type, int bit_depth, std::size_t stride) {
    auto f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing '" + path.string() + "'");
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < height; ++r) {
        png_write_row(png, const_cast<png_bytep>(data + stride * static_cast<std::size_t>(r)));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(f.get()) != 0) {
        throw IoError("failed flushing '" + path.string() + "'");
    }
}

} // namespace

torch::Tensor read_image(const std::filesystem::path& path) {
    auto f = open_file(path, "rb");
    const auto decoded = has_png_signature(f.get()) ? decode_png(f.get(), path) : decode_jpeg(f.get(), path);
    if (decoded.channels != 1 && decoded.channels != 3) {
        throw IoError("unsupported channel count in '" + path.string() + "'");
    }
    auto hwc = torch::from_blob(const_cast<std::uint8_t*>(decoded.data.data()),
                                {decoded.height, decoded.width, decoded.channels}, torch::kUInt8);
    return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0f).contiguous();
}

void write_png(const torch::Tensor& image, const std::filesystem::path& path) {
    if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3)) {
        throw ContractViolation("write_png expects a [1|3, H, W] tensor");
    }
    auto hwc = image.detach()
                   .to(torch::kFloat64)
                   .clamp(0.0, 1.0)
                   .mul(255.0)
                   .add(0.5)
                   .floor() // half away from zero; torch::round is half-to-even
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
    const int channels = static_cast<int>(image.size(0));
    const int height = static_cast<int>(image.size(1));
    const int width = static_cast<int>(image.size(2));
    encode_png(path, hwc.data_ptr<std::uint8_t>(), width, height,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, 8,
               static_cast<std::size_t>(width * channels));
}

void write_mask_png(const Mask& mask, const std::filesystem::path& path) {
    const auto height = static_cast<int>(mask.height());
    const auto width = static_cast<int>(mask.width());
    const auto stride = static_cast<std::size_t>((width + 7) / 8);
    std::vector<std::uint8_t> packed(stride * static_cast<std::size_t>(height), 0);
    auto bits = mask.bits().accessor<float, 2>();
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            if (bits[r][c] != 0.0f) {
                packed[stride * static_cast<std::size_t>(r) + static_cast<std::size_t>(c / 8)] |=
                    static_cast<std::uint8_t>(0x80u >> (c % 8));
            }
        }
    }
    encode_png(path, packed.data(), width, height, PNG_COLOR_TYPE_GRAY, 1, stride);
}

Mask read_mask_png(const std::filesystem::path& path) {
    auto image = read_image(path);
    if (image.size(0) != 1) {
        throw IoError("mask file '" + path.string() + "' is not single-channel");
    }
    return Mask((image[0] > 0.5f).to(torch::kFloat32));
}

} // namespace uninpaint
