#include "vaeunet/image_io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace vaeunet::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) {
        throw std::runtime_error("cannot open " + path);
    }
    return f;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

constexpr int kNiftiHeaderSize = 348;
constexpr int kNiftiVoxOffset = 352;

template <typename T>
T read_le(const unsigned char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void write_le(unsigned char* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

int bytes_per_voxel(NiftiType t) {
    switch (t) {
        case NiftiType::uint8: return 1;
        case NiftiType::int16:
        case NiftiType::uint16: return 2;
        case NiftiType::int32:
        case NiftiType::float32: return 4;
        case NiftiType::float64: return 8;
    }
    throw std::invalid_argument("unsupported NIfTI datatype");
}

double decode_voxel(NiftiType t, const unsigned char* p) {
    switch (t) {
        case NiftiType::uint8: return *p;
        case NiftiType::int16: return read_le<std::int16_t>(p);
        case NiftiType::uint16: return read_le<std::uint16_t>(p);
        case NiftiType::int32: return read_le<std::int32_t>(p);
        case NiftiType::float32: return read_le<float>(p);
        case NiftiType::float64: return read_le<double>(p);
    }
    return 0.0;
}

void encode_voxel(NiftiType t, double v, unsigned char* p) {
    switch (t) {
        case NiftiType::uint8: *p = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); break;
        case NiftiType::int16: write_le(p, static_cast<std::int16_t>(std::lround(v))); break;
        case NiftiType::uint16: write_le(p, static_cast<std::uint16_t>(std::lround(v))); break;
        case NiftiType::int32: write_le(p, static_cast<std::int32_t>(std::lround(v))); break;
        case NiftiType::float32: write_le(p, static_cast<float>(v)); break;
        case NiftiType::float64: write_le(p, v); break;
    }
}

}  // namespace

Raster read_png(const std::string& path) {
    FilePtr f = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialisation failed");
    }
    Raster r;
    std::vector<png_bytep> rows;
    std::vector<unsigned char> buffer;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("failed to decode PNG " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    if ((color & PNG_COLOR_MASK_ALPHA) != 0) {
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    r.width = static_cast<int>(png_get_image_width(png, info));
    r.height = static_cast<int>(png_get_image_height(png, info));
    r.channels = png_get_channels(png, info);
    r.bit_depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    buffer.resize(rowbytes * r.height);
    rows.resize(r.height);
    for (int y = 0; y < r.height; ++y) {
        rows[y] = buffer.data() + rowbytes * y;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    const std::size_t count = static_cast<std::size_t>(r.width) * r.height * r.channels;
    r.pixels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        r.pixels[i] = r.bit_depth == 16 ? static_cast<std::uint16_t>((buffer[2 * i] << 8) | buffer[2 * i + 1])
                                        : buffer[i];
    }
    return r;
}

void write_png(const std::string& path, const Raster& r) {
    if (r.channels != 1 && r.channels != 3) {
        throw std::invalid_argument("write_png: 1 or 3 channels supported");
    }
    if (r.bit_depth != 8 && r.bit_depth != 16) {
        throw std::invalid_argument("write_png: bit depth must be 8 or 16");
    }
    if (r.pixels.size() != static_cast<std::size_t>(r.width) * r.height * r.channels) {
        throw std::invalid_argument("write_png: pixel buffer size mismatch");
    }
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialisation failed");
    }
    const int bpc = r.bit_depth / 8;
    const std::size_t rowbytes = static_cast<std::size_t>(r.width) * r.channels * bpc;
    std::vector<unsigned char> buffer(rowbytes * r.height);
    for (std::size_t i = 0; i < r.pixels.size(); ++i) {
        if (bpc == 2) {
            buffer[2 * i] = static_cast<unsigned char>(r.pixels[i] >> 8);
            buffer[2 * i + 1] = static_cast<unsigned char>(r.pixels[i] & 0xff);
        } else {
            buffer[i] = static_cast<unsigned char>(r.pixels[i]);
        }
    }
    std::vector<png_bytep> rows(r.height);
    for (int y = 0; y < r.height; ++y) {
        rows[y] = buffer.data() + rowbytes * y;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("failed to encode PNG " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, r.width, r.height, r.bit_depth, r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor png_to_tensor(const Raster& r) {
    Tensor t(Shape{1, r.channels, r.height, r.width});
    for (int y = 0; y < r.height; ++y) {
        for (int x = 0; x < r.width; ++x) {
            for (int c = 0; c < r.channels; ++c) {
                t.at(0, c, y, x) = r.pixels[(static_cast<std::size_t>(y) * r.width + x) * r.channels + c];
            }
        }
    }
    return t;
}

Tensor read_nifti(const std::string& path) {
    gzFile gz = gzopen(path.c_str(), "rb");
    if (gz == nullptr) {
        throw std::runtime_error("cannot open " + path);
    }
    std::vector<unsigned char> bytes;
    unsigned char chunk[1 << 15];
    int got = 0;
    while ((got = gzread(gz, chunk, sizeof(chunk))) > 0) {
        bytes.insert(bytes.end(), chunk, chunk + got);
    }
    gzclose(gz);
    if (got < 0 || bytes.size() < kNiftiHeaderSize) {
        throw std::runtime_error("truncated NIfTI file " + path);
    }
    if (read_le<std::int32_t>(bytes.data()) != kNiftiHeaderSize) {
        throw std::runtime_error(path + ": not a little-endian NIfTI-1 file");
    }
    std::array<std::int16_t, 8> dim{};
    for (int i = 0; i < 8; ++i) {
        dim[i] = read_le<std::int16_t>(bytes.data() + 40 + 2 * i);
    }
    if (dim[0] < 2 || dim[0] > 3) {
        throw std::runtime_error(path + ": only 2D images (optionally with channels on dim 3) are supported");
    }
    const int w = dim[1];
    const int h = dim[2];
    const int c = dim[0] == 3 ? dim[3] : 1;
    const auto type = static_cast<NiftiType>(read_le<std::int16_t>(bytes.data() + 70));
    const int bpv = bytes_per_voxel(type);
    const auto offset = static_cast<std::size_t>(read_le<float>(bytes.data() + 108));
    const float slope = read_le<float>(bytes.data() + 112);
    const float inter = read_le<float>(bytes.data() + 116);
    const std::size_t count = static_cast<std::size_t>(w) * h * c;
    if (bytes.size() < offset + count * bpv) {
        throw std::runtime_error(path + ": voxel data truncated");
    }
    Tensor t(Shape{1, c, h, w});
    for (std::size_t i = 0; i < count; ++i) {
        double v = decode_voxel(type, bytes.data() + offset + i * bpv);
        if (slope != 0.0f && !(slope == 1.0f && inter == 0.0f)) {
            v = v * slope + inter;
        }
        t[i] = v;  // x fastest, then y, then channel: matches [C][H][W]
    }
    return t;
}

void write_nifti(const std::string& path, const Tensor& image, NiftiType type) {
    const Shape s = image.shape();
    if (s.n != 1) {
        throw ShapeError("write_nifti: expected a single image, got " + s.str());
    }
    const int bpv = bytes_per_voxel(type);
    std::vector<unsigned char> bytes(kNiftiVoxOffset + image.size() * bpv, 0);
    unsigned char* h = bytes.data();
    write_le<std::int32_t>(h, kNiftiHeaderSize);
    const std::array<std::int16_t, 8> dim{static_cast<std::int16_t>(s.c > 1 ? 3 : 2),
                                          static_cast<std::int16_t>(s.w),
                                          static_cast<std::int16_t>(s.h),
                                          static_cast<std::int16_t>(s.c),
                                          1,
                                          1,
                                          1,
                                          1};
    for (int i = 0; i < 8; ++i) {
        write_le(h + 40 + 2 * i, dim[i]);
    }
    write_le(h + 70, static_cast<std::int16_t>(type));
    write_le(h + 72, static_cast<std::int16_t>(bpv * 8));
    for (int i = 0; i < 8; ++i) {
        write_le(h + 76 + 4 * i, 1.0f);
    }
    write_le(h + 108, static_cast<float>(kNiftiVoxOffset));
    write_le(h + 112, 1.0f);
    std::memcpy(h + 344, "n+1\0", 4);
    for (std::size_t i = 0; i < image.size(); ++i) {
        encode_voxel(type, image[i], h + kNiftiVoxOffset + i * bpv);
    }
    const bool compress = ends_with(path, ".gz");
    gzFile gz = gzopen(path.c_str(), compress ? "wb6" : "wb0T");
    if (gz == nullptr) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    const int written = gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(gz);
    if (written != static_cast<int>(bytes.size())) {
        throw std::runtime_error("short write to " + path);
    }
}

void write_npy(const std::string& path, const std::vector<double>& values, const std::vector<std::size_t>& dims) {
    std::size_t count = 1;
    for (auto d : dims) {
        count *= d;
    }
    if (count != values.size()) {
        throw std::invalid_argument("write_npy: dims do not match value count");
    }
    std::ostringstream shape;
    shape << '(';
    for (std::size_t i = 0; i < dims.size(); ++i) {
        shape << dims[i] << (dims.size() == 1 || i + 1 < dims.size() ? "," : "");
        if (i + 1 < dims.size()) {
            shape << ' ';
        }
    }
    shape << ')';
    std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape.str() + ", }";
    const std::size_t preamble = 10;
    const std::size_t total = preamble + header.size() + 1;
    header.append((64 - total % 64) % 64, ' ');
    header.push_back('\n');
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    const unsigned char magic[8] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
    out.write(reinterpret_cast<const char*>(magic), 8);
    const auto hlen = static_cast<std::uint16_t>(header.size());
    out.put(static_cast<char>(hlen & 0xff));
    out.put(static_cast<char>(hlen >> 8));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

NpyArray read_npy(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    char magic[10];
    in.read(magic, 10);
    if (!in || static_cast<unsigned char>(magic[0]) != 0x93 || std::string(magic + 1, 5) != "NUMPY" || magic[6] != 1) {
        throw std::runtime_error(path + ": not a version-1 .npy file");
    }
    const std::size_t hlen = static_cast<unsigned char>(magic[8]) | (static_cast<unsigned char>(magic[9]) << 8);
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    if (header.find("'<f8'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos) {
        throw std::runtime_error(path + ": only C-ordered little-endian float64 arrays are supported");
    }
    NpyArray a;
    const auto open = header.find('(', header.find("'shape'"));
    const auto close = header.find(')', open);
    std::stringstream dims(header.substr(open + 1, close - open - 1));
    std::string item;
    std::size_t count = 1;
    while (std::getline(dims, item, ',')) {
        if (item.find_first_not_of(' ') == std::string::npos) {
            continue;
        }
        a.dims.push_back(std::stoul(item));
        count *= a.dims.back();
    }
    a.values.resize(count);
    in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) {
        throw std::runtime_error(path + ": truncated array data");
    }
    return a;
}

std::array<std::uint8_t, 3> magma(double t) {
    // 17 evenly spaced samples of matplotlib's magma.
    static constexpr double kTable[17][3] = {
        {0.0015, 0.0005, 0.0139}, {0.0396, 0.0311, 0.1335}, {0.1131, 0.0655, 0.2768}, {0.2117, 0.0620, 0.4186},
        {0.3167, 0.0717, 0.4854}, {0.4147, 0.1104, 0.5047}, {0.5128, 0.1482, 0.5076}, {0.6136, 0.1818, 0.4985},
        {0.7164, 0.2150, 0.4753}, {0.8169, 0.2559, 0.4365}, {0.9043, 0.3196, 0.3881}, {0.9609, 0.4183, 0.3596},
        {0.9867, 0.5356, 0.3822}, {0.9961, 0.6537, 0.4462}, {0.9969, 0.7696, 0.5349}, {0.9924, 0.8843, 0.6401},
        {0.9871, 0.9914, 0.7495},
    };
    if (!std::isfinite(t)) {
        t = 0.0;
    }
    const double x = std::clamp(t, 0.0, 1.0) * 16.0;
    const int i = std::min(static_cast<int>(x), 15);
    const double f = x - i;
    std::array<std::uint8_t, 3> rgb{};
    for (int k = 0; k < 3; ++k) {
        const double v = (1.0 - f) * kTable[i][k] + f * kTable[i + 1][k];
        rgb[k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return rgb;
}

}  // namespace vaeunet::io
