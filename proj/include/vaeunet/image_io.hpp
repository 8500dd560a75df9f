#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vaeunet/tensor.hpp"

namespace vaeunet::io {

/// Interleaved 8- or 16-bit raster, 1 (gray) or 3 (RGB) channels.
struct Raster {
    int height = 0;
    int width = 0;
    int channels = 1;
    int bit_depth = 8;
    std::vector<std::uint16_t> pixels;  // row-major, interleaved
};

Raster read_png(const std::string& path);
void write_png(const std::string& path, const Raster& raster);

/// PNG <-> [1 x C x H x W] tensor of raw intensities.
Tensor png_to_tensor(const Raster& raster);

enum class NiftiType : std::int16_t { uint8 = 2, int16 = 4, int32 = 8, float32 = 16, float64 = 64, uint16 = 512 };

/// 2D (optionally multi-channel via the third dimension) NIfTI-1, gzip or plain.
Tensor read_nifti(const std::string& path);
void write_nifti(const std::string& path, const Tensor& image, NiftiType type);

/// Little-endian float64 .npy array (C order).
void write_npy(const std::string& path, const std::vector<double>& values, const std::vector<std::size_t>& dims);

struct NpyArray {
    std::vector<std::size_t> dims;
    std::vector<double> values;
};
NpyArray read_npy(const std::string& path);

/// Piecewise-linear magma colormap, t in [0, 1].
std::array<std::uint8_t, 3> magma(double t);

}  // namespace vaeunet::io
