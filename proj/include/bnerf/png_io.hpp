#pragma once

#include "bnerf/image.hpp"

#include <filesystem>

namespace bnerf {

/// 8-bit RGB or gray; values are clamped to [0,1] and rounded.
void write_png8(const std::filesystem::path& path, const Image& image);
/// 16-bit gray storing round(value / scale).
void write_png16(const std::filesystem::path& path, const Image& image, double scale);
/// Decodes 8- or 16-bit gray/RGB into [0,1] (divided by 255 or 65535). Throws ParseError.
Image read_png(const std::filesystem::path& path, int* bit_depth = nullptr);

/// Raw native-endian float32 values in Image layout, no header.
void write_f32(const std::filesystem::path& path, const Image& image);
/// Throws ParseError unless the file holds exactly w * h * c values.
Image read_f32(const std::filesystem::path& path, int width, int height, int channels);

}  // namespace bnerf
