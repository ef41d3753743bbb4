#pragma once

#include <span>
#include <string>

#include "ssg/prompting.hpp"

namespace ssg::image_io {

/// Reads an 8-bit grayscale or RGB PNG (palette, alpha and 16-bit inputs are
/// converted) into [0,1] floats.
prompting::Image read_png(const std::string& path);

/// Quantizes with round-half-up to 0..255.
void write_png(const prompting::Image& img, const std::string& path);

/// Grayscale heatmap of arbitrary values, linearly mapped from [lo, hi].
void write_heatmap_png(std::span<const float> values, std::uint32_t h, std::uint32_t w, float lo,
                       float hi, const std::string& path);

/// Raw little-endian f32 dump with no header.
void write_raw_f32(std::span<const float> values, const std::string& path);

std::uint8_t quantize(float v);

}  // namespace ssg::image_io
