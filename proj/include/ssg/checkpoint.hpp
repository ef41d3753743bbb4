#pragma once

// SSGM checkpoint container, little-endian:
//   "SSGM" | version u32 | config (16 x u32) | tensor count u32 |
//   per tensor: name_len u32, name bytes, rank u32, dims u32 x rank,
//               f32 data, frozen flag u8

#include <iosfwd>
#include <string>

#include "ssg/dit.hpp"

namespace ssg::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

std::size_t write_model(const dit::SsgDitModel<float>& model, std::ostream& out);
dit::SsgDitModel<float> read_model(std::istream& in);

void save_model(const dit::SsgDitModel<float>& model, const std::string& path);
dit::SsgDitModel<float> load_model(const std::string& path);

}  // namespace ssg::checkpoint
