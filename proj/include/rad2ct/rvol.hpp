#pragma once

// RVOL: little-endian binary volume container.
//
//   offset  size  field
//        0     4  magic "RVOL"
//        4     4  format version (u32, currently 1)
//        8    12  extents depth, height, width (3 × u32)
//       20    12  spacing depth, height, width in mm (3 × f32)
//       32     1  value semantics (0 HU, 1 normalized, 2 attenuation, 3 mask)
//       33    15  reserved, zero
//       48     …  voxels, f32, width fastest, then height, then depth

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rad2ct/volume.hpp"

namespace rad2ct {

constexpr std::uint32_t kRvolVersion = 1;
constexpr std::size_t kRvolHeaderSize = 48;

std::vector<std::uint8_t> encode_rvol(const Volume& v);
/// Throws ParseError naming the byte offset of the first problem.
Volume decode_rvol(std::span<const std::uint8_t> bytes);

void write_rvol(const Volume& v, const std::filesystem::path& path);
Volume read_rvol(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace rad2ct
