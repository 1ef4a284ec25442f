#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "rad2ct/drr.hpp"
#include "rad2ct/volume.hpp"

namespace rad2ct {

/// 2D slice of `v` orthogonal to `axis` (0 depth, 1 height, 2 width) mapped from
/// [-1, 1] to 8-bit gray, row-major.
std::vector<std::uint8_t> slice_gray8(const Volume& v, int axis, std::size_t index, std::size_t& rows,
                                      std::size_t& cols);

/// Writes the slice as an 8-bit grayscale PNG. Throws UsageError for an index
/// outside the axis extent.
void export_slice_png(const Volume& v, int axis, std::size_t index, const std::filesystem::path& path);

/// Binary 16-bit PGM (P5, maxval 65535) of a log-normalized radiograph, [-1, 1] -> [0, 65535].
std::vector<std::uint8_t> encode_pgm16(const Radiograph& r);
void export_radiograph_pgm(const Radiograph& r, const std::filesystem::path& path);

}  // namespace rad2ct
