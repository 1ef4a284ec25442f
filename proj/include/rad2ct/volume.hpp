#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace rad2ct {

/// Voxel counts along (depth, height, width). Depth is the slice axis, height runs
/// anterior-posterior and width left-right.
struct Extents3 {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t count() const { return depth * height * width; }
  bool operator==(const Extents3&) const = default;
};

/// Millimetres per voxel along (depth, height, width).
struct Spacing3 {
  double depth = 1.0;
  double height = 1.0;
  double width = 1.0;
};

enum class ValueKind : std::uint8_t { hounsfield = 0, normalized = 1, attenuation = 2, mask = 3 };

/// Scalar grid stored width-fastest, then height, then depth.
struct Volume {
  Extents3 extents;
  Spacing3 spacing;
  ValueKind kind = ValueKind::hounsfield;
  std::vector<double> voxels;

  static Volume filled(Extents3 extents, Spacing3 spacing, ValueKind kind, double value) {
    return Volume{extents, spacing, kind, std::vector<double>(extents.count(), value)};
  }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * extents.height + y) * extents.width + x;
  }
  double& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[index(z, y, x)]; }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[index(z, y, x)]; }
};

}  // namespace rad2ct
