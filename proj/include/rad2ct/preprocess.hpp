#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rad2ct/volume.hpp"

namespace rad2ct {

constexpr double kAirHu = -1000.0;

/// Trilinear resampling (edge-clamped, voxel centres aligned) onto a grid with the
/// given isotropic spacing. New extents are round(extent · spacing / target).
Volume resample_isotropic(const Volume& v, double target_spacing_mm);

/// Centre crop or pad every axis to `target`. Padding uses air for HU volumes (-1 for
/// normalized, 0 otherwise); an odd surplus goes to the high-index side.
Volume crop_or_pad(const Volume& v, Extents3 target);

/// Trilinear scale to `target` regardless of spacing; spacing is rescaled to keep
/// the physical field of view.
Volume resize(const Volume& v, Extents3 target);

/// Clamp to [hu_min, hu_max] and map affinely onto [-1, 1].
Volume normalize(const Volume& v, double hu_min = -1000.0, double hu_max = 1000.0);
/// Inverse of normalize on [-1, 1].
Volume denormalize(const Volume& v, double hu_min = -1000.0, double hu_max = 1000.0);

struct PreprocessConfig {
  double target_spacing_mm = 1.0;
  Extents3 crop_extents{320, 320, 320};
  Extents3 output_extents{120, 120, 120};
  double hu_min = -1000.0;
  double hu_max = 1000.0;
};

/// resample_isotropic -> crop_or_pad -> resize -> normalize.
Volume preprocess_volume(const Volume& hu, const PreprocessConfig& cfg);

enum class Split { train, validation, test };
const char* to_string(Split split);
Split parse_split(const std::string& name);

struct SplitAssignment {
  std::map<std::string, Split> label;
  std::array<double, 3> fractions{0.7, 0.2, 0.1};
  std::uint64_t seed = 0;

  std::vector<std::string> members(Split split) const;
};

/// Seeded shuffle, then contiguous train/validation/test blocks. Validation and
/// test sizes are floor(n · fraction); the remainder goes to train.
SplitAssignment split_patients(const std::vector<std::string>& ids, std::array<double, 3> fractions,
                               std::uint64_t seed);

}  // namespace rad2ct
