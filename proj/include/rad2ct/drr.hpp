#pragma once

// Digitally reconstructed radiographs: parallel-beam Beer-Lambert projection of an
// attenuation volume along the anterior-posterior (PA view) or left-right (lateral
// view) axis.

#include <cstddef>
#include <string_view>
#include <vector>

#include "rad2ct/volume.hpp"

namespace rad2ct {

enum class View { pa, lateral };
View parse_view(std::string_view name);
const char* to_string(View view);

/// Linear attenuation coefficients in mm^-1, all >= 0.
struct AttenuationVolume {
  Extents3 extents;
  Spacing3 spacing;
  std::vector<double> mu;

  double at(std::size_t z, std::size_t y, std::size_t x) const {
    return mu[(z * extents.height + y) * extents.width + x];
  }
};

/// Row-major (width fastest) 2D image. PA images are depth × width, lateral
/// images depth × height.
struct Radiograph {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
  View view = View::pa;
  double i0 = 1.0;
  // Set once log_normalize_radiograph has mapped pixels into [-1, 1].
  bool log_normalized = false;
  double l_max = 0.0;
};

constexpr double kMuWater = 0.02;  // mm^-1
constexpr double kDefaultLmax = 12.0;

/// u = mu_water · (1 + HU / 1000), clamped at 0.
AttenuationVolume hu_to_attenuation(const Volume& hu, double mu_water = kMuWater);

/// I0 · exp(-Σ u_i d_i) along each axis-aligned ray; d_i is the voxel spacing along the ray.
Radiograph project(const AttenuationVolume& a, View view, double i0 = 1.0);

/// p -> -ln(p / I0), then [0, l_max] -> [-1, 1] with clamping. Throws DataError on
/// non-positive pixels.
Radiograph log_normalize_radiograph(const Radiograph& r, double l_max = kDefaultLmax);

/// HU volume -> attenuation -> projection -> log normalization.
Radiograph simulate_radiograph(const Volume& hu, View view, double mu_water = kMuWater, double l_max = kDefaultLmax);

/// A radiograph as a depth-1 normalized volume (the on-disk representation).
Volume radiograph_to_volume(const Radiograph& r);
Radiograph radiograph_from_volume(const Volume& v, View view, double l_max = kDefaultLmax);

}  // namespace rad2ct
