#pragma once

// Synthetic chest-like CT phantoms built from ellipsoids and cylinders. Geometry
// is given in fractional coordinates (0..1 along depth, height, width) so the
// same spec rasterizes at any resolution.

#include <array>
#include <cstdint>
#include <vector>

#include "rad2ct/volume.hpp"

namespace rad2ct {

using Vec3 = std::array<double, 3>;  // (depth, height, width)

struct Ellipsoid {
  Vec3 center;
  Vec3 radii;
  double hu;
};

struct PhantomSpec {
  std::uint64_t seed = 1;
  Extents3 extents{32, 32, 32};
  double field_of_view_mm = 320.0;
  double background_hu = -1000.0;

  Ellipsoid body{{0.5, 0.5, 0.5}, {0.44, 0.30, 0.40}, 40.0};
  std::array<Ellipsoid, 2> lungs{{{{0.5, 0.47, 0.32}, {0.32, 0.20, 0.13}, -800.0},
                                  {{0.5, 0.47, 0.68}, {0.32, 0.20, 0.13}, -800.0}}};
  Ellipsoid heart{{0.52, 0.45, 0.54}, {0.14, 0.12, 0.12}, 50.0};

  double bone_hu = 700.0;
  // Spine: cylinder along depth at (height, width) with radius, spanning [z_lo, z_hi].
  std::array<double, 2> spine_center{0.70, 0.5};
  double spine_radius = 0.06;
  std::array<double, 2> spine_z{0.1, 0.9};
  // Ribs: elliptical ring arcs around the body axis at these depths; ring spans
  // [rib_inner, rib_outer] of the body radii; the anterior sector is open.
  std::vector<double> rib_levels{0.28, 0.42, 0.56, 0.70};
  double rib_half_thickness = 0.025;
  double rib_inner = 0.86;
  double rib_outer = 0.97;
  double rib_open_sector_deg = 40.0;

  // Uniform jitter: whole-anatomy shift, per-structure extra shift, relative radius scale.
  double shift_jitter = 0.02;
  double structure_jitter = 0.01;
  double radius_jitter = 0.08;
};

/// Throws SpecError if any structure can leave the unit cube under worst-case jitter.
void validate(const PhantomSpec& spec);

/// HU volume for sample `index`; identical (spec, index) give bit-identical volumes.
/// Later structures overwrite earlier ones: air < body < lungs < heart < bone.
Volume generate_phantom(const PhantomSpec& spec, std::uint64_t index);

/// 1 where the voxel exceeds threshold_hu, else 0. Normalized volumes are compared
/// against the threshold mapped through the [-1000, 1000] HU window.
Volume outline_mask(const Volume& v, double threshold_hu = -500.0);

/// Per-sample geometry after jitter; exposed so tests can check rasterization
/// against the analytic shapes.
struct PhantomGeometry {
  Ellipsoid body;
  std::array<Ellipsoid, 2> lungs;
  Ellipsoid heart;
  std::array<double, 2> spine_center;
  double spine_radius;
};
PhantomGeometry phantom_geometry(const PhantomSpec& spec, std::uint64_t index);

bool inside(const Ellipsoid& e, const Vec3& p);

}  // namespace rad2ct
