#include "rad2ct/phantom.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "rad2ct/error.hpp"

namespace rad2ct {

namespace {

void check_box(const char* name, const Vec3& center, const Vec3& radii, double shift, double radius_jitter) {
  for (std::size_t a = 0; a < 3; ++a) {
    const double r = radii[a] * (1.0 + radius_jitter);
    if (center[a] - shift - r < 0.0 || center[a] + shift + r > 1.0) {
      throw SpecError(std::string("phantom spec: ") + name + " can leave the volume along axis " + std::to_string(a));
    }
  }
}

}  // namespace

bool inside(const Ellipsoid& e, const Vec3& p) {
  double s = 0;
  for (std::size_t a = 0; a < 3; ++a) {
    const double d = (p[a] - e.center[a]) / e.radii[a];
    s += d * d;
  }
  return s <= 1.0;
}

void validate(const PhantomSpec& spec) {
  if (spec.extents.count() == 0) throw SpecError("phantom spec: extents must be positive");
  if (!(spec.field_of_view_mm > 0)) throw SpecError("phantom spec: field of view must be positive");
  if (spec.shift_jitter < 0 || spec.structure_jitter < 0 || spec.radius_jitter < 0 || spec.radius_jitter >= 1) {
    throw SpecError("phantom spec: jitter ranges must be non-negative (radius jitter < 1)");
  }
  const double shift = spec.shift_jitter + spec.structure_jitter;
  check_box("body", spec.body.center, spec.body.radii, spec.shift_jitter, spec.radius_jitter);
  check_box("left lung", spec.lungs[0].center, spec.lungs[0].radii, shift, spec.radius_jitter);
  check_box("right lung", spec.lungs[1].center, spec.lungs[1].radii, shift, spec.radius_jitter);
  check_box("heart", spec.heart.center, spec.heart.radii, shift, spec.radius_jitter);
  const Vec3 spine_c{0.5 * (spec.spine_z[0] + spec.spine_z[1]), spec.spine_center[0], spec.spine_center[1]};
  const Vec3 spine_r{0.5 * (spec.spine_z[1] - spec.spine_z[0]), spec.spine_radius, spec.spine_radius};
  check_box("spine", spine_c, spine_r, shift, spec.radius_jitter);
  for (double level : spec.rib_levels) {
    const Vec3 rib_c{level, spec.body.center[1], spec.body.center[2]};
    const Vec3 rib_r{spec.rib_half_thickness, spec.body.radii[1] * spec.rib_outer, spec.body.radii[2] * spec.rib_outer};
    check_box("rib", rib_c, rib_r, spec.shift_jitter, spec.radius_jitter);
  }
  if (!(spec.rib_inner < spec.rib_outer)) throw SpecError("phantom spec: rib ring is empty");
}

PhantomGeometry phantom_geometry(const PhantomSpec& spec, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const Vec3 shift{spec.shift_jitter * unit(rng), spec.shift_jitter * unit(rng), spec.shift_jitter * unit(rng)};
  auto jitter = [&](const Ellipsoid& e, double extra) {
    Ellipsoid out = e;
    for (std::size_t a = 0; a < 3; ++a) out.center[a] += shift[a] + extra * unit(rng);
    const double s = 1.0 + spec.radius_jitter * unit(rng);
    for (auto& r : out.radii) r *= s;
    return out;
  };
  PhantomGeometry g;
  g.body = jitter(spec.body, 0.0);
  g.lungs[0] = jitter(spec.lungs[0], spec.structure_jitter);
  g.lungs[1] = jitter(spec.lungs[1], spec.structure_jitter);
  g.heart = jitter(spec.heart, spec.structure_jitter);
  g.spine_center = {spec.spine_center[0] + shift[1] + spec.structure_jitter * unit(rng),
                    spec.spine_center[1] + shift[2] + spec.structure_jitter * unit(rng)};
  g.spine_radius = spec.spine_radius * (1.0 + spec.radius_jitter * unit(rng));
  return g;
}

Volume generate_phantom(const PhantomSpec& spec, std::uint64_t index) {
  validate(spec);
  const PhantomGeometry g = phantom_geometry(spec, index);
  const auto& e = spec.extents;
  const Spacing3 spacing{spec.field_of_view_mm / static_cast<double>(e.depth),
                         spec.field_of_view_mm / static_cast<double>(e.height),
                         spec.field_of_view_mm / static_cast<double>(e.width)};
  Volume v = Volume::filled(e, spacing, ValueKind::hounsfield, spec.background_hu);
  const double open = spec.rib_open_sector_deg * std::numbers::pi / 180.0;
  for (std::size_t z = 0; z < e.depth; ++z) {
    const double pz = (static_cast<double>(z) + 0.5) / static_cast<double>(e.depth);
    for (std::size_t y = 0; y < e.height; ++y) {
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(e.height);
      for (std::size_t x = 0; x < e.width; ++x) {
        const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(e.width);
        const Vec3 p{pz, py, px};
        double hu = spec.background_hu;
        if (inside(g.body, p)) hu = g.body.hu;
        for (const auto& lung : g.lungs) {
          if (inside(lung, p)) hu = lung.hu;
        }
        if (inside(g.heart, p)) hu = g.heart.hu;

        bool bone = false;
        const double sy = py - g.spine_center[0], sx = px - g.spine_center[1];
        if (pz >= spec.spine_z[0] && pz <= spec.spine_z[1] && sy * sy + sx * sx <= g.spine_radius * g.spine_radius) {
          bone = true;
        }
        const double ry = (py - g.body.center[1]) / g.body.radii[1];
        const double rx = (px - g.body.center[2]) / g.body.radii[2];
        const double ring = std::sqrt(ry * ry + rx * rx);
        if (ring >= spec.rib_inner && ring <= spec.rib_outer) {
          // anterior is low height index; angle measured from the anterior direction
          const double angle = std::atan2(std::abs(rx), -ry);
          if (angle > open) {
            for (double level : spec.rib_levels) {
              if (std::abs(pz - (level + g.body.center[0] - spec.body.center[0])) <= spec.rib_half_thickness) bone = true;
            }
          }
        }
        if (bone) hu = spec.bone_hu;
        v.at(z, y, x) = hu;
      }
    }
  }
  return v;
}

Volume outline_mask(const Volume& v, double threshold_hu) {
  double threshold = threshold_hu;
  if (v.kind == ValueKind::normalized) threshold = (threshold_hu + 1000.0) / 2000.0 * 2.0 - 1.0;
  Volume out{v.extents, v.spacing, ValueKind::mask, std::vector<double>(v.voxels.size())};
  for (std::size_t i = 0; i < v.voxels.size(); ++i) out.voxels[i] = v.voxels[i] > threshold ? 1.0 : 0.0;
  return out;
}

}  // namespace rad2ct
