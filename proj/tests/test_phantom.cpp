#include <doctest.h>

#include "rad2ct/error.hpp"
#include "rad2ct/phantom.hpp"

using namespace rad2ct;

namespace {

Vec3 centre(const Extents3& e, std::size_t z, std::size_t y, std::size_t x) {
  return {(z + 0.5) / e.depth, (y + 0.5) / e.height, (x + 0.5) / e.width};
}

}  // namespace

TEST_CASE("same seed and index give bit-identical phantoms") {
  PhantomSpec spec;
  for (std::uint64_t i = 0; i < 4; ++i) CHECK(generate_phantom(spec, i).voxels == generate_phantom(spec, i).voxels);
  CHECK(generate_phantom(spec, 0).voxels != generate_phantom(spec, 1).voxels);
  spec.shift_jitter = spec.structure_jitter = spec.radius_jitter = 0;
  CHECK(generate_phantom(spec, 3).voxels == generate_phantom(spec, 3).voxels);
}

TEST_CASE("overwrite order and background") {
  PhantomSpec spec;
  spec.extents = {31, 31, 31};
  for (std::uint64_t i = 0; i < 5; ++i) {
    Volume v = generate_phantom(spec, i);
    CHECK(v.at(15, 15, 15) == doctest::Approx(spec.heart.hu));
    CHECK(v.at(0, 0, 0) == -1000.0);
    CHECK(v.at(30, 30, 30) == -1000.0);
    CHECK(v.at(0, 30, 0) == -1000.0);
  }
}

TEST_CASE("every phantom has lungs, heart and bone") {
  PhantomSpec spec;
  for (std::uint64_t i = 0; i < 16; ++i) {
    Volume v = generate_phantom(spec, i);
    std::size_t lung = 0, heart = 0, bone = 0;
    for (double h : v.voxels) {
      lung += h == -800.0;
      heart += h == 50.0;
      bone += h == 700.0;
    }
    const double floor = 0.001 * v.voxels.size();
    CHECK(lung >= floor);
    CHECK(heart >= floor);
    CHECK(bone >= floor);
  }
}

TEST_CASE("spec validation rejects structures that can leave the volume") {
  PhantomSpec spec;
  CHECK_NOTHROW(validate(spec));
  spec.body.radii[2] = 0.49;
  CHECK_THROWS_AS(validate(spec), SpecError);
  CHECK_THROWS_AS(generate_phantom(spec, 0), SpecError);
  spec = PhantomSpec{};
  spec.radius_jitter = 1.5;
  CHECK_THROWS_AS(validate(spec), SpecError);
}

TEST_CASE("outline mask trivial cases") {
  Volume air = Volume::filled({4, 4, 4}, {}, ValueKind::hounsfield, -1000);
  for (double m : outline_mask(air).voxels) CHECK(m == 0.0);
  Volume v = generate_phantom(PhantomSpec{}, 0);
  for (double m : outline_mask(v, 5000).voxels) CHECK(m == 0.0);
}

TEST_CASE("outline mask matches the analytic body geometry") {
  // Analytic oracle: body minus lungs plus heart. Bone is the only other tissue above
  // threshold, so every disagreement must be a bone voxel.
  PhantomSpec spec;
  for (std::uint64_t i = 0; i < 4; ++i) {
    Volume v = generate_phantom(spec, i);
    Volume mask = outline_mask(v);
    PhantomGeometry g = phantom_geometry(spec, i);
    std::size_t disagreements = 0, body_voxels = 0;
    const auto& e = v.extents;
    for (std::size_t z = 0; z < e.depth; ++z)
      for (std::size_t y = 0; y < e.height; ++y)
        for (std::size_t x = 0; x < e.width; ++x) {
          const Vec3 p = centre(e, z, y, x);
          const bool in_body = inside(g.body, p);
          body_voxels += in_body;
          const bool oracle =
              (in_body && !inside(g.lungs[0], p) && !inside(g.lungs[1], p)) || inside(g.heart, p);
          if ((mask.at(z, y, x) == 1.0) != oracle) {
            ++disagreements;
            CHECK(v.at(z, y, x) == 700.0);
          }
        }
    CHECK(disagreements < body_voxels / 10);
  }
}

TEST_CASE("outline mask maps the threshold for normalized volumes") {
  Volume v{{1, 1, 3}, {}, ValueKind::normalized, {-0.6, -0.4, 0.9}};
  CHECK(outline_mask(v).voxels == std::vector<double>{0, 1, 1});
}
