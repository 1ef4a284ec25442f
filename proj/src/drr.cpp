#include "rad2ct/drr.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rad2ct/error.hpp"
#include "rad2ct/preprocess.hpp"

namespace rad2ct {

View parse_view(std::string_view name) {
  if (name == "pa") return View::pa;
  if (name == "lat" || name == "lateral") return View::lateral;
  throw UsageError("unknown view '" + std::string(name) + "' (expected pa or lat)");
}

const char* to_string(View view) { return view == View::pa ? "pa" : "lat"; }

AttenuationVolume hu_to_attenuation(const Volume& hu, double mu_water) {
  if (!(mu_water > 0)) throw UsageError("hu_to_attenuation: mu_water must be positive");
  if (hu.kind != ValueKind::hounsfield) throw DataError("hu_to_attenuation: volume is not in Hounsfield units");
  AttenuationVolume a{hu.extents, hu.spacing, std::vector<double>(hu.voxels.size())};
  for (std::size_t i = 0; i < hu.voxels.size(); ++i) {
    a.mu[i] = std::max(0.0, mu_water * (1.0 + hu.voxels[i] / 1000.0));
  }
  return a;
}

Radiograph project(const AttenuationVolume& a, View view, double i0) {
  if (!(i0 > 0)) throw UsageError("project: I0 must be positive");
  const auto& e = a.extents;
  Radiograph r;
  r.view = view;
  r.i0 = i0;
  r.height = e.depth;
  if (view == View::pa) {
    r.width = e.width;
    r.pixels.resize(e.depth * e.width);
    const double step = a.spacing.height;
    for (std::size_t z = 0; z < e.depth; ++z)
      for (std::size_t x = 0; x < e.width; ++x) {
        double path = 0;
        for (std::size_t y = 0; y < e.height; ++y) path += a.at(z, y, x) * step;
        r.pixels[z * e.width + x] = i0 * std::exp(-path);
      }
  } else {
    r.width = e.height;
    r.pixels.resize(e.depth * e.height);
    const double step = a.spacing.width;
    for (std::size_t z = 0; z < e.depth; ++z)
      for (std::size_t y = 0; y < e.height; ++y) {
        double path = 0;
        for (std::size_t x = 0; x < e.width; ++x) path += a.at(z, y, x) * step;
        r.pixels[z * e.height + y] = i0 * std::exp(-path);
      }
  }
  return r;
}

Radiograph log_normalize_radiograph(const Radiograph& r, double l_max) {
  if (!(l_max > 0)) throw UsageError("log_normalize_radiograph: l_max must be positive");
  if (r.log_normalized) throw UsageError("log_normalize_radiograph: radiograph already normalized");
  Radiograph out = r;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double p = r.pixels[i];
    if (!(p > 0)) {
      throw DataError("log_normalize_radiograph: non-positive pixel at index " + std::to_string(i));
    }
    const double path = -std::log(p / r.i0);
    out.pixels[i] = std::clamp(path / l_max * 2.0 - 1.0, -1.0, 1.0);
  }
  out.log_normalized = true;
  out.l_max = l_max;
  return out;
}

Radiograph simulate_radiograph(const Volume& hu, View view, double mu_water, double l_max) {
  const Volume source = hu.kind == ValueKind::normalized ? denormalize(hu) : hu;
  return log_normalize_radiograph(project(hu_to_attenuation(source, mu_water), view, 1.0), l_max);
}

Volume radiograph_to_volume(const Radiograph& r) {
  if (!r.log_normalized) throw UsageError("radiograph_to_volume: only log-normalized radiographs are stored");
  return Volume{{1, r.height, r.width}, {1.0, 1.0, 1.0}, ValueKind::normalized, r.pixels};
}

Radiograph radiograph_from_volume(const Volume& v, View view, double l_max) {
  if (v.extents.depth != 1 || v.kind != ValueKind::normalized) {
    throw DataError("radiograph file must be a depth-1 normalized volume");
  }
  Radiograph r;
  r.height = v.extents.height;
  r.width = v.extents.width;
  r.pixels = v.voxels;
  r.view = view;
  r.log_normalized = true;
  r.l_max = l_max;
  return r;
}

}  // namespace rad2ct
