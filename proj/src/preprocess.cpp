#include "rad2ct/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "rad2ct/error.hpp"

namespace rad2ct {

namespace {

struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

// Output voxel i samples the source at (i + 0.5)·scale − 0.5, clamped to the grid.
AxisTaps axis_taps(std::size_t src_n, std::size_t dst_n, double scale) {
  AxisTaps taps;
  taps.lo.resize(dst_n);
  taps.hi.resize(dst_n);
  taps.frac.resize(dst_n);
  const double max_pos = static_cast<double>(src_n - 1);
  for (std::size_t i = 0; i < dst_n; ++i) {
    double pos = (static_cast<double>(i) + 0.5) * scale - 0.5;
    pos = std::clamp(pos, 0.0, max_pos);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    taps.lo[i] = lo;
    taps.hi[i] = std::min(lo + 1, src_n - 1);
    taps.frac[i] = pos - static_cast<double>(lo);
  }
  return taps;
}

Volume trilinear(const Volume& v, Extents3 dst, const double scale[3]) {
  const AxisTaps tz = axis_taps(v.extents.depth, dst.depth, scale[0]);
  const AxisTaps ty = axis_taps(v.extents.height, dst.height, scale[1]);
  const AxisTaps tx = axis_taps(v.extents.width, dst.width, scale[2]);
  Volume out{dst, v.spacing, v.kind, std::vector<double>(dst.count())};
  auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + (b - a) * t; };
  for (std::size_t z = 0; z < dst.depth; ++z) {
    for (std::size_t y = 0; y < dst.height; ++y) {
      for (std::size_t x = 0; x < dst.width; ++x) {
        const double c00 = lerp(v.at(tz.lo[z], ty.lo[y], tx.lo[x]), v.at(tz.lo[z], ty.lo[y], tx.hi[x]), tx.frac[x]);
        const double c01 = lerp(v.at(tz.lo[z], ty.hi[y], tx.lo[x]), v.at(tz.lo[z], ty.hi[y], tx.hi[x]), tx.frac[x]);
        const double c10 = lerp(v.at(tz.hi[z], ty.lo[y], tx.lo[x]), v.at(tz.hi[z], ty.lo[y], tx.hi[x]), tx.frac[x]);
        const double c11 = lerp(v.at(tz.hi[z], ty.hi[y], tx.lo[x]), v.at(tz.hi[z], ty.hi[y], tx.hi[x]), tx.frac[x]);
        const double c0 = lerp(c00, c01, ty.frac[y]);
        const double c1 = lerp(c10, c11, ty.frac[y]);
        // convex combination; clamp away rounding excursions so no overshoot is possible
        const double lo = std::min({c00, c01, c10, c11}), hi = std::max({c00, c01, c10, c11});
        out.at(z, y, x) = std::clamp(lerp(c0, c1, tz.frac[z]), lo, hi);
      }
    }
  }
  return out;
}

void require_nonempty(const Volume& v, const char* op) {
  if (v.extents.count() == 0 || v.voxels.size() != v.extents.count()) {
    throw DimensionError(std::string(op) + ": volume extents and voxel count disagree");
  }
}

double pad_value(ValueKind kind) {
  switch (kind) {
    case ValueKind::hounsfield: return kAirHu;
    case ValueKind::normalized: return -1.0;
    default: return 0.0;
  }
}

}  // namespace

Volume resample_isotropic(const Volume& v, double target_spacing_mm) {
  if (!(target_spacing_mm > 0)) throw UsageError("resample_isotropic: target spacing must be positive");
  if (!(v.spacing.depth > 0 && v.spacing.height > 0 && v.spacing.width > 0)) {
    throw UsageError("resample_isotropic: volume spacing must be positive");
  }
  require_nonempty(v, "resample_isotropic");
  auto extent = [&](std::size_t n, double sp) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * sp / target_spacing_mm)));
  };
  const Extents3 dst{extent(v.extents.depth, v.spacing.depth), extent(v.extents.height, v.spacing.height),
                     extent(v.extents.width, v.spacing.width)};
  const double scale[3] = {target_spacing_mm / v.spacing.depth, target_spacing_mm / v.spacing.height,
                           target_spacing_mm / v.spacing.width};
  Volume out = trilinear(v, dst, scale);
  out.spacing = {target_spacing_mm, target_spacing_mm, target_spacing_mm};
  return out;
}

Volume crop_or_pad(const Volume& v, Extents3 target) {
  if (target.count() == 0) throw UsageError("crop_or_pad: target extents must be positive");
  require_nonempty(v, "crop_or_pad");
  // Signed offset from the target grid into the source grid along each axis.
  auto offset = [](std::size_t src, std::size_t dst) {
    const long long diff = static_cast<long long>(dst) - static_cast<long long>(src);
    return diff >= 0 ? -(diff / 2) : (-diff) / 2;
  };
  const long long oz = offset(v.extents.depth, target.depth);
  const long long oy = offset(v.extents.height, target.height);
  const long long ox = offset(v.extents.width, target.width);
  Volume out = Volume::filled(target, v.spacing, v.kind, pad_value(v.kind));
  for (std::size_t z = 0; z < target.depth; ++z) {
    const long long sz = static_cast<long long>(z) + oz;
    if (sz < 0 || sz >= static_cast<long long>(v.extents.depth)) continue;
    for (std::size_t y = 0; y < target.height; ++y) {
      const long long sy = static_cast<long long>(y) + oy;
      if (sy < 0 || sy >= static_cast<long long>(v.extents.height)) continue;
      for (std::size_t x = 0; x < target.width; ++x) {
        const long long sx = static_cast<long long>(x) + ox;
        if (sx < 0 || sx >= static_cast<long long>(v.extents.width)) continue;
        out.at(z, y, x) = v.at(static_cast<std::size_t>(sz), static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  }
  return out;
}

Volume resize(const Volume& v, Extents3 target) {
  if (target.count() == 0) throw UsageError("resize: target extents must be positive");
  require_nonempty(v, "resize");
  const double scale[3] = {static_cast<double>(v.extents.depth) / static_cast<double>(target.depth),
                           static_cast<double>(v.extents.height) / static_cast<double>(target.height),
                           static_cast<double>(v.extents.width) / static_cast<double>(target.width)};
  Volume out = trilinear(v, target, scale);
  out.spacing = {v.spacing.depth * scale[0], v.spacing.height * scale[1], v.spacing.width * scale[2]};
  return out;
}

Volume normalize(const Volume& v, double hu_min, double hu_max) {
  if (!(hu_min < hu_max)) throw UsageError("normalize: hu_min must be below hu_max");
  Volume out = v;
  out.kind = ValueKind::normalized;
  const double span = hu_max - hu_min;
  for (auto& x : out.voxels) x = (std::clamp(x, hu_min, hu_max) - hu_min) / span * 2.0 - 1.0;
  return out;
}

Volume denormalize(const Volume& v, double hu_min, double hu_max) {
  if (!(hu_min < hu_max)) throw UsageError("denormalize: hu_min must be below hu_max");
  Volume out = v;
  out.kind = ValueKind::hounsfield;
  const double span = hu_max - hu_min;
  for (auto& x : out.voxels) x = (x + 1.0) * 0.5 * span + hu_min;
  return out;
}

Volume preprocess_volume(const Volume& hu, const PreprocessConfig& cfg) {
  Volume v = resample_isotropic(hu, cfg.target_spacing_mm);
  v = crop_or_pad(v, cfg.crop_extents);
  v = resize(v, cfg.output_extents);
  return normalize(v, cfg.hu_min, cfg.hu_max);
}

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "validation" || name == "val") return Split::validation;
  if (name == "test") return Split::test;
  throw DataError("unknown split label '" + name + "'");
}

std::vector<std::string> SplitAssignment::members(Split split) const {
  std::vector<std::string> out;
  for (const auto& [id, s] : label) {
    if (s == split) out.push_back(id);
  }
  return out;
}

SplitAssignment split_patients(const std::vector<std::string>& ids, std::array<double, 3> fractions,
                               std::uint64_t seed) {
  if (ids.empty()) throw UsageError("split_patients: no patient identifiers");
  for (double f : fractions) {
    if (f < 0) throw UsageError("split_patients: negative split fraction");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
    throw UsageError("split_patients: fractions must sum to 1");
  }
  std::set<std::string> unique(ids.begin(), ids.end());
  if (unique.size() != ids.size()) throw UsageError("split_patients: duplicate patient identifier");

  std::vector<std::string> order(ids);
  std::sort(order.begin(), order.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const double n = static_cast<double>(order.size());
  // small epsilon so that e.g. 10 · 0.7 is not floored to 6
  const auto n_val = static_cast<std::size_t>(std::floor(n * fractions[1] + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(n * fractions[2] + 1e-9));
  const std::size_t n_train = order.size() - n_val - n_test;

  SplitAssignment out;
  out.fractions = fractions;
  out.seed = seed;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.label[order[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::validation : Split::test);
  }
  return out;
}

}  // namespace rad2ct
