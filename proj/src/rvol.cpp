#include "rad2ct/rvol.hpp"

#include <fstream>
#include <iterator>

#include "rad2ct/endian.hpp"
#include "rad2ct/error.hpp"

namespace rad2ct {

std::vector<std::uint8_t> encode_rvol(const Volume& v) {
  if (v.voxels.size() != v.extents.count()) throw DimensionError("write_rvol: voxel count does not match extents");
  std::vector<std::uint8_t> out;
  out.reserve(kRvolHeaderSize + 4 * v.voxels.size());
  for (char c : {'R', 'V', 'O', 'L'}) out.push_back(static_cast<std::uint8_t>(c));
  le::put_u32(out, kRvolVersion);
  le::put_u32(out, static_cast<std::uint32_t>(v.extents.depth));
  le::put_u32(out, static_cast<std::uint32_t>(v.extents.height));
  le::put_u32(out, static_cast<std::uint32_t>(v.extents.width));
  le::put_f32(out, static_cast<float>(v.spacing.depth));
  le::put_f32(out, static_cast<float>(v.spacing.height));
  le::put_f32(out, static_cast<float>(v.spacing.width));
  le::put_u8(out, static_cast<std::uint8_t>(v.kind));
  out.resize(kRvolHeaderSize, 0);
  for (double x : v.voxels) le::put_f32(out, static_cast<float>(x));
  return out;
}

Volume decode_rvol(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || bytes[0] != 'R' || bytes[1] != 'V' || bytes[2] != 'O' || bytes[3] != 'L') {
    throw ParseError("RVOL: bad magic", 0);
  }
  if (bytes.size() < kRvolHeaderSize) {
    throw ParseError("RVOL: truncated header, expected " + std::to_string(kRvolHeaderSize) + " bytes, got " +
                         std::to_string(bytes.size()),
                     bytes.size());
  }
  const std::uint32_t version = le::get_u32(bytes, 4);
  if (version != kRvolVersion) throw ParseError("RVOL: unknown format version " + std::to_string(version), 4);
  Volume v;
  v.extents = {le::get_u32(bytes, 8), le::get_u32(bytes, 12), le::get_u32(bytes, 16)};
  if (v.extents.count() == 0) throw ParseError("RVOL: zero extent", 8);
  v.spacing = {le::get_f32(bytes, 20), le::get_f32(bytes, 24), le::get_f32(bytes, 28)};
  if (!(v.spacing.depth > 0 && v.spacing.height > 0 && v.spacing.width > 0)) {
    throw ParseError("RVOL: non-positive spacing", 20);
  }
  const std::uint8_t tag = bytes[32];
  if (tag > 3) throw ParseError("RVOL: unknown value semantics tag " + std::to_string(tag), 32);
  v.kind = static_cast<ValueKind>(tag);
  const std::size_t expected = 4 * v.extents.count();
  const std::size_t actual = bytes.size() - kRvolHeaderSize;
  if (actual != expected) {
    throw ParseError("RVOL: payload " + std::string(actual < expected ? "truncated" : "has trailing bytes") +
                         ", expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual),
                     kRvolHeaderSize + std::min(actual, expected));
  }
  v.voxels.resize(v.extents.count());
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = le::get_f32(bytes, kRvolHeaderSize + 4 * i);
  return v;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("write failed for " + path.string());
}

void write_rvol(const Volume& v, const std::filesystem::path& path) { write_file(path, encode_rvol(v)); }

Volume read_rvol(const std::filesystem::path& path) { return decode_rvol(read_file(path)); }

}  // namespace rad2ct
