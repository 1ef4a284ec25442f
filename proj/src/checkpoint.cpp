#include "rad2ct/checkpoint.hpp"

#include "rad2ct/endian.hpp"
#include "rad2ct/error.hpp"
#include "rad2ct/rvol.hpp"

namespace rad2ct {

const ParameterBlob& Checkpoint::blob(const std::string& name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return b;
  }
  throw DataError("checkpoint has no parameter '" + name + "'");
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out{'R', 'C', 'K', 'P'};
  le::put_u32(out, kCheckpointVersion);
  const std::string header = ckpt.header.canonical_text();
  le::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  le::put_u32(out, static_cast<std::uint32_t>(ckpt.blobs.size()));
  for (const auto& b : ckpt.blobs) {
    le::put_u16(out, static_cast<std::uint16_t>(b.name.size()));
    out.insert(out.end(), b.name.begin(), b.name.end());
    le::put_u8(out, static_cast<std::uint8_t>(b.shape.size()));
    for (auto e : b.shape) le::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : b.values) le::put_f32(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  std::size_t at = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() < at + n) throw ParseError(std::string("checkpoint: truncated ") + what, bytes.size());
  };
  need(4, "magic");
  if (bytes[0] != 'R' || bytes[1] != 'C' || bytes[2] != 'K' || bytes[3] != 'P') {
    throw ParseError("checkpoint: bad magic", 0);
  }
  at = 4;
  need(4, "version");
  const std::uint32_t version = le::get_u32(bytes, at);
  if (version != kCheckpointVersion) throw ParseError("checkpoint: unknown version " + std::to_string(version), at);
  at += 4;
  need(4, "header length");
  const std::uint32_t header_len = le::get_u32(bytes, at);
  at += 4;
  need(header_len, "header");
  Checkpoint ckpt;
  ckpt.header = Config::parse(std::string(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                                          bytes.begin() + static_cast<std::ptrdiff_t>(at + header_len)));
  at += header_len;
  if (ckpt.header.get_string("checkpoint.raster", "") != kRasterOrder) {
    throw ParseError("checkpoint: unsupported raster order '" + ckpt.header.get_string("checkpoint.raster", "") + "'",
                     12);
  }
  need(4, "blob count");
  const std::uint32_t count = le::get_u32(bytes, at);
  at += 4;
  for (std::uint32_t i = 0; i < count; ++i) {
    ParameterBlob b;
    need(2, "blob name length");
    const std::uint16_t name_len = le::get_u16(bytes, at);
    at += 2;
    need(name_len, "blob name");
    b.name.assign(bytes.begin() + static_cast<std::ptrdiff_t>(at), bytes.begin() + static_cast<std::ptrdiff_t>(at + name_len));
    at += name_len;
    need(1, "blob rank");
    const std::uint8_t rank = bytes[at++];
    need(4u * rank, "blob shape");
    for (std::uint8_t r = 0; r < rank; ++r, at += 4) b.shape.push_back(le::get_u32(bytes, at));
    const std::size_t n = numel(b.shape);
    need(4 * n, "blob values");
    b.values.resize(n);
    for (std::size_t j = 0; j < n; ++j, at += 4) b.values[j] = le::get_f32(bytes, at);
    ckpt.blobs.push_back(std::move(b));
  }
  if (at != bytes.size()) throw ParseError("checkpoint: trailing bytes", at);
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DependencyError("missing checkpoint " + path.string());
  return decode_checkpoint(read_file(path));
}

ParameterBlob to_blob(const std::string& name, const Tensor& t) {
  ParameterBlob b{name, t.shape(), {}};
  b.values.reserve(t.size());
  for (Real v : t.values()) b.values.push_back(static_cast<float>(v));
  return b;
}

void load_blob(const ParameterBlob& blob, Tensor& t) {
  if (blob.shape != t.shape()) {
    throw DataError("checkpoint parameter '" + blob.name + "' has shape " + to_string(blob.shape) + ", model expects " +
                    to_string(t.shape()));
  }
  auto dst = t.mutable_values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(blob.values[i]);
}

}  // namespace rad2ct
