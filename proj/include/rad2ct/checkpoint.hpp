#pragma once

// Checkpoint container (little-endian):
//   "RCKP" | u32 version | u32 header length | header text (canonical key=value
//   lines) | u32 blob count | blobs: u16 name length, name, u8 rank, rank × u32
//   extents, f32 values.

#include <filesystem>
#include <string>
#include <vector>

#include "rad2ct/config.hpp"
#include "rad2ct/tensor.hpp"

namespace rad2ct {

constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kRasterOrder = "width,height,depth";

struct ParameterBlob {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  Config header;  // includes checkpoint.stage, checkpoint.seed, checkpoint.raster
  std::vector<ParameterBlob> blobs;

  const ParameterBlob& blob(const std::string& name) const;
  std::string stage() const { return header.get_string("checkpoint.stage", ""); }
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws DependencyError when the file does not exist.
Checkpoint load_checkpoint(const std::filesystem::path& path);

ParameterBlob to_blob(const std::string& name, const Tensor& t);
/// Copies blob values into `t`; shapes must agree.
void load_blob(const ParameterBlob& blob, Tensor& t);

}  // namespace rad2ct
