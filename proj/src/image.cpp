#include "rad2ct/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

#include "rad2ct/error.hpp"
#include "rad2ct/rvol.hpp"

namespace rad2ct {

namespace {

std::uint8_t to_gray8(double v) {
  return static_cast<std::uint8_t>(std::lround((std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0));
}

}  // namespace

std::vector<std::uint8_t> slice_gray8(const Volume& v, int axis, std::size_t index, std::size_t& rows,
                                      std::size_t& cols) {
  const auto& e = v.extents;
  const std::size_t extent = axis == 0 ? e.depth : axis == 1 ? e.height : e.width;
  if (axis < 0 || axis > 2) throw UsageError("export: axis must be 0, 1 or 2");
  if (index >= extent) {
    throw UsageError("export: slice " + std::to_string(index) + " outside axis extent " + std::to_string(extent));
  }
  rows = axis == 0 ? e.height : e.depth;
  cols = axis == 2 ? e.height : e.width;
  std::vector<std::uint8_t> px(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double value = 0;
      if (axis == 0) value = v.at(index, r, c);
      if (axis == 1) value = v.at(r, index, c);
      if (axis == 2) value = v.at(r, c, index);
      px[r * cols + c] = to_gray8(value);
    }
  return px;
}

void export_slice_png(const Volume& v, int axis, std::size_t index, const std::filesystem::path& path) {
  std::size_t rows = 0, cols = 0;
  auto px = slice_gray8(v, axis, index, rows, cols);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw UsageError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw UsageError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw UsageError("PNG encoding failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < rows; ++r) png_write_row(png, &px[r * cols]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> encode_pgm16(const Radiograph& r) {
  if (!r.log_normalized) throw UsageError("PGM export expects a log-normalized radiograph");
  const std::string header = "P5\n" + std::to_string(r.width) + " " + std::to_string(r.height) + "\n65535\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double p : r.pixels) {
    const auto v = static_cast<std::uint16_t>(std::lround((std::clamp(p, -1.0, 1.0) + 1.0) * 0.5 * 65535.0));
    out.push_back(static_cast<std::uint8_t>(v >> 8));  // PGM samples are big-endian
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

void export_radiograph_pgm(const Radiograph& r, const std::filesystem::path& path) {
  write_file(path, encode_pgm16(r));
}

}  // namespace rad2ct
