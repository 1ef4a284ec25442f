#include <doctest.h>

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "rad2ct/checkpoint.hpp"
#include "rad2ct/config.hpp"
#include "rad2ct/error.hpp"
#include "rad2ct/image.hpp"
#include "rad2ct/rvol.hpp"

using namespace rad2ct;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "rad2ct_test_io";
  fs::create_directories(dir);
  return dir / name;
}

Volume random_volume(Extents3 e, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Volume v = Volume::filled(e, {0.5, 1.25, 2.0}, ValueKind::normalized, 0.0);
  for (auto& x : v.voxels) x = u(rng);  // f32-representable values
  return v;
}

std::size_t parse_offset(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ParseError& e) {
    return e.offset();
  }
  FAIL("expected a ParseError");
  return 0;
}

}  // namespace

TEST_CASE("rvol round trip is bit-exact") {
  std::mt19937_64 rng(1);
  Volume v = random_volume({3, 4, 5}, rng);
  const auto path = scratch("a.rvol");
  write_rvol(v, path);
  Volume back = read_rvol(path);
  CHECK(back.extents == v.extents);
  CHECK(back.kind == v.kind);
  CHECK(back.spacing.height == 1.25);
  CHECK(back.voxels == v.voxels);
  CHECK(read_file(path) == encode_rvol(back));
}

TEST_CASE("rvol header layout") {
  Volume v = Volume::filled({2, 3, 4}, {1, 1, 1}, ValueKind::mask, 1.0);
  auto bytes = encode_rvol(v);
  REQUIRE(bytes.size() == 48 + 4 * 24);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RVOL");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 3);
  CHECK(bytes[16] == 4);
  CHECK(bytes[32] == 3);
  for (std::size_t i = 33; i < 48; ++i) CHECK(bytes[i] == 0);
  // 1.0f little-endian
  CHECK(bytes[48] == 0x00);
  CHECK(bytes[51] == 0x3f);
  CHECK(bytes[50] == 0x80);
}

TEST_CASE("rvol parse errors name the byte offset") {
  std::mt19937_64 rng(2);
  const auto good = encode_rvol(random_volume({2, 2, 2}, rng));
  auto bytes = good;
  bytes[0] = 'X';
  CHECK(parse_offset([&] { decode_rvol(bytes); }) == 0);
  bytes = good;
  bytes[4] = 2;
  CHECK(parse_offset([&] { decode_rvol(bytes); }) == 4);
  bytes = good;
  bytes[32] = 9;
  CHECK(parse_offset([&] { decode_rvol(bytes); }) == 32);
  bytes = good;
  bytes.resize(20);
  CHECK(parse_offset([&] { decode_rvol(bytes); }) == 20);
  bytes = good;
  bytes.resize(bytes.size() - 4);
  try {
    decode_rvol(bytes);
    FAIL("truncated payload accepted");
  } catch (const ParseError& e) {
    const std::string what = e.what();
    CHECK(what.find("expected 32") != std::string::npos);
    CHECK(what.find("got 28") != std::string::npos);
    CHECK(e.offset() == 48 + 28);
  }
  bytes = good;
  bytes.push_back(0);
  CHECK_THROWS_AS(decode_rvol(bytes), ParseError);
  CHECK_THROWS_AS(read_rvol(scratch("missing.rvol")), DependencyError);
}

TEST_CASE("slice export windows [-1,1] onto 8-bit gray") {
  Volume black = Volume::filled({2, 3, 4}, {}, ValueKind::normalized, -1.0);
  Volume white = Volume::filled({2, 3, 4}, {}, ValueKind::normalized, 1.0);
  std::size_t rows = 0, cols = 0;
  for (auto g : slice_gray8(black, 0, 1, rows, cols)) CHECK(g == 0);
  CHECK(rows == 3);
  CHECK(cols == 4);
  for (auto g : slice_gray8(white, 2, 3, rows, cols)) CHECK(g == 255);
  CHECK(rows == 2);
  CHECK(cols == 3);
  slice_gray8(white, 1, 0, rows, cols);
  CHECK(rows == 2);
  CHECK(cols == 4);
  CHECK_THROWS_AS(slice_gray8(white, 0, 2, rows, cols), UsageError);
  CHECK_THROWS_AS(export_slice_png(white, 1, 3, scratch("x.png")), UsageError);
}

TEST_CASE("png export is deterministic") {
  std::mt19937_64 rng(3);
  Volume v = random_volume({4, 6, 8}, rng);
  export_slice_png(v, 0, 2, scratch("s1.png"));
  export_slice_png(v, 0, 2, scratch("s2.png"));
  auto a = read_file(scratch("s1.png"));
  CHECK(a == read_file(scratch("s2.png")));
  REQUIRE(a.size() > 8);
  CHECK(a[1] == 'P');
  CHECK(a[2] == 'N');
  CHECK(a[3] == 'G');
}

TEST_CASE("pgm export maps [-1,1] to 16 bits") {
  Radiograph r{1, 3, {-1.0, 1.0, 0.0}, View::pa, 1.0, true, 12.0};
  auto bytes = encode_pgm16(r);
  const std::string header = "P5\n3 1\n65535\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
  const auto* px = bytes.data() + header.size();
  CHECK(px[0] == 0);
  CHECK(px[1] == 0);
  CHECK(px[2] == 0xff);
  CHECK(px[3] == 0xff);
  CHECK((px[4] << 8 | px[5]) == 32768);
  r.log_normalized = false;
  CHECK_THROWS_AS(encode_pgm16(r), UsageError);
}

TEST_CASE("config parsing and overrides") {
  Config c = Config::parse("# comment\nmodel.rank = 3\n\nmodel.channels=8, 16,32\nname = two words\nflag = true\n");
  CHECK(c.get_int("model.rank", 0) == 3);
  CHECK(c.get_size_list("model.channels", {}) == std::vector<std::size_t>{8, 16, 32});
  CHECK(c.get_string("name", "") == "two words");
  CHECK(c.get_bool("flag", false));
  CHECK(c.get_double("missing", 2.5) == 2.5);
  c.apply_override("model.rank=2");
  CHECK(c.get_int("model.rank", 0) == 2);
  CHECK_THROWS_AS(c.apply_override("nonsense"), UsageError);
  CHECK_THROWS_AS(Config::parse("just a line\n"), UsageError);
  c.set("bad", "1.5x");
  CHECK_THROWS_AS(c.get_double("bad", 0), UsageError);
  CHECK_THROWS_AS(Config::load(scratch("missing.cfg")), DependencyError);
  CHECK(Config::parse(c.canonical_text()).entries() == c.entries());
  CHECK(c.with_prefix("model.").entries().size() == 2);
}

TEST_CASE("checkpoint round trip is byte-identical") {
  std::mt19937_64 rng(4);
  Checkpoint ckpt;
  ckpt.header.set("checkpoint.stage", "vq3d");
  ckpt.header.set("checkpoint.seed", "7");
  ckpt.header.set("checkpoint.raster", kRasterOrder);
  ckpt.header.set("model.rank", "3");
  std::normal_distribution<double> n;
  std::vector<Real> w(24);
  for (auto& x : w) x = n(rng);
  Tensor t = Tensor::from({2, 3, 4}, w);
  ckpt.blobs.push_back(to_blob("enc.0.weight", t));
  ckpt.blobs.push_back(to_blob("codebook", Tensor::from({2, 1}, {0.5, -0.25})));

  const auto path = scratch("m.ckpt");
  save_checkpoint(ckpt, path);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.stage() == "vq3d");
  CHECK(back.header.canonical_text() == ckpt.header.canonical_text());
  CHECK(encode_checkpoint(back) == read_file(path));

  Tensor target = Tensor::zeros({2, 3, 4});
  load_blob(back.blob("enc.0.weight"), target);
  for (std::size_t i = 0; i < 24; ++i) CHECK(target[i] == static_cast<Real>(static_cast<float>(w[i])));
  Tensor wrong = Tensor::zeros({4, 3, 2});
  CHECK_THROWS_AS(load_blob(back.blob("enc.0.weight"), wrong), DataError);
  CHECK_THROWS_AS(back.blob("nope"), DataError);
  CHECK_THROWS_AS(load_checkpoint(scratch("absent.ckpt")), DependencyError);

  auto bytes = encode_checkpoint(ckpt);
  bytes[1] = 'X';
  CHECK(parse_offset([&] { decode_checkpoint(bytes); }) == 0);
  bytes = encode_checkpoint(ckpt);
  bytes.resize(bytes.size() - 1);
  CHECK_THROWS_AS(decode_checkpoint(bytes), ParseError);
}

TEST_CASE("checkpoint requires the raster declaration") {
  Checkpoint ckpt;
  ckpt.header.set("checkpoint.stage", "gpt");
  ckpt.header.set("checkpoint.raster", "depth,height,width");
  CHECK_THROWS_AS(decode_checkpoint(encode_checkpoint(ckpt)), ParseError);
}
