#include "doctest.h"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "sstm/flow_io.hpp"

using namespace sstm;

namespace {

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

uint64_t fnv1a(const std::vector<uint16_t>& px) {
  uint64_t h = 1469598103934665603ull;
  for (uint16_t v : px) {
    h = (h ^ (v & 0xff)) * 1099511628211ull;
    h = (h ^ (v >> 8)) * 1099511628211ull;
  }
  return h;
}

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

// PNG chunk assembly for crafting filtered files.
void put_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(uint8_t(x >> 24));
  v.push_back(uint8_t(x >> 16));
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x));
}

void chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
  put_be32(out, uint32_t(data.size()));
  const size_t at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  put_be32(out, uint32_t(crc32(0L, out.data() + at, uInt(4 + data.size()))));
}

std::vector<uint8_t> craft_png(int w, int h, int depth, int color,
                               const std::vector<uint8_t>& raw_scanlines, int interlace = 0) {
  std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  put_be32(ihdr, uint32_t(w));
  put_be32(ihdr, uint32_t(h));
  ihdr.push_back(uint8_t(depth));
  ihdr.push_back(uint8_t(color));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(uint8_t(interlace));
  chunk(out, "IHDR", ihdr);
  uLongf cap = compressBound(uLong(raw_scanlines.size()));
  std::vector<uint8_t> comp(cap);
  REQUIRE(compress2(comp.data(), &cap, raw_scanlines.data(), uLong(raw_scanlines.size()), 6) ==
          Z_OK);
  comp.resize(cap);
  chunk(out, "IDAT", comp);
  chunk(out, "IEND", {});
  return out;
}

}  // namespace

TEST_CASE(".flo: minimal 1x1 zero field is the exact 20-byte layout") {
  TempFile tf("io_min.flo");
  FlowFile f;
  f.w = 1;
  f.h = 1;
  f.flow = Tensor(Shape{2, 1, 1}, 0.0f);
  write_flo(tf.path, f);
  auto bytes = slurp(tf.path);
  REQUIRE(bytes.size() == 20);
  float magic;
  int32_t w, h;
  float uv[2];
  std::memcpy(&magic, bytes.data(), 4);
  std::memcpy(&w, bytes.data() + 4, 4);
  std::memcpy(&h, bytes.data() + 8, 4);
  std::memcpy(uv, bytes.data() + 12, 8);
  CHECK(magic == 202021.25f);
  CHECK(w == 1);
  CHECK(h == 1);
  CHECK(uv[0] == 0.0f);
  CHECK(uv[1] == 0.0f);
}

TEST_CASE(".flo: bitwise round trip on random fields (large and negative values)") {
  TempFile tf("io_rt.flo");
  TempFile tf2("io_rt2.flo");
  Rng rng(601);
  FlowFile f;
  f.w = 9;
  f.h = 7;
  f.flow = rand_uniform<float>(Shape{2, 7, 9}, rng, -700.0f, 700.0f);
  write_flo(tf.path, f);
  auto back = read_flo(tf.path);
  CHECK(back.w == 9);
  CHECK(back.h == 7);
  CHECK(std::memcmp(back.flow.data(), f.flow.data(), sizeof(float) * size_t(f.flow.size())) == 0);
  write_flo(tf2.path, back);
  CHECK(slurp(tf.path) == slurp(tf2.path));
}

TEST_CASE(".flo: corrupt files are rejected") {
  TempFile tf("io_bad.flo");
  // header says 3x2 but only 10 floats follow (12 needed)
  std::vector<uint8_t> bytes(12 + 10 * 4, 0);
  const float magic = 202021.25f;
  const int32_t w = 3, h = 2;
  std::memcpy(bytes.data(), &magic, 4);
  std::memcpy(bytes.data() + 4, &w, 4);
  std::memcpy(bytes.data() + 8, &h, 4);
  spit(tf.path, bytes);
  CHECK_THROWS_WITH_AS(read_flo(tf.path), doctest::Contains("truncated"), std::runtime_error);

  // bad sentinel
  std::vector<uint8_t> bad(16, 0);
  spit(tf.path, bad);
  CHECK_THROWS_WITH_AS(read_flo(tf.path), doctest::Contains("sentinel"), std::runtime_error);

  // trailing garbage
  std::vector<uint8_t> extra(12 + 12 * 4 + 3, 0);
  std::memcpy(extra.data(), &magic, 4);
  std::memcpy(extra.data() + 4, &w, 4);
  std::memcpy(extra.data() + 8, &h, 4);
  spit(tf.path, extra);
  CHECK_THROWS(read_flo(tf.path));
}

TEST_CASE("KITTI png: encoding identities") {
  TempFile tf("io_k.png");
  FlowFile f;
  f.w = 2;
  f.h = 1;
  f.flow = Tensor(Shape{2, 1, 2}, 0.0f);
  f.flow.at(0, 0, 1) = 1.0f;  // u = 1 at the second pixel
  f.valid = {1, 1};
  write_kitti_png(tf.path, f);
  auto img = read_png(tf.path);
  REQUIRE(img.bit_depth == 16);
  REQUIRE(img.channels == 3);
  CHECK(img.px[0] == 32768);  // u = 0
  CHECK(img.px[1] == 32768);  // v = 0
  CHECK(img.px[2] == 1);
  CHECK(img.px[3] == 32832);  // u = 1 -> 64 + 2^15
}

TEST_CASE("KITTI png: round trip within 1/128 px, valid plane preserved, range errors") {
  TempFile tf("io_k2.png");
  Rng rng(603);
  FlowFile f;
  f.w = 11;
  f.h = 6;
  f.flow = rand_uniform<float>(Shape{2, 6, 11}, rng, -500.0f, 500.0f);
  f.valid.resize(66);
  for (auto& v : f.valid) v = rng.uniform() < 0.8 ? 1 : 0;
  write_kitti_png(tf.path, f);
  auto back = read_kitti_png(tf.path);
  CHECK(back.valid == f.valid);
  for (int64_t i = 0; i < f.flow.size(); ++i)
    CHECK(std::fabs(back.flow.data()[i] - f.flow.data()[i]) <= 1.0f / 128.0f);

  FlowFile big = f;
  big.flow.at(0, 0, 0) = 600.0f;  // beyond the encodable range
  CHECK_THROWS_WITH_AS(write_kitti_png(tf.path, big), doctest::Contains("range"),
                       std::invalid_argument);

  // an 8-bit image is not a KITTI flow file
  TempFile tf8("io_k8.png");
  ImageU16 small;
  small.w = 2;
  small.h = 2;
  small.channels = 3;
  small.bit_depth = 8;
  small.px.assign(12, 10);
  write_png(tf8.path, small);
  CHECK_THROWS(read_kitti_png(tf8.path));
}

TEST_CASE("png subset: 8- and 16-bit round trips") {
  Rng rng(605);
  for (int depth : {8, 16})
    for (int ch : {1, 3}) {
      TempFile tf("io_png_rt.png");
      ImageU16 img;
      img.w = 13;
      img.h = 5;
      img.channels = ch;
      img.bit_depth = depth;
      img.px.resize(size_t(13) * 5 * ch);
      for (auto& v : img.px)
        v = uint16_t(rng.uniform() * (depth == 8 ? 255 : 65535));
      write_png(tf.path, img);
      auto back = read_png(tf.path);
      CHECK(back.w == img.w);
      CHECK(back.h == img.h);
      CHECK(back.channels == ch);
      CHECK(back.bit_depth == depth);
      CHECK(back.px == img.px);
    }
}

TEST_CASE("png subset: all five scanline filters decode correctly") {
  // 4x4 RGB8 with known pixel values, rows filtered with types 0..4
  const int w = 4, h = 4, bpp = 3;
  std::vector<uint8_t> pixels(size_t(w) * h * bpp);
  for (size_t i = 0; i < pixels.size(); ++i) pixels[i] = uint8_t((i * 37 + 11) & 0xff);

  auto paeth = [](int a, int b, int c) {
    const int p = a + b - c, pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
  };
  std::vector<uint8_t> raw;
  for (int y = 0; y < h; ++y) {
    const int filter = y % 5;
    raw.push_back(uint8_t(filter));
    for (int x = 0; x < w * bpp; ++x) {
      const int cur = pixels[size_t(y) * w * bpp + x];
      const int a = x >= bpp ? pixels[size_t(y) * w * bpp + x - bpp] : 0;
      const int b = y > 0 ? pixels[size_t(y - 1) * w * bpp + x] : 0;
      const int c = (y > 0 && x >= bpp) ? pixels[size_t(y - 1) * w * bpp + x - bpp] : 0;
      int enc = cur;
      switch (filter) {
        case 0: break;
        case 1: enc = cur - a; break;
        case 2: enc = cur - b; break;
        case 3: enc = cur - (a + b) / 2; break;
        case 4: enc = cur - paeth(a, b, c); break;
      }
      raw.push_back(uint8_t(enc & 0xff));
    }
  }
  auto img = decode_png(craft_png(w, h, 8, 2, raw));
  REQUIRE(img.px.size() == pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) CHECK(img.px[i] == pixels[i]);
}

TEST_CASE("png subset: unsupported features and corruption are explicit errors") {
  std::vector<uint8_t> raw(size_t(2) * (1 + 2 * 3), 0);
  auto interlaced = craft_png(2, 2, 8, 2, raw, /*interlace=*/1);
  CHECK_THROWS_WITH_AS(decode_png(interlaced), doctest::Contains("interlacing"),
                       std::runtime_error);

  auto palette = craft_png(2, 2, 8, 3, raw);
  CHECK_THROWS(decode_png(palette));

  auto ok = craft_png(2, 2, 8, 2, raw);
  ok[ok.size() / 2] ^= 0x40;  // flip a bit inside IDAT
  CHECK_THROWS(decode_png(ok));
}

TEST_CASE("flow_to_color: white at zero, antisymmetric hues, golden hash") {
  Tensor zero(Shape{2, 4, 4}, 0.0f);
  auto img = flow_to_color(zero, 1.0f);
  for (uint16_t v : img.px) CHECK(v == 255);

  Tensor lr(Shape{2, 1, 2}, 0.0f);
  lr.at(0, 0, 0) = 3.0f;
  lr.at(0, 0, 1) = -3.0f;
  auto two = flow_to_color(lr, 3.0f);
  // opposite directions saturate different primaries
  CHECK(two.px[0] != two.px[3]);
  CHECK(int(two.px[2]) + int(two.px[5]) > 0);

  // deterministic golden rendering of a fixed swirl
  Tensor swirl(Shape{2, 16, 16});
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      swirl.at(0, i, j) = float(j - 8);
      swirl.at(1, i, j) = float(8 - i);
    }
  auto gold = flow_to_color(swirl);
  const uint64_t hash = fnv1a(gold.px);
  INFO("hash = " << hash);
  CHECK(hash == 3892362278462381220ull);  // frozen from the first rendering
}
