#include "sstm/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sstm {

namespace {

const uint8_t kSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | p[3];
}

void put_be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(uint8_t(x >> 24));
  v.push_back(uint8_t(x >> 16));
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x));
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data, size_t n) {
  put_be32(out, uint32_t(n));
  const size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  if (n) out.insert(out.end(), data, data + n);
  const uint32_t crc =
      uint32_t(crc32(0L, out.data() + type_at, uInt(4 + n)));
  put_be32(out, crc);
}

}  // namespace

ImageU16 decode_png(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSig, 8) != 0)
    throw std::runtime_error("png: bad signature");
  size_t pos = 8;
  ImageU16 img;
  bool have_ihdr = false, have_iend = false;
  std::vector<uint8_t> idat;
  while (pos + 12 <= bytes.size()) {
    const uint32_t len = be32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) throw std::runtime_error("png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const uint8_t* data = bytes.data() + pos + 8;
    const uint32_t want_crc = be32(bytes.data() + pos + 8 + len);
    const uint32_t got_crc = uint32_t(crc32(0L, bytes.data() + pos + 4, uInt(4 + len)));
    if (want_crc != got_crc) throw std::runtime_error("png: chunk CRC mismatch");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::runtime_error("png: bad IHDR");
      img.w = int(be32(data));
      img.h = int(be32(data + 4));
      img.bit_depth = data[8];
      const int color = data[9];
      if (data[10] != 0 || data[11] != 0) throw std::runtime_error("png: unsupported compression/filter");
      if (data[12] != 0) throw std::runtime_error("png: interlacing not supported");
      if (img.bit_depth != 8 && img.bit_depth != 16)
        throw std::runtime_error("png: only 8/16-bit depth supported");
      if (color == 0) img.channels = 1;
      else if (color == 2) img.channels = 3;
      else throw std::runtime_error("png: only grayscale and RGB supported");
      if (img.w <= 0 || img.h <= 0) throw std::runtime_error("png: bad dimensions");
      have_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      have_iend = true;
      break;
    }
    // ancillary chunks are skipped
    pos += 12 + len;
  }
  if (!have_ihdr || !have_iend) throw std::runtime_error("png: missing IHDR or IEND");

  const int bytes_per_sample = img.bit_depth / 8;
  const int bpp = img.channels * bytes_per_sample;
  const size_t stride = size_t(img.w) * bpp;
  std::vector<uint8_t> raw(size_t(img.h) * (stride + 1));
  uLongf raw_len = uLongf(raw.size());
  const int rc = uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size()));
  if (rc != Z_OK || raw_len != raw.size()) throw std::runtime_error("png: inflate failed");

  // unfilter in place into a separate buffer
  std::vector<uint8_t> out(size_t(img.h) * stride);
  for (int y = 0; y < img.h; ++y) {
    const uint8_t filter = raw[size_t(y) * (stride + 1)];
    const uint8_t* src = raw.data() + size_t(y) * (stride + 1) + 1;
    uint8_t* dst = out.data() + size_t(y) * stride;
    const uint8_t* up = y > 0 ? out.data() + size_t(y - 1) * stride : nullptr;
    for (size_t x = 0; x < stride; ++x) {
      const int a = x >= size_t(bpp) ? dst[x - size_t(bpp)] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= size_t(bpp)) ? up[x - size_t(bpp)] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw std::runtime_error("png: unknown filter type");
      }
      dst[x] = uint8_t(v);
    }
  }

  img.px.resize(size_t(img.h) * img.w * img.channels);
  for (size_t i = 0; i < img.px.size(); ++i) {
    if (bytes_per_sample == 1)
      img.px[i] = out[i];
    else
      img.px[i] = uint16_t((uint16_t(out[2 * i]) << 8) | out[2 * i + 1]);  // big-endian samples
  }
  return img;
}

std::vector<uint8_t> encode_png(const ImageU16& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("png: only 1 or 3 channels supported");
  if (img.bit_depth != 8 && img.bit_depth != 16)
    throw std::invalid_argument("png: only 8/16-bit depth supported");
  if (img.px.size() != size_t(img.w) * img.h * img.channels)
    throw std::invalid_argument("png: pixel buffer size mismatch");
  for (uint16_t v : img.px)
    if (img.bit_depth == 8 && v > 255) throw std::invalid_argument("png: 8-bit sample out of range");

  const int bytes_per_sample = img.bit_depth / 8;
  const size_t stride = size_t(img.w) * img.channels * bytes_per_sample;
  std::vector<uint8_t> raw(size_t(img.h) * (stride + 1), 0);
  for (int y = 0; y < img.h; ++y) {
    uint8_t* dst = raw.data() + size_t(y) * (stride + 1);
    *dst++ = 0;  // filter: none
    for (int x = 0; x < img.w * img.channels; ++x) {
      const uint16_t v = img.px[size_t(y) * img.w * img.channels + x];
      if (bytes_per_sample == 1) {
        *dst++ = uint8_t(v);
      } else {
        *dst++ = uint8_t(v >> 8);
        *dst++ = uint8_t(v);
      }
    }
  }

  uLongf comp_cap = compressBound(uLong(raw.size()));
  std::vector<uint8_t> comp(comp_cap);
  if (compress2(comp.data(), &comp_cap, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  comp.resize(comp_cap);

  std::vector<uint8_t> out(kSig, kSig + 8);
  uint8_t ihdr[13];
  ihdr[0] = uint8_t(uint32_t(img.w) >> 24);
  ihdr[1] = uint8_t(uint32_t(img.w) >> 16);
  ihdr[2] = uint8_t(uint32_t(img.w) >> 8);
  ihdr[3] = uint8_t(img.w);
  ihdr[4] = uint8_t(uint32_t(img.h) >> 24);
  ihdr[5] = uint8_t(uint32_t(img.h) >> 16);
  ihdr[6] = uint8_t(uint32_t(img.h) >> 8);
  ihdr[7] = uint8_t(img.h);
  ihdr[8] = uint8_t(img.bit_depth);
  ihdr[9] = img.channels == 1 ? 0 : 2;
  ihdr[10] = 0;
  ihdr[11] = 0;
  ihdr[12] = 0;
  append_chunk(out, "IHDR", ihdr, 13);
  append_chunk(out, "IDAT", comp.data(), comp.size());
  append_chunk(out, "IEND", nullptr, 0);
  return out;
}

ImageU16 read_png(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("png: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                             std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

void write_png(const std::string& path, const ImageU16& img) {
  const auto bytes = encode_png(img);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("png: cannot open for writing " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw std::runtime_error("png: write failed " + path);
}

}  // namespace sstm
