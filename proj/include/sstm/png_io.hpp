#pragma once

// Minimal PNG subset: grayscale or RGB, 8- or 16-bit, no interlacing, no
// palette or alpha. The reader handles all five scanline filters; the writer
// emits unfiltered rows. Unsupported PNG features are explicit errors.

#include <cstdint>
#include <string>
#include <vector>

namespace sstm {

struct ImageU16 {
  int w = 0, h = 0;
  int channels = 0;   // 1 or 3
  int bit_depth = 8;  // 8 or 16
  std::vector<uint16_t> px;  // row-major, interleaved channels

  uint16_t max_value() const { return bit_depth == 8 ? 255 : 65535; }
};

ImageU16 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU16& img);

// In-memory variants (used by tests to craft files).
ImageU16 decode_png(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> encode_png(const ImageU16& img);

}  // namespace sstm
