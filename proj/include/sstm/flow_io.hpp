#pragma once

// Flow file interchange: Middlebury .flo (bit-exact), KITTI-style 16-bit PNG
// (quantized to 1/64 px), and the 55-bin color-wheel visualization.

#include <cstdint>
#include <string>
#include <vector>

#include "sstm/png_io.hpp"
#include "sstm/tensor.hpp"

namespace sstm {

struct FlowFile {
  int w = 0, h = 0;
  Tensor flow;                 // (2,H,W)
  std::vector<uint8_t> valid;  // h*w, empty means all valid
};

FlowFile read_flo(const std::string& path);
void write_flo(const std::string& path, const FlowFile& f);

// u = (ch1 - 2^15)/64, v = (ch2 - 2^15)/64, valid = ch3 > 0. Values beyond
// the encodable range (about +-512 px) raise rather than clamp.
FlowFile read_kitti_png(const std::string& path);
void write_kitti_png(const std::string& path, const FlowFile& f);

// Direction -> hue, magnitude -> saturation on the 55-bin wheel; max_rad <= 0
// picks the field's own maximum. Returns an 8-bit RGB image.
ImageU16 flow_to_color(const Tensor& flow, float max_rad = 0.0f);

}  // namespace sstm
