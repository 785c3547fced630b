#include "sstm/flow_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sstm {

namespace {

constexpr float kFloMagic = 202021.25f;

void check_flow(const FlowFile& f, const char* who) {
  if (f.flow.rank() != 3 || f.flow.dim(0) != 2 || f.flow.dim(1) != f.h || f.flow.dim(2) != f.w)
    throw std::invalid_argument(std::string(who) + ": flow tensor must be (2,h,w)");
  if (!f.valid.empty() && f.valid.size() != size_t(f.h) * f.w)
    throw std::invalid_argument(std::string(who) + ": valid plane size mismatch");
}

}  // namespace

void write_flo(const std::string& path, const FlowFile& f) {
  check_flow(f, "write_flo");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_flo: cannot open " + path);
  os.write(reinterpret_cast<const char*>(&kFloMagic), 4);
  const int32_t w = f.w, h = f.h;
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  const int64_t npix = int64_t(f.h) * f.w;
  for (int64_t p = 0; p < npix; ++p) {
    const float uv[2] = {f.flow.data()[p], f.flow.data()[npix + p]};
    os.write(reinterpret_cast<const char*>(uv), 8);
  }
  if (!os) throw std::runtime_error("write_flo: write failed " + path);
}

FlowFile read_flo(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_flo: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw std::runtime_error("read_flo: truncated header");
  float magic;
  std::memcpy(&magic, bytes.data(), 4);
  if (magic != kFloMagic) throw std::runtime_error("read_flo: bad sentinel");
  int32_t w, h;
  std::memcpy(&w, bytes.data() + 4, 4);
  std::memcpy(&h, bytes.data() + 8, 4);
  if (w <= 0 || h <= 0) throw std::runtime_error("read_flo: bad dimensions");
  const size_t want = 12 + size_t(w) * size_t(h) * 8;
  if (bytes.size() < want) throw std::runtime_error("read_flo: truncated data");
  if (bytes.size() > want) throw std::runtime_error("read_flo: size does not match header");
  FlowFile f;
  f.w = w;
  f.h = h;
  f.flow = Tensor(Shape{2, h, w});
  const int64_t npix = int64_t(h) * w;
  for (int64_t p = 0; p < npix; ++p) {
    float uv[2];
    std::memcpy(uv, bytes.data() + 12 + size_t(p) * 8, 8);
    f.flow.data()[p] = uv[0];
    f.flow.data()[npix + p] = uv[1];
  }
  return f;
}

void write_kitti_png(const std::string& path, const FlowFile& f) {
  check_flow(f, "write_kitti_png");
  ImageU16 img;
  img.w = f.w;
  img.h = f.h;
  img.channels = 3;
  img.bit_depth = 16;
  img.px.resize(size_t(f.h) * f.w * 3);
  const int64_t npix = int64_t(f.h) * f.w;
  for (int64_t p = 0; p < npix; ++p) {
    const float u = f.flow.data()[p], v = f.flow.data()[npix + p];
    const long eu = std::lround(double(u) * 64.0) + 32768;
    const long ev = std::lround(double(v) * 64.0) + 32768;
    if (eu < 0 || eu > 65535 || ev < 0 || ev > 65535)
      throw std::invalid_argument("write_kitti_png: flow exceeds the encodable +-512 px range");
    img.px[size_t(p) * 3 + 0] = uint16_t(eu);
    img.px[size_t(p) * 3 + 1] = uint16_t(ev);
    img.px[size_t(p) * 3 + 2] = f.valid.empty() ? 1 : (f.valid[size_t(p)] ? 1 : 0);
  }
  write_png(path, img);
}

FlowFile read_kitti_png(const std::string& path) {
  const ImageU16 img = read_png(path);
  if (img.channels != 3 || img.bit_depth != 16)
    throw std::runtime_error("read_kitti_png: expected a 16-bit 3-channel image");
  FlowFile f;
  f.w = img.w;
  f.h = img.h;
  f.flow = Tensor(Shape{2, img.h, img.w});
  f.valid.resize(size_t(img.h) * img.w);
  const int64_t npix = int64_t(img.h) * img.w;
  for (int64_t p = 0; p < npix; ++p) {
    f.flow.data()[p] = (float(img.px[size_t(p) * 3 + 0]) - 32768.0f) / 64.0f;
    f.flow.data()[npix + p] = (float(img.px[size_t(p) * 3 + 1]) - 32768.0f) / 64.0f;
    f.valid[size_t(p)] = img.px[size_t(p) * 3 + 2] > 0 ? 1 : 0;
  }
  return f;
}

namespace {

// 55-bin wheel: RY=15, YG=6, GC=4, CB=11, BM=13, MR=6.
std::vector<std::array<float, 3>> make_wheel() {
  const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::vector<std::array<float, 3>> wheel;
  auto seg = [&](int n, int from, int to, bool up) {
    for (int i = 0; i < n; ++i) {
      std::array<float, 3> c = {0, 0, 0};
      c[size_t(from)] = up ? 255.0f : 255.0f - 255.0f * float(i) / float(n);
      c[size_t(to)] = up ? 255.0f * float(i) / float(n) : 255.0f;
      wheel.push_back(c);
    }
  };
  seg(RY, 0, 1, true);   // red -> yellow
  seg(YG, 1, 0, false);  // yellow -> green (red fades)
  seg(GC, 1, 2, true);   // green -> cyan
  seg(CB, 2, 1, false);  // cyan -> blue
  seg(BM, 2, 0, true);   // blue -> magenta
  seg(MR, 0, 2, false);  // magenta -> red
  return wheel;
}

}  // namespace

ImageU16 flow_to_color(const Tensor& flow, float max_rad) {
  if (flow.rank() != 3 || flow.dim(0) != 2)
    throw std::invalid_argument("flow_to_color: flow must be (2,H,W)");
  if (!all_finite(flow)) throw std::invalid_argument("flow_to_color: non-finite flow");
  static const auto wheel = make_wheel();
  const int ncols = int(wheel.size());
  const int h = flow.dim(1), w = flow.dim(2);
  const int64_t npix = int64_t(h) * w;

  float rad_max = max_rad;
  if (rad_max <= 0.0f) {
    for (int64_t p = 0; p < npix; ++p) {
      const float u = flow.data()[p], v = flow.data()[npix + p];
      rad_max = std::max(rad_max, std::sqrt(u * u + v * v));
    }
  }
  rad_max = std::max(rad_max, 1e-3f);

  ImageU16 img;
  img.w = w;
  img.h = h;
  img.channels = 3;
  img.bit_depth = 8;
  img.px.resize(size_t(npix) * 3);
  for (int64_t p = 0; p < npix; ++p) {
    const float u = flow.data()[p] / rad_max, v = flow.data()[npix + p] / rad_max;
    const float rad = std::sqrt(u * u + v * v);
    const float a = std::atan2(-v, -u) / 3.14159265358979f;
    const float fk = (a + 1.0f) / 2.0f * float(ncols - 1);
    int k0 = int(std::floor(fk));
    if (k0 >= ncols) k0 = ncols - 1;
    const int k1 = (k0 + 1) % ncols;
    const float frac = fk - float(k0);
    for (int c = 0; c < 3; ++c) {
      float col = ((1.0f - frac) * wheel[size_t(k0)][size_t(c)] +
                   frac * wheel[size_t(k1)][size_t(c)]) /
                  255.0f;
      if (rad <= 1.0f)
        col = 1.0f - rad * (1.0f - col);
      else
        col *= 0.75f;
      img.px[size_t(p) * 3 + size_t(c)] = uint16_t(std::floor(255.0f * col + 0.5f));
    }
  }
  return img;
}

}  // namespace sstm
