#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "sstm/model.hpp"

// Checkpoint layout (all integers little-endian):
//   magic   8 bytes "SSTMCKPT"
//   u32     version (1)
//   u32     config byte length, then that many UTF-8 bytes (key=value lines)
//   per tensor, in registry order:
//     u32   name length, name bytes
//     u32   rank
//     u64   dims[rank]
//     f32   raw values (row-major)
//   u64     tensor record count
//   u32     CRC-32 of every preceding byte

namespace sstm {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'T', 'M', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  const std::vector<uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<uint8_t> buf) : buf_(std::move(buf)) {}
  void bytes(void* p, size_t n) {
    if (pos_ + n > buf_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  uint32_t u32() {
    uint32_t v;
    bytes(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    bytes(&v, 8);
    return v;
  }
  size_t pos() const { return pos_; }
  size_t size() const { return buf_.size(); }
  const uint8_t* data() const { return buf_.data(); }

 private:
  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ModelWeights& w, const ModelConfig& cfg, const std::string& path) {
  Writer wr;
  wr.bytes(kMagic, 8);
  wr.u32(kVersion);
  const std::string kv = cfg.to_kv();
  wr.u32(static_cast<uint32_t>(kv.size()));
  wr.bytes(kv.data(), kv.size());
  for (const auto& e : w.reg.entries()) {
    wr.u32(static_cast<uint32_t>(e.name.size()));
    wr.bytes(e.name.data(), e.name.size());
    wr.u32(static_cast<uint32_t>(e.tensor.rank()));
    for (int d = 0; d < e.tensor.rank(); ++d) wr.u64(static_cast<uint64_t>(e.tensor.dim(d)));
    wr.bytes(e.tensor.data(), sizeof(float) * static_cast<size_t>(e.tensor.size()));
  }
  wr.u64(static_cast<uint64_t>(w.reg.entries().size()));
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, wr.buffer().data(), static_cast<uInt>(wr.buffer().size())));
  Writer full = wr;
  full.u32(crc);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(reinterpret_cast<const char*>(full.buffer().data()),
           static_cast<std::streamsize>(full.buffer().size()));
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

std::pair<ModelWeights, ModelConfig> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 + 4 + 4 + 8 + 4) throw std::runtime_error("checkpoint: truncated file");

  // CRC covers everything but the final 4 bytes.
  uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)));
  if (crc != stored_crc) throw std::runtime_error("checkpoint: CRC mismatch (corrupt file)");

  Reader rd(std::move(buf));
  char magic[8];
  rd.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic");
  const uint32_t version = rd.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const uint32_t kv_len = rd.u32();
  std::string kv(kv_len, '\0');
  rd.bytes(kv.data(), kv_len);
  ModelConfig cfg = ModelConfig::from_kv(kv);

  struct Record {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Record> records;
  // Records end 12 bytes before the file end (count + crc).
  const size_t records_end = rd.size() - 12;
  while (rd.pos() < records_end) {
    Record r;
    const uint32_t name_len = rd.u32();
    r.name.resize(name_len);
    rd.bytes(r.name.data(), name_len);
    const uint32_t rank = rd.u32();
    if (rank > 8) throw std::runtime_error("checkpoint: implausible tensor rank");
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const uint64_t e = rd.u64();
      if (e == 0 || e > (1u << 30)) throw std::runtime_error("checkpoint: implausible extent");
      r.shape.push_back(static_cast<int>(e));
      numel *= static_cast<int64_t>(e);
    }
    r.data.resize(static_cast<size_t>(numel));
    rd.bytes(r.data.data(), sizeof(float) * static_cast<size_t>(numel));
    records.push_back(std::move(r));
  }
  const uint64_t count = rd.u64();
  if (count != records.size())
    throw std::runtime_error("checkpoint: record count mismatch");

  ModelWeights w = init_weights(cfg, cfg.seed);
  if (w.reg.entries().size() != records.size())
    throw std::runtime_error("checkpoint: parameter set does not match config");
  for (size_t i = 0; i < records.size(); ++i) {
    for (size_t j = i + 1; j < records.size(); ++j)
      if (records[i].name == records[j].name)
        throw std::runtime_error("checkpoint: duplicate tensor name " + records[i].name);
  }
  for (const auto& r : records) {
    if (!w.reg.has(r.name)) throw std::runtime_error("checkpoint: unexpected tensor " + r.name);
    auto t = w.reg.find(r.name);
    if (t.shape() != r.shape) throw std::runtime_error("checkpoint: shape mismatch for " + r.name);
    std::copy(r.data.begin(), r.data.end(), const_cast<Tensor&>(t).data());
  }
  return {std::move(w), cfg};
}

}  // namespace sstm
