#pragma once

// Named parameter registry. Iteration order is insertion order and fully
// determined by (config, seed), which makes checkpoints and parameter counts
// reproducible. Kind tags back the structural audit: every convolution in
// the network is a rank-3 (out,in,k) kernel applied along a single axis, so
// the registry can prove no dense 2D/3D kernels exist.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sstm/rng.hpp"
#include "sstm/tensor.hpp"

namespace sstm {

enum class ParamKind { ConvX, ConvY, ConvT, Bias, Matrix, Scalar };

inline const char* param_kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::ConvX: return "conv_x";
    case ParamKind::ConvY: return "conv_y";
    case ParamKind::ConvT: return "conv_t";
    case ParamKind::Bias: return "bias";
    case ParamKind::Matrix: return "matrix";
    case ParamKind::Scalar: return "scalar";
  }
  return "?";
}

template <typename S>
class ParamRegistryT {
 public:
  struct Entry {
    std::string name;
    TensorT<S> tensor;
    ParamKind kind;
  };

  // Fan-in-scaled uniform init (bound sqrt(6/fan_in), variance-preserving
  // under rectification; these nets are separable, so every logical filter
  // is two to three convs deep) for kernels/matrices, zeros for biases and
  // scalars.
  TensorT<S> add(const std::string& name, Shape shape, ParamKind kind, Rng& rng) {
    if (index_.count(name)) throw std::invalid_argument("registry: duplicate parameter " + name);
    TensorT<S> t(shape);
    switch (kind) {
      case ParamKind::ConvX:
      case ParamKind::ConvY:
      case ParamKind::ConvT: {
        if (shape.size() != 3) throw std::invalid_argument("registry: conv kernel must be rank 3");
        const double bound = std::sqrt(6.0 / (double(shape[1]) * shape[2]));
        for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = S(rng.uniform(-bound, bound));
        break;
      }
      case ParamKind::Matrix: {
        if (shape.size() != 2) throw std::invalid_argument("registry: matrix must be rank 2");
        const double bound = std::sqrt(6.0 / double(shape[0]));
        for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = S(rng.uniform(-bound, bound));
        break;
      }
      case ParamKind::Bias:
      case ParamKind::Scalar:
        break;  // zero
    }
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, t, kind});
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const TensorT<S>& find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("registry: unknown parameter " + name);
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

using ParamRegistry = ParamRegistryT<float>;

// True when no parameter tagged as a convolution kernel is anything but a
// rank-3 single-axis kernel.
template <typename S>
bool audit_only_1d_kernels(const ParamRegistryT<S>& reg) {
  for (const auto& e : reg.entries()) {
    switch (e.kind) {
      case ParamKind::ConvX:
      case ParamKind::ConvY:
      case ParamKind::ConvT:
        if (e.tensor.rank() != 3) return false;
        break;
      default:
        break;
    }
  }
  return true;
}

}  // namespace sstm
