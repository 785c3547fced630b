#pragma once

#include <stdexcept>

#include "sstm/tensor.hpp"

namespace sstm {

enum class FlowRes { Eighth, Full };

// Two flow fields estimated in parallel: f1 between frames 1-2 and f2
// between frames 2-3, each (2,H,W) in pixels/frame at the tagged resolution.
template <typename S>
struct FlowPairT {
  TensorT<S> f1, f2;
  FlowRes res = FlowRes::Eighth;
};

using FlowPair = FlowPairT<float>;

template <typename S>
void require_res(const FlowPairT<S>& fp, FlowRes want, const char* who) {
  if (fp.res != want)
    throw std::invalid_argument(std::string(who) + ": flow pair has the wrong resolution tag");
}

}  // namespace sstm
