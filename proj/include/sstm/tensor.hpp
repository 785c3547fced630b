#pragma once

// Dense float tensor with reverse-mode autodiff.
//
// TensorT<S> is a cheap handle onto shared storage (values + gradient
// accumulator). Operators are free functions; when a TapeT<S> is active
// (TapeT<S>::Scope) and an input requires grad, the op records a backward
// closure. backward(root) replays the tape in reverse. Gradients on leaves
// accumulate across backward calls until zero_grad(); gradients of
// intermediates are reset at the start of every backward pass.
//
// Production code runs S = float; the gradient-check harness re-executes
// graphs with S = double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sstm/rng.hpp"

namespace sstm {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + ")";
}

// Convolution / sampling axes. X is the innermost dimension, Y the next,
// T the one before that. Dimension 0 is always channels.
enum class Axis { X, Y, T };

template <typename S>
struct TensorStorage {
  std::vector<S> val;
  std::vector<S> grad;  // empty until first touched
  bool requires_grad = false;
};

template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape, S fill = S(0))
      : shape_(std::move(shape)), st_(std::make_shared<TensorStorage<S>>()) {
    st_->val.assign(shape_numel(shape_), fill);
  }

  TensorT(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), st_(std::make_shared<TensorStorage<S>>()) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape_))
      throw std::invalid_argument("tensor: data length does not match shape " + shape_str(shape_));
    st_->val = std::move(data);
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape), S(0)); }
  static TensorT full(Shape shape, S v) { return TensorT(std::move(shape), v); }
  static TensorT scalar(S v) { return TensorT(Shape{1}, std::vector<S>{v}); }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return st_ ? static_cast<int64_t>(st_->val.size()) : 0; }

  S* data() { return st_->val.data(); }
  const S* data() const { return st_->val.data(); }
  std::vector<S>& values() { return st_->val; }
  const std::vector<S>& values() const { return st_->val; }

  S item() const {
    if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return st_->val[0];
  }

  template <typename... I>
  S& at(I... idx) {
    return st_->val[linear(idx...)];
  }
  template <typename... I>
  const S& at(I... idx) const {
    return st_->val[linear(idx...)];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  TensorT& set_requires_grad(bool f = true) {
    st_->requires_grad = f;
    return *this;
  }

  // Gradient accumulator, allocated (zeroed) on first use.
  std::vector<S>& grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->val.size(), S(0));
    return st_->grad;
  }
  const std::vector<S>& grad_ref() const { return st_->grad; }  // may be empty
  bool has_grad() const { return st_ && !st_->grad.empty(); }
  void zero_grad() {
    if (st_ && !st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }
  TensorT grad_tensor() const {
    TensorT g(shape_);
    if (!st_->grad.empty()) g.st_->val = st_->grad;
    return g;
  }

  // Deep copy of values; no grad, no requires_grad.
  TensorT clone() const {
    TensorT c(shape_);
    c.st_->val = st_->val;
    return c;
  }

  const void* key() const { return st_.get(); }
  std::shared_ptr<TensorStorage<S>> storage() const { return st_; }

 private:
  template <typename... I>
  int64_t linear(I... idx) const {
    const int n = sizeof...(idx);
    if (n != rank()) throw std::invalid_argument("at(): index rank mismatch");
    int64_t ids[sizeof...(idx)] = {static_cast<int64_t>(idx)...};
    int64_t off = 0;
    for (int i = 0; i < n; ++i) {
      if (ids[i] < 0 || ids[i] >= shape_[static_cast<size_t>(i)])
        throw std::out_of_range("at(): index out of range");
      off = off * shape_[static_cast<size_t>(i)] + ids[i];
    }
    return off;
  }

  Shape shape_;
  std::shared_ptr<TensorStorage<S>> st_;
};

using Tensor = TensorT<float>;

// ---------------------------------------------------------------------------
// Tape

template <typename S>
class TapeT {
 public:
  using BackFn = std::function<void()>;

  void record(BackFn fn, const TensorT<S>& out) {
    ops_.push_back(std::move(fn));
    outs_.emplace(out.key(), out.storage());
  }

  bool produced(const TensorT<S>& t) const { return outs_.count(t.key()) != 0; }

  // Seeds d(root)/d(root) = 1 and replays all records in reverse order.
  // Gradients of recorded intermediates are cleared first so repeated
  // backward calls accumulate only into leaves.
  void backward(const TensorT<S>& root) {
    if (root.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!produced(root)) throw std::invalid_argument("backward: root was not produced on this tape");
    for (auto& [k, st] : outs_) {
      (void)k;
      if (!st->grad.empty()) std::fill(st->grad.begin(), st->grad.end(), S(0));
    }
    auto st = root.storage();
    if (st->grad.empty()) st->grad.assign(1, S(0));
    st->grad[0] += S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() {
    ops_.clear();
    outs_.clear();
  }
  size_t num_ops() const { return ops_.size(); }

  static TapeT*& current() {
    static thread_local TapeT* cur = nullptr;
    return cur;
  }

  struct Scope {
    explicit Scope(TapeT& t) : prev_(current()) { current() = &t; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    TapeT* prev_;
  };

 private:
  std::vector<BackFn> ops_;
  std::unordered_map<const void*, std::shared_ptr<TensorStorage<S>>> outs_;
};

using Tape = TapeT<float>;

namespace detail {

template <typename S>
std::vector<S>& gbuf(const TensorT<S>& t) {
  return const_cast<TensorT<S>&>(t).grad();
}

template <typename S>
bool maybe_record(const TensorT<S>& out, std::initializer_list<bool> needs,
                  std::function<void()> fn) {
  auto* tp = TapeT<S>::current();
  if (!tp) return false;
  bool any = false;
  for (bool b : needs) any = any || b;
  if (!any) return false;
  const_cast<TensorT<S>&>(out).set_requires_grad(true);
  tp->record(std::move(fn), out);
  return true;
}

// Output-grad fetch: empty means "never touched", i.e. zero.
template <typename S>
const std::vector<S>* out_grad(const TensorT<S>& t) {
  const auto& g = t.grad_ref();
  return g.empty() ? nullptr : &g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <typename S, typename FwdF, typename BwdF>
TensorT<S> unary_op(const TensorT<S>& x, FwdF f, BwdF dfdx_from_xy) {
  TensorT<S> out(x.shape());
  const S* xp = x.data();
  S* op = out.data();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) op[i] = f(xp[i]);
  maybe_record<S>(out, {x.requires_grad()}, [x, out, dfdx_from_xy]() {
    const auto* go = out_grad(out);
    if (!go) return;
    auto& gx = gbuf(x);
    const S* xp2 = x.data();
    const S* yp = out.data();
    for (int64_t i = 0; i < x.size(); ++i) gx[i] += (*go)[i] * dfdx_from_xy(xp2[i], yp[i]);
  });
  return out;
}

}  // namespace detail

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
TensorT<S> tanh(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
TensorT<S> abs(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::fabs(v); },
      [](S v, S) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

// Subgradient 0 at the origin so exact zeros stay quiet.
template <typename S>
TensorT<S> sqrt(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return std::sqrt(v); },
      [](S, S y) { return y > S(0) ? S(0.5) / y : S(0); });
}

template <typename S>
TensorT<S> neg(const TensorT<S>& x) {
  return detail::unary_op(
      x, [](S v) { return -v; }, [](S, S) { return S(-1); });
}

namespace detail {

enum class BinKind { Add, Sub, Mul };

// Shapes must match, or one operand is a 1-element tensor (scalar broadcast).
template <typename S>
TensorT<S> binary_op(const TensorT<S>& a, const TensorT<S>& b, BinKind kind) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    throw std::invalid_argument("binary op: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const TensorT<S>& big = a_scalar ? b : a;
  TensorT<S> out(big.shape());
  const S* ap = a.data();
  const S* bp = b.data();
  S* op = out.data();
  const int64_t n = out.size();
  const int64_t as = a_scalar ? 0 : 1;
  const int64_t bs = b_scalar ? 0 : 1;
  switch (kind) {
    case BinKind::Add:
      for (int64_t i = 0; i < n; ++i) op[i] = ap[i * as] + bp[i * bs];
      break;
    case BinKind::Sub:
      for (int64_t i = 0; i < n; ++i) op[i] = ap[i * as] - bp[i * bs];
      break;
    case BinKind::Mul:
      for (int64_t i = 0; i < n; ++i) op[i] = ap[i * as] * bp[i * bs];
      break;
  }
  maybe_record<S>(out, {a.requires_grad(), b.requires_grad()}, [a, b, out, kind, as, bs]() {
    const auto* go = out_grad(out);
    if (!go) return;
    const int64_t n2 = out.size();
    const S* ap2 = a.data();
    const S* bp2 = b.data();
    if (a.requires_grad()) {
      auto& ga = gbuf(a);
      for (int64_t i = 0; i < n2; ++i) {
        S g = (*go)[i];
        if (kind == BinKind::Mul) g *= bp2[i * bs];
        ga[i * as] += g;
      }
    }
    if (b.requires_grad()) {
      auto& gb = gbuf(b);
      for (int64_t i = 0; i < n2; ++i) {
        S g = (*go)[i];
        if (kind == BinKind::Sub) g = -g;
        if (kind == BinKind::Mul) g = (*go)[i] * ap2[i * as];
        gb[i * bs] += g;
      }
    }
  });
  return out;
}

}  // namespace detail

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(a, b, detail::BinKind::Add);
}
template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(a, b, detail::BinKind::Sub);
}
template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  return detail::binary_op(a, b, detail::BinKind::Mul);
}

// Constant (non-differentiated) scalar variants.
template <typename S>
TensorT<S> add(const TensorT<S>& a, S c) {
  return detail::unary_op(
      a, [c](S v) { return v + c; }, [](S, S) { return S(1); });
}
template <typename S>
TensorT<S> mul(const TensorT<S>& a, S c) {
  return detail::unary_op(
      a, [c](S v) { return v * c; }, [c](S, S) { return c; });
}

// ---------------------------------------------------------------------------
// matmul: (n,k) x (k,m) -> (n,m)

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: operands must be rank 2");
  const int n = a.dim(0), k = a.dim(1), k2 = b.dim(0), m = b.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  TensorT<S> out(Shape{n, m});
  const S* ap = a.data();
  const S* bp = b.data();
  S* op = out.data();
  for (int i = 0; i < n; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const S av = ap[static_cast<int64_t>(i) * k + kk];
      const S* brow = bp + static_cast<int64_t>(kk) * m;
      S* orow = op + static_cast<int64_t>(i) * m;
      for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  detail::maybe_record<S>(out, {a.requires_grad(), b.requires_grad()}, [a, b, out, n, k, m]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    const S* ap2 = a.data();
    const S* bp2 = b.data();
    if (a.requires_grad()) {  // ga += go . b^T
      auto& ga = detail::gbuf(a);
      for (int i = 0; i < n; ++i)
        for (int kk = 0; kk < k; ++kk) {
          S acc = S(0);
          const S* grow = go->data() + static_cast<int64_t>(i) * m;
          const S* brow = bp2 + static_cast<int64_t>(kk) * m;
          for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
          ga[static_cast<int64_t>(i) * k + kk] += acc;
        }
    }
    if (b.requires_grad()) {  // gb += a^T . go
      auto& gb = detail::gbuf(b);
      for (int i = 0; i < n; ++i) {
        const S* grow = go->data() + static_cast<int64_t>(i) * m;
        for (int kk = 0; kk < k; ++kk) {
          const S av = ap2[static_cast<int64_t>(i) * k + kk];
          S* gbrow = gb.data() + static_cast<int64_t>(kk) * m;
          for (int j = 0; j < m; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv_axis: 1D cross-correlation with channel mixing along one axis.
// x: (C_in, d1, ..., dm), kernel: (C_out, C_in, k), zero padding.
// Output extent on the chosen axis: floor((e + 2*pad - k)/stride) + 1.

inline int axis_to_dim(int rank, Axis axis) {
  int d = 0;
  switch (axis) {
    case Axis::X: d = rank - 1; break;
    case Axis::Y: d = rank - 2; break;
    case Axis::T: d = rank - 3; break;
  }
  if (d < 1) throw std::invalid_argument("conv_axis: axis not available at this rank");
  return d;
}

template <typename S>
TensorT<S> conv_axis(const TensorT<S>& x, const TensorT<S>& kernel, Axis axis, int stride = 1,
                     int pad = -1) {
  if (kernel.rank() != 3) throw std::invalid_argument("conv_axis: kernel must be (out,in,k)");
  if (x.rank() < 2) throw std::invalid_argument("conv_axis: input must have a channel dim plus data dims");
  const int d = axis_to_dim(x.rank(), axis);
  const int cout = kernel.dim(0), cin = kernel.dim(1), k = kernel.dim(2);
  if (x.dim(0) != cin)
    throw std::invalid_argument("conv_axis: channel mismatch, input has " + std::to_string(x.dim(0)) +
                                ", kernel expects " + std::to_string(cin));
  if (pad < 0) pad = (k - 1) / 2;
  if (stride < 1) throw std::invalid_argument("conv_axis: stride must be positive");
  const int e = x.dim(d);
  if (k > e + 2 * pad) throw std::invalid_argument("conv_axis: kernel exceeds padded extent");
  if (stride > e + 2 * pad) throw std::invalid_argument("conv_axis: stride exceeds padded extent");
  const int oe = (e + 2 * pad - k) / stride + 1;

  int64_t A = 1, B = 1;
  for (int i = 1; i < d; ++i) A *= x.dim(i);
  for (int i = d + 1; i < x.rank(); ++i) B *= x.dim(i);

  Shape oshape = x.shape();
  oshape[0] = cout;
  oshape[static_cast<size_t>(d)] = oe;
  TensorT<S> out(oshape);

  const S* xp = x.data();
  const S* kp = kernel.data();
  S* op = out.data();

  for (int co = 0; co < cout; ++co)
    for (int64_t a = 0; a < A; ++a) {
      S* oplane = op + ((co * A + a) * oe) * B;
      for (int ci = 0; ci < cin; ++ci) {
        const S* xplane = xp + ((ci * A + a) * e) * B;
        const S* kw = kp + (static_cast<int64_t>(co) * cin + ci) * k;
        for (int q = 0; q < k; ++q) {
          const S w = kw[q];
          if (w == S(0)) continue;
          if (B == 1) {
            // innermost axis: contiguous input row
            const int off = q - pad;
            int o0 = 0;
            while (o0 < oe && o0 * stride + off < 0) ++o0;
            for (int o = o0; o < oe; ++o) {
              const int src = o * stride + off;
              if (src >= e) break;
              oplane[o] += w * xplane[src];
            }
          } else {
            for (int o = 0; o < oe; ++o) {
              const int src = o * stride + q - pad;
              if (src < 0 || src >= e) continue;
              S* orow = oplane + static_cast<int64_t>(o) * B;
              const S* xrow = xplane + static_cast<int64_t>(src) * B;
              for (int64_t b = 0; b < B; ++b) orow[b] += w * xrow[b];
            }
          }
        }
      }
    }

  detail::maybe_record<S>(
      out, {x.requires_grad(), kernel.requires_grad()},
      [x, kernel, out, cout, cin, k, e, oe, A, B, stride, pad]() {
        const auto* go = detail::out_grad(out);
        if (!go) return;
        const S* xp2 = x.data();
        const S* kp2 = kernel.data();
        const bool gx_needed = x.requires_grad();
        const bool gk_needed = kernel.requires_grad();
        std::vector<S>* gx = gx_needed ? &detail::gbuf(x) : nullptr;
        std::vector<S>* gk = gk_needed ? &detail::gbuf(kernel) : nullptr;
        for (int co = 0; co < cout; ++co)
          for (int64_t a = 0; a < A; ++a) {
            const S* gplane = go->data() + ((co * A + a) * oe) * B;
            for (int ci = 0; ci < cin; ++ci) {
              const S* xplane = xp2 + ((ci * A + a) * e) * B;
              S* gxplane = gx_needed ? gx->data() + ((ci * A + a) * e) * B : nullptr;
              const int64_t kbase = (static_cast<int64_t>(co) * cin + ci) * k;
              for (int q = 0; q < k; ++q) {
                const S w = kp2[kbase + q];
                S kacc = S(0);
                for (int o = 0; o < oe; ++o) {
                  const int src = o * stride + q - pad;
                  if (src < 0 || src >= e) continue;
                  const S* grow = gplane + static_cast<int64_t>(o) * B;
                  const S* xrow = xplane + static_cast<int64_t>(src) * B;
                  if (gx_needed) {
                    S* gxrow = gxplane + static_cast<int64_t>(src) * B;
                    for (int64_t b = 0; b < B; ++b) gxrow[b] += w * grow[b];
                  }
                  if (gk_needed)
                    for (int64_t b = 0; b < B; ++b) kacc += grow[b] * xrow[b];
                }
                if (gk_needed) (*gk)[kbase + q] += kacc;
              }
            }
          }
      });
  return out;
}

// Per-channel bias: b has shape (C) with C == x.dim(0).
template <typename S>
TensorT<S> bias_add(const TensorT<S>& x, const TensorT<S>& b) {
  if (b.rank() != 1 || b.dim(0) != x.dim(0))
    throw std::invalid_argument("bias_add: bias must be rank-1 of length channels");
  TensorT<S> out(x.shape());
  const int c = x.dim(0);
  const int64_t inner = x.size() / c;
  const S* xp = x.data();
  const S* bp = b.data();
  S* op = out.data();
  for (int ci = 0; ci < c; ++ci) {
    const S bv = bp[ci];
    const S* xrow = xp + ci * inner;
    S* orow = op + ci * inner;
    for (int64_t i = 0; i < inner; ++i) orow[i] = xrow[i] + bv;
  }
  detail::maybe_record<S>(out, {x.requires_grad(), b.requires_grad()}, [x, b, out, c, inner]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    if (x.requires_grad()) {
      auto& gx = detail::gbuf(x);
      for (int64_t i = 0; i < out.size(); ++i) gx[i] += (*go)[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::gbuf(b);
      for (int ci = 0; ci < c; ++ci) {
        S acc = S(0);
        const S* grow = go->data() + ci * inner;
        for (int64_t i = 0; i < inner; ++i) acc += grow[i];
        gb[ci] += acc;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax over one dimension (max-subtracted)

template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int dim) {
  if (dim < 0 || dim >= x.rank()) throw std::invalid_argument("softmax: bad dim");
  const int e = x.dim(dim);
  int64_t A = 1, B = 1;
  for (int i = 0; i < dim; ++i) A *= x.dim(i);
  for (int i = dim + 1; i < x.rank(); ++i) B *= x.dim(i);
  TensorT<S> out(x.shape());
  const S* xp = x.data();
  S* op = out.data();
  for (int64_t a = 0; a < A; ++a)
    for (int64_t b = 0; b < B; ++b) {
      const int64_t base = a * e * B + b;
      S mx = xp[base];
      for (int i = 1; i < e; ++i) mx = std::max(mx, xp[base + i * B]);
      S sum = S(0);
      for (int i = 0; i < e; ++i) {
        const S v = std::exp(xp[base + i * B] - mx);
        op[base + i * B] = v;
        sum += v;
      }
      const S inv = S(1) / sum;
      for (int i = 0; i < e; ++i) op[base + i * B] *= inv;
    }
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out, e, A, B]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    const S* yp = out.data();
    for (int64_t a = 0; a < A; ++a)
      for (int64_t b = 0; b < B; ++b) {
        const int64_t base = a * e * B + b;
        S dot = S(0);
        for (int i = 0; i < e; ++i) dot += (*go)[base + i * B] * yp[base + i * B];
        for (int i = 0; i < e; ++i)
          gx[base + i * B] += yp[base + i * B] * ((*go)[base + i * B] - dot);
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_sample: map (C,H,W), coords (2,Ho,Wo) with coords[0]=x, coords[1]=y
// in absolute map pixels. Out-of-range positions clamp to the border, which
// also zeroes their coordinate gradient.

namespace detail {

template <typename S>
struct BilinearTap {
  int x0, x1, y0, y1;
  S fx, fy;
  bool in_x, in_y;
};

template <typename S>
BilinearTap<S> bilinear_tap(const S* cp, int64_t npix, int64_t p, int h, int w) {
  BilinearTap<S> t;
  const S xc = cp[p];
  const S yc = cp[npix + p];
  t.in_x = xc >= S(0) && xc <= S(w - 1);
  t.in_y = yc >= S(0) && yc <= S(h - 1);
  const S cx = std::min(std::max(xc, S(0)), S(w - 1));
  const S cy = std::min(std::max(yc, S(0)), S(h - 1));
  t.x0 = std::min(static_cast<int>(std::floor(cx)), w - 1);
  t.y0 = std::min(static_cast<int>(std::floor(cy)), h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.fx = cx - S(t.x0);
  t.fy = cy - S(t.y0);
  return t;
}

}  // namespace detail

template <typename S>
TensorT<S> bilinear_sample(const TensorT<S>& map, const TensorT<S>& coords) {
  if (map.rank() != 3 || coords.rank() != 3 || coords.dim(0) != 2)
    throw std::invalid_argument("bilinear_sample: map must be (C,H,W), coords (2,Ho,Wo)");
  const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const int ho = coords.dim(1), wo = coords.dim(2);
  TensorT<S> out(Shape{c, ho, wo});
  const S* mp = map.data();
  const S* cp = coords.data();
  S* op = out.data();
  const int64_t npix = static_cast<int64_t>(ho) * wo;
  const int64_t mplane = static_cast<int64_t>(h) * w;

  for (int64_t p = 0; p < npix; ++p) {
    const auto t = detail::bilinear_tap(cp, npix, p, h, w);
    const int x0 = t.x0, x1 = t.x1, y0 = t.y0, y1 = t.y1;
    const S fx = t.fx, fy = t.fy;
    const S w00 = (S(1) - fy) * (S(1) - fx), w01 = (S(1) - fy) * fx;
    const S w10 = fy * (S(1) - fx), w11 = fy * fx;
    for (int ci = 0; ci < c; ++ci) {
      const S* plane = mp + ci * mplane;
      op[ci * npix + p] = w00 * plane[static_cast<int64_t>(y0) * w + x0] +
                          w01 * plane[static_cast<int64_t>(y0) * w + x1] +
                          w10 * plane[static_cast<int64_t>(y1) * w + x0] +
                          w11 * plane[static_cast<int64_t>(y1) * w + x1];
    }
  }

  detail::maybe_record<S>(
      out, {map.requires_grad(), coords.requires_grad()},
      [map, coords, out, c, h, w, npix, mplane]() {
        const auto* go = detail::out_grad(out);
        if (!go) return;
        const S* mp2 = map.data();
        const S* cp2 = coords.data();
        const bool gm_needed = map.requires_grad();
        const bool gc_needed = coords.requires_grad();
        std::vector<S>* gm = gm_needed ? &detail::gbuf(map) : nullptr;
        std::vector<S>* gc = gc_needed ? &detail::gbuf(coords) : nullptr;
        for (int64_t p = 0; p < npix; ++p) {
          const auto t = detail::bilinear_tap(cp2, npix, p, h, w);
          const int x0 = t.x0, x1 = t.x1, y0 = t.y0, y1 = t.y1;
          const S fx = t.fx, fy = t.fy;
          const bool in_x = t.in_x, in_y = t.in_y;
          const S w00 = (S(1) - fy) * (S(1) - fx), w01 = (S(1) - fy) * fx;
          const S w10 = fy * (S(1) - fx), w11 = fy * fx;
          S gx_acc = S(0), gy_acc = S(0);
          for (int ci = 0; ci < c; ++ci) {
            const S g = (*go)[ci * npix + p];
            if (g == S(0)) continue;
            const S* plane = mp2 + ci * mplane;
            const int64_t i00 = static_cast<int64_t>(y0) * w + x0;
            const int64_t i01 = static_cast<int64_t>(y0) * w + x1;
            const int64_t i10 = static_cast<int64_t>(y1) * w + x0;
            const int64_t i11 = static_cast<int64_t>(y1) * w + x1;
            if (gm_needed) {
              S* gplane = gm->data() + ci * mplane;
              gplane[i00] += g * w00;
              gplane[i01] += g * w01;
              gplane[i10] += g * w10;
              gplane[i11] += g * w11;
            }
            if (gc_needed) {
              gx_acc += g * ((S(1) - fy) * (plane[i01] - plane[i00]) +
                             fy * (plane[i11] - plane[i10]));
              gy_acc += g * ((S(1) - fx) * (plane[i10] - plane[i00]) +
                             fx * (plane[i11] - plane[i01]));
            }
          }
          if (gc_needed) {
            if (in_x) (*gc)[p] += gx_acc;
            if (in_y) (*gc)[npix + p] += gy_acc;
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// avg_pool2: 2x2 mean over the last two dims; odd extents are padded by edge
// replication before pooling.

template <typename S>
TensorT<S> avg_pool2(const TensorT<S>& x) {
  if (x.rank() < 2) throw std::invalid_argument("avg_pool2: rank must be >= 2");
  const int h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const int oh = (h + 1) / 2, ow = (w + 1) / 2;
  int64_t A = 1;
  for (int i = 0; i < x.rank() - 2; ++i) A *= x.dim(i);
  Shape oshape = x.shape();
  oshape[static_cast<size_t>(x.rank() - 2)] = oh;
  oshape[static_cast<size_t>(x.rank() - 1)] = ow;
  TensorT<S> out(oshape);
  const S* xp = x.data();
  S* op = out.data();
  for (int64_t a = 0; a < A; ++a) {
    const S* plane = xp + a * h * w;
    S* oplane = op + a * static_cast<int64_t>(oh) * ow;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const int y0 = 2 * i, y1 = std::min(2 * i + 1, h - 1);
        const int x0 = 2 * j, x1 = std::min(2 * j + 1, w - 1);
        oplane[static_cast<int64_t>(i) * ow + j] =
            S(0.25) * (plane[static_cast<int64_t>(y0) * w + x0] +
                       plane[static_cast<int64_t>(y0) * w + x1] +
                       plane[static_cast<int64_t>(y1) * w + x0] +
                       plane[static_cast<int64_t>(y1) * w + x1]);
      }
  }
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out, A, h, w, oh, ow]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    for (int64_t a = 0; a < A; ++a) {
      const S* gplane = go->data() + a * static_cast<int64_t>(oh) * ow;
      S* gxplane = gx.data() + a * h * w;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const S g = S(0.25) * gplane[static_cast<int64_t>(i) * ow + j];
          const int y0 = 2 * i, y1 = std::min(2 * i + 1, h - 1);
          const int x0 = 2 * j, x1 = std::min(2 * j + 1, w - 1);
          gxplane[static_cast<int64_t>(y0) * w + x0] += g;
          gxplane[static_cast<int64_t>(y0) * w + x1] += g;
          gxplane[static_cast<int64_t>(y1) * w + x0] += g;
          gxplane[static_cast<int64_t>(y1) * w + x1] += g;
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops (all copying; backward copies gradients back)

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) throw std::invalid_argument("reshape: element count mismatch");
  TensorT<S> out(std::move(shape));
  std::copy(x.data(), x.data() + x.size(), out.data());
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    for (int64_t i = 0; i < x.size(); ++i) gx[i] += (*go)[i];
  });
  return out;
}

template <typename S>
TensorT<S> permute(const TensorT<S>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("permute: rank mismatch");
  Shape oshape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) oshape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  TensorT<S> out(oshape);
  std::vector<int64_t> xstride(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    xstride[static_cast<size_t>(i)] = xstride[static_cast<size_t>(i + 1)] * x.dim(i + 1);
  std::vector<int64_t> ostep(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) ostep[static_cast<size_t>(i)] = xstride[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  const S* xp = x.data();
  S* op = out.data();
  std::vector<int> idx(static_cast<size_t>(r), 0);
  int64_t src = 0;
  for (int64_t o = 0;; ++o) {
    op[o] = xp[src];
    int i = r - 1;
    for (; i >= 0; --i) {
      idx[static_cast<size_t>(i)]++;
      src += ostep[static_cast<size_t>(i)];
      if (idx[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
      src -= ostep[static_cast<size_t>(i)] * oshape[static_cast<size_t>(i)];
      idx[static_cast<size_t>(i)] = 0;
    }
    if (i < 0) break;
  }
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out, oshape, ostep, r]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    std::vector<int> idx2(static_cast<size_t>(r), 0);
    int64_t src = 0;
    for (int64_t o = 0;; ++o) {
      gx[src] += (*go)[o];
      int i = r - 1;
      for (; i >= 0; --i) {
        idx2[static_cast<size_t>(i)]++;
        src += ostep[static_cast<size_t>(i)];
        if (idx2[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
        src -= ostep[static_cast<size_t>(i)] * oshape[static_cast<size_t>(i)];
        idx2[static_cast<size_t>(i)] = 0;
      }
      if (i < 0) break;
    }
  });
  return out;
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& xs, int dim) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const int r = xs[0].rank();
  if (dim < 0 || dim >= r) throw std::invalid_argument("concat: bad dim");
  Shape oshape = xs[0].shape();
  int total = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != dim && t.dim(i) != oshape[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch on non-concat dim");
    total += t.dim(dim);
  }
  oshape[static_cast<size_t>(dim)] = total;
  TensorT<S> out(oshape);
  int64_t A = 1, B = 1;
  for (int i = 0; i < dim; ++i) A *= oshape[static_cast<size_t>(i)];
  for (int i = dim + 1; i < r; ++i) B *= oshape[static_cast<size_t>(i)];
  S* op = out.data();
  int offset = 0;
  for (const auto& t : xs) {
    const int e = t.dim(dim);
    const S* tp = t.data();
    for (int64_t a = 0; a < A; ++a)
      std::copy(tp + a * e * B, tp + (a + 1) * e * B, op + (a * total + offset) * B);
    offset += e;
  }
  bool any = false;
  for (const auto& t : xs) any = any || t.requires_grad();
  detail::maybe_record<S>(out, {any}, [xs, out, A, B, total, dim]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    int off = 0;
    for (const auto& t : xs) {
      const int e = t.dim(dim);
      if (t.requires_grad()) {
        auto& gt = detail::gbuf(t);
        for (int64_t a = 0; a < A; ++a) {
          const S* src = go->data() + (a * total + off) * B;
          S* dst = gt.data() + a * e * B;
          for (int64_t i = 0; i < e * B; ++i) dst[i] += src[i];
        }
      }
      off += e;
    }
  });
  return out;
}

template <typename S>
TensorT<S> slice(const TensorT<S>& x, int dim, int start, int len) {
  const int r = x.rank();
  if (dim < 0 || dim >= r) throw std::invalid_argument("slice: bad dim");
  if (start < 0 || len <= 0 || start + len > x.dim(dim))
    throw std::invalid_argument("slice: range out of bounds");
  Shape oshape = x.shape();
  oshape[static_cast<size_t>(dim)] = len;
  TensorT<S> out(oshape);
  int64_t A = 1, B = 1;
  for (int i = 0; i < dim; ++i) A *= x.dim(i);
  for (int i = dim + 1; i < r; ++i) B *= x.dim(i);
  const int e = x.dim(dim);
  const S* xp = x.data();
  S* op = out.data();
  for (int64_t a = 0; a < A; ++a)
    std::copy(xp + (a * e + start) * B, xp + (a * e + start + len) * B, op + a * len * B);
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out, A, B, e, start, len]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    for (int64_t a = 0; a < A; ++a) {
      const S* src = go->data() + a * len * B;
      S* dst = gx.data() + (a * e + start) * B;
      for (int64_t i = 0; i < static_cast<int64_t>(len) * B; ++i) dst[i] += src[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
  S acc = S(0);
  const S* xp = x.data();
  for (int64_t i = 0; i < x.size(); ++i) acc += xp[i];
  TensorT<S> out = TensorT<S>::scalar(acc);
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    const S g = (*go)[0];
    for (int64_t i = 0; i < x.size(); ++i) gx[i] += g;
  });
  return out;
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
  return mul(sum_all(x), S(1) / S(x.size()));
}

// ---------------------------------------------------------------------------
// instance_norm: per-channel normalization over all non-channel dims.

template <typename S>
TensorT<S> instance_norm(const TensorT<S>& x, S eps = S(1e-5)) {
  const int c = x.dim(0);
  const int64_t n = x.size() / c;
  if (n < 2) throw std::invalid_argument("instance_norm: needs >= 2 elements per channel");
  TensorT<S> out(x.shape());
  std::vector<S> inv_sigma(static_cast<size_t>(c));
  const S* xp = x.data();
  S* op = out.data();
  for (int ci = 0; ci < c; ++ci) {
    const S* row = xp + ci * n;
    S mean = S(0);
    for (int64_t i = 0; i < n; ++i) mean += row[i];
    mean /= S(n);
    S var = S(0);
    for (int64_t i = 0; i < n; ++i) {
      const S d = row[i] - mean;
      var += d * d;
    }
    var /= S(n);
    const S is = S(1) / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(ci)] = is;
    S* orow = op + ci * n;
    for (int64_t i = 0; i < n; ++i) orow[i] = (row[i] - mean) * is;
  }
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out, c, n, inv_sigma]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    const S* yp = out.data();
    for (int ci = 0; ci < c; ++ci) {
      const S* grow = go->data() + ci * n;
      const S* yrow = yp + ci * n;
      S gmean = S(0), gydot = S(0);
      for (int64_t i = 0; i < n; ++i) {
        gmean += grow[i];
        gydot += grow[i] * yrow[i];
      }
      gmean /= S(n);
      gydot /= S(n);
      const S is = inv_sigma[static_cast<size_t>(ci)];
      S* gxrow = gx.data() + ci * n;
      for (int64_t i = 0; i < n; ++i) gxrow[i] += is * (grow[i] - gmean - yrow[i] * gydot);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// channel_norm: Euclidean norm across dim 0, output has channel extent 1.
// Gradient at an exactly-zero norm is defined as 0.

template <typename S>
TensorT<S> channel_norm(const TensorT<S>& x) {
  const int c = x.dim(0);
  const int64_t n = x.size() / c;
  Shape oshape = x.shape();
  oshape[0] = 1;
  TensorT<S> out(oshape);
  const S* xp = x.data();
  S* op = out.data();
  for (int64_t i = 0; i < n; ++i) {
    S acc = S(0);
    for (int ci = 0; ci < c; ++ci) {
      const S v = xp[ci * n + i];
      acc += v * v;
    }
    op[i] = std::sqrt(acc);
  }
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out, c, n]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    const S* xp2 = x.data();
    const S* yp = out.data();
    for (int64_t i = 0; i < n; ++i) {
      if (yp[i] == S(0)) continue;
      const S g = (*go)[i] / yp[i];
      for (int ci = 0; ci < c; ++ci) gx[ci * n + i] += g * xp2[ci * n + i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// upsample_bilinear: scales the last two dims by an integer factor using
// half-pixel sample centers with border clamping.

template <typename S>
TensorT<S> upsample_bilinear(const TensorT<S>& x, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  const int r = x.rank();
  if (r < 2) throw std::invalid_argument("upsample_bilinear: rank must be >= 2");
  const int h = x.dim(r - 2), w = x.dim(r - 1);
  const int oh = h * factor, ow = w * factor;
  int64_t A = 1;
  for (int i = 0; i < r - 2; ++i) A *= x.dim(i);
  Shape oshape = x.shape();
  oshape[static_cast<size_t>(r - 2)] = oh;
  oshape[static_cast<size_t>(r - 1)] = ow;
  TensorT<S> out(oshape);

  // Precompute per-output-row/col source indices and weights.
  auto make_axis = [factor](int src_e, int out_e, std::vector<int>& i0, std::vector<int>& i1,
                            std::vector<S>& f) {
    i0.resize(static_cast<size_t>(out_e));
    i1.resize(static_cast<size_t>(out_e));
    f.resize(static_cast<size_t>(out_e));
    for (int o = 0; o < out_e; ++o) {
      S cs = (S(o) + S(0.5)) / S(factor) - S(0.5);
      cs = std::min(std::max(cs, S(0)), S(src_e - 1));
      int a = static_cast<int>(std::floor(cs));
      if (a > src_e - 1) a = src_e - 1;
      i0[static_cast<size_t>(o)] = a;
      i1[static_cast<size_t>(o)] = std::min(a + 1, src_e - 1);
      f[static_cast<size_t>(o)] = cs - S(a);
    }
  };
  std::vector<int> y0, y1, x0, x1;
  std::vector<S> fy, fx;
  make_axis(h, oh, y0, y1, fy);
  make_axis(w, ow, x0, x1, fx);

  const S* xp = x.data();
  S* op = out.data();
  for (int64_t a = 0; a < A; ++a) {
    const S* plane = xp + a * h * w;
    S* oplane = op + a * static_cast<int64_t>(oh) * ow;
    for (int i = 0; i < oh; ++i) {
      const S* r0 = plane + static_cast<int64_t>(y0[static_cast<size_t>(i)]) * w;
      const S* r1 = plane + static_cast<int64_t>(y1[static_cast<size_t>(i)]) * w;
      const S wy = fy[static_cast<size_t>(i)];
      S* orow = oplane + static_cast<int64_t>(i) * ow;
      for (int j = 0; j < ow; ++j) {
        const S wx = fx[static_cast<size_t>(j)];
        const int a0 = x0[static_cast<size_t>(j)], a1 = x1[static_cast<size_t>(j)];
        orow[j] = (S(1) - wy) * ((S(1) - wx) * r0[a0] + wx * r0[a1]) +
                  wy * ((S(1) - wx) * r1[a0] + wx * r1[a1]);
      }
    }
  }
  detail::maybe_record<S>(out, {x.requires_grad()}, [x, out, A, h, w, oh, ow, y0, y1, x0, x1, fy,
                                                     fx]() {
    const auto* go = detail::out_grad(out);
    if (!go) return;
    auto& gx = detail::gbuf(x);
    for (int64_t a = 0; a < A; ++a) {
      const S* gplane = go->data() + a * static_cast<int64_t>(oh) * ow;
      S* gxplane = gx.data() + a * h * w;
      for (int i = 0; i < oh; ++i) {
        const S wy = fy[static_cast<size_t>(i)];
        S* g0 = gxplane + static_cast<int64_t>(y0[static_cast<size_t>(i)]) * w;
        S* g1 = gxplane + static_cast<int64_t>(y1[static_cast<size_t>(i)]) * w;
        const S* grow = gplane + static_cast<int64_t>(i) * ow;
        for (int j = 0; j < ow; ++j) {
          const S g = grow[j];
          if (g == S(0)) continue;
          const S wx = fx[static_cast<size_t>(j)];
          const int a0 = x0[static_cast<size_t>(j)], a1 = x1[static_cast<size_t>(j)];
          g0[a0] += g * (S(1) - wy) * (S(1) - wx);
          g0[a1] += g * (S(1) - wy) * wx;
          g1[a0] += g * wy * (S(1) - wx);
          g1[a1] += g * wy * wx;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// backward through the currently active tape

template <typename S>
void backward(const TensorT<S>& root) {
  auto* tp = TapeT<S>::current();
  if (!tp) throw std::invalid_argument("backward: no active tape");
  tp->backward(root);
}

// ---------------------------------------------------------------------------
// misc helpers

template <typename S>
TensorT<S> rand_uniform(Shape shape, Rng& rng, S lo = S(-1), S hi = S(1)) {
  TensorT<S> t(std::move(shape));
  S* p = t.data();
  for (int64_t i = 0; i < t.size(); ++i) p[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

template <typename S>
bool all_finite(const TensorT<S>& t) {
  const S* p = t.data();
  for (int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

// Absolute sample coordinates of the identity grid: out (2,h,w), row 0 = x.
template <typename S>
TensorT<S> identity_grid(int h, int w) {
  TensorT<S> g(Shape{2, h, w});
  S* p = g.data();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      p[static_cast<int64_t>(i) * w + j] = S(j);
      p[static_cast<int64_t>(h) * w + static_cast<int64_t>(i) * w + j] = S(i);
    }
  return g;
}

template <typename S>
TensorT<S> cast_to(const TensorT<float>& t) {
  TensorT<S> out(t.shape());
  const float* src = t.data();
  S* dst = out.data();
  for (int64_t i = 0; i < t.size(); ++i) dst[i] = static_cast<S>(src[i]);
  return out;
}

}  // namespace sstm
