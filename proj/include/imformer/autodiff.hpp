#pragma once

// Reverse-mode automatic differentiation over a flat, append-only tape.
//
// A Tape owns every recorded node together with its forward value. Var is a cheap handle (tape, node id).
// Leaves created with Tape::leaf receive gradients; Tape::constant values do not, and any subgraph that only
// depends on constants is skipped during the backward sweep.

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "kernels.hpp"
#include "tensor.hpp"

namespace imformer {

using NodeId = std::size_t;

enum class Kind
{
  leaf,
  add,
  sub,
  mul,
  div,
  affine,
  matmul,
  transpose,
  reshape,
  concat,
  slice,
  pad,
  conv2d,
  conv3d,
  downsample2x,
  upsample2x,
  softmax,
  exp,
  log,
  sqrt,
  abs,
  gelu,
  layernorm,
  mean,
  sum,
  power,
  attention,
  gather,
  linear,
  mlp,
};

char const *kind_name(Kind k);

enum class PadMode
{
  zero,
  reflect
};

enum class Resample
{
  nearest,
  bilinear
};

/// Per-primitive attributes. Each kind reads only the fields it documents.
struct Attrs
{
  Index axis = -1;               // softmax, concat, slice, mean/sum (when !all), layernorm
  bool all = false;              // mean/sum over every element -> shape [1]
  Index start = 0, stop = 0;     // slice
  Shape shape;                   // reshape target (one -1 allowed), gather output shape
  std::vector<int> perm;         // transpose
  double alpha = 1.0;            // affine scale, power exponent
  double beta = 0.0;             // affine offset
  double eps = 1e-5;             // layernorm
  bool trans_a = false;          // matmul
  bool trans_b = false;          // matmul
  std::array<Index, 4> pads{};   // pad: top, bottom, left, right on the last two axes
  PadMode pad_mode = PadMode::zero;
  Resample resample = Resample::nearest;
  Index heads = 1;               // attention
  std::vector<Index> indices;    // gather: flat source index per output element
};

class UnknownKindError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

template <class S>
class Tape;

template <class S>
struct Var
{
  Tape<S> *tape = nullptr;
  NodeId id = 0;

  Tensor<S> const &value() const { return tape->value(id); }
  Shape const &shape() const { return value().shape; }
  Index dim(Index axis) const { return value().dim(axis); }
};

template <class S>
using GradientMap = std::unordered_map<NodeId, Tensor<S>>;

template <class S>
class Tape
{
public:
  struct Node
  {
    Kind kind = Kind::leaf;
    std::vector<NodeId> inputs;
    Tensor<S> value;
    std::vector<Tensor<S>> saved;
    Attrs attrs;
    bool requires_grad = false;
  };

  Var<S> leaf(Tensor<S> value) { return push_leaf(std::move(value), true); }
  Var<S> constant(Tensor<S> value) { return push_leaf(std::move(value), false); }

  Var<S> record(Kind kind, std::vector<Var<S>> const &inputs, Attrs const &attrs = {});

  /// Gradients of a scalar output with respect to every trainable leaf on this tape.
  GradientMap<S> backward(Var<S> output) const;

  Tensor<S> const &value(NodeId id) const { return nodes_.at(id).value; }
  Node const &node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  std::vector<NodeId> const &leaves() const { return leaves_; }
  void clear()
  {
    nodes_.clear();
    leaves_.clear();
  }

private:
  Var<S> push_leaf(Tensor<S> value, bool trainable)
  {
    Node n;
    n.kind = Kind::leaf;
    n.value = std::move(value);
    n.requires_grad = trainable;
    nodes_.push_back(std::move(n));
    NodeId const id = nodes_.size() - 1;
    if (trainable) { leaves_.push_back(id); }
    return {this, id};
  }

  void forward(Node &n) const;
  void backward_node(Node const &n, Tensor<S> const &gout, std::vector<Tensor<S> *> const &gin) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> leaves_;
};

inline char const *kind_name(Kind k)
{
  switch (k) {
  case Kind::leaf: return "leaf";
  case Kind::add: return "add";
  case Kind::sub: return "sub";
  case Kind::mul: return "mul";
  case Kind::div: return "div";
  case Kind::affine: return "affine";
  case Kind::matmul: return "matmul";
  case Kind::transpose: return "transpose";
  case Kind::reshape: return "reshape";
  case Kind::concat: return "concat";
  case Kind::slice: return "slice";
  case Kind::pad: return "pad";
  case Kind::conv2d: return "conv2d";
  case Kind::conv3d: return "conv3d";
  case Kind::downsample2x: return "downsample2x";
  case Kind::upsample2x: return "upsample2x";
  case Kind::softmax: return "softmax";
  case Kind::exp: return "exp";
  case Kind::log: return "log";
  case Kind::sqrt: return "sqrt";
  case Kind::abs: return "abs";
  case Kind::gelu: return "gelu";
  case Kind::layernorm: return "layernorm";
  case Kind::mean: return "mean";
  case Kind::sum: return "sum";
  case Kind::power: return "power";
  case Kind::attention: return "attention";
  case Kind::gather: return "gather";
  case Kind::linear: return "linear";
  case Kind::mlp: return "mlp";
  }
  return "?";
}

namespace detail {

[[noreturn]] inline void shape_fail(Kind k, std::string const &what)
{
  throw ShapeError(std::string(kind_name(k)) + ": " + what);
}

inline void expect_inputs(Kind k, std::size_t got, std::size_t lo, std::size_t hi)
{
  if (got < lo || got > hi) {
    shape_fail(k, "expected " + std::to_string(lo) + (hi != lo ? "-" + std::to_string(hi) : "") + " inputs, got " +
                    std::to_string(got));
  }
}

// Second operand broadcasts only over leading dimensions of the first.
inline bool suffix_of(Shape const &full, Shape const &part)
{
  if (part.size() > full.size()) { return false; }
  return std::equal(part.rbegin(), part.rend(), full.rbegin());
}

struct AxisView
{
  Index outer, n, inner;
};

inline AxisView axis_view(Shape const &s, int axis)
{
  AxisView v{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) { v.outer *= s[i]; }
  for (std::size_t i = axis + 1; i < s.size(); ++i) { v.inner *= s[i]; }
  return v;
}

template <class S>
S gelu(S x)
{
  S const c = S(0.7978845608028654); // sqrt(2/pi)
  S const u = c * (x + S(0.044715) * x * x * x);
  return S(0.5) * x * (S(1) + std::tanh(u));
}

template <class S>
S gelu_grad(S x)
{
  S const c = S(0.7978845608028654);
  S const u = c * (x + S(0.044715) * x * x * x);
  S const th = std::tanh(u);
  S const du = c * (S(1) + S(3) * S(0.044715) * x * x);
  return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * du;
}

// Index map for one padded axis: -1 means zero fill.
inline std::vector<Index> pad_map(Index n, Index before, Index after, PadMode mode)
{
  std::vector<Index> m(static_cast<std::size_t>(n + before + after));
  for (Index i = 0; i < static_cast<Index>(m.size()); ++i) {
    Index s = i - before;
    if (s < 0 || s >= n) {
      if (mode == PadMode::zero) {
        s = -1;
      } else {
        if (n == 1) {
          s = 0;
        } else {
          Index const period = 2 * (n - 1);
          s = ((s % period) + period) % period;
          if (s >= n) { s = period - s; }
        }
      }
    }
    m[i] = s;
  }
  return m;
}

struct MatmulDims
{
  Index batch, M, N, K;
  bool b_shared;
};

inline MatmulDims matmul_dims(Shape const &a, Shape const &b, bool ta, bool tb)
{
  if (a.size() < 2 || b.size() < 2) { shape_fail(Kind::matmul, "operands need rank >= 2"); }
  Index const ar = a[a.size() - 2], ac = a[a.size() - 1];
  Index const br = b[b.size() - 2], bc = b[b.size() - 1];
  MatmulDims d{};
  d.M = ta ? ac : ar;
  d.K = ta ? ar : ac;
  Index const kb = tb ? bc : br;
  d.N = tb ? br : bc;
  if (d.K != kb) {
    shape_fail(Kind::matmul, "inner dims differ: " + to_string(a) + " x " + to_string(b) + " (K=" +
                                 std::to_string(d.K) + " vs " + std::to_string(kb) + ")");
  }
  d.batch = 1;
  for (std::size_t i = 0; i + 2 < a.size(); ++i) { d.batch *= a[i]; }
  d.b_shared = b.size() == 2;
  if (!d.b_shared) {
    if (b.size() != a.size() || !std::equal(a.begin(), a.end() - 2, b.begin())) {
      shape_fail(Kind::matmul, "batch dims differ: " + to_string(a) + " x " + to_string(b));
    }
  }
  return d;
}

template <class S>
void gemm(bool ta, bool tb, Index M, Index N, Index K, S const *a, S const *b, S *c)
{
  kernels::gemm_acc(ta, tb, M, N, K, a, b, c);
}

} // namespace detail

template <class S>
Var<S> Tape<S>::record(Kind kind, std::vector<Var<S>> const &inputs, Attrs const &attrs)
{
  if (kind == Kind::leaf || static_cast<int>(kind) < 0 || static_cast<int>(kind) > static_cast<int>(Kind::mlp)) {
    throw UnknownKindError("unknown primitive kind " + std::to_string(static_cast<int>(kind)));
  }
  Node n;
  n.kind = kind;
  n.attrs = attrs;
  for (auto const &v : inputs) {
    if (v.tape != this) { throw std::invalid_argument(std::string(kind_name(kind)) + ": input from another tape"); }
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  forward(n);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <class S>
void Tape<S>::forward(Node &n) const
{
  using detail::shape_fail;
  Kind const k = n.kind;
  auto in = [&](std::size_t i) -> Tensor<S> const & { return nodes_[n.inputs[i]].value; };
  Attrs const &at = n.attrs;
  Tensor<S> &out = n.value;

  switch (k) {
  case Kind::add:
  case Kind::sub:
  case Kind::mul:
  case Kind::div: {
    detail::expect_inputs(k, n.inputs.size(), 2, 2);
    auto const &a = in(0);
    auto const &b = in(1);
    if (!detail::suffix_of(a.shape, b.shape)) {
      shape_fail(k, "shape mismatch " + to_string(a.shape) + " vs " + to_string(b.shape));
    }
    out = Tensor<S>(a.shape);
    Index const nb = b.numel(), na = a.numel();
    S const *pa = a.ptr();
    S const *pb = b.ptr();
    S *po = out.ptr();
    auto run = [&](auto f) {
      for (Index base = 0; base < na; base += nb) {
        S const *__restrict xa = pa + base;
        S *__restrict xo = po + base;
#pragma omp simd
        for (Index j = 0; j < nb; ++j) { xo[j] = f(xa[j], pb[j]); }
      }
    };
    switch (k) {
    case Kind::add: run([](S x, S y) { return x + y; }); break;
    case Kind::sub: run([](S x, S y) { return x - y; }); break;
    case Kind::mul: run([](S x, S y) { return x * y; }); break;
    default: run([](S x, S y) { return x / y; }); break;
    }
    break;
  }
  case Kind::affine: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    out = Tensor<S>(a.shape);
    S const al = S(at.alpha), be = S(at.beta);
    for (Index i = 0; i < a.numel(); ++i) { out[i] = al * a[i] + be; }
    break;
  }
  case Kind::matmul: {
    detail::expect_inputs(k, n.inputs.size(), 2, 2);
    auto const &a = in(0);
    auto const &b = in(1);
    auto const d = detail::matmul_dims(a.shape, b.shape, at.trans_a, at.trans_b);
    Shape os(a.shape.begin(), a.shape.end() - 2);
    os.push_back(d.M);
    os.push_back(d.N);
    out = Tensor<S>(os);
    if (d.b_shared && !at.trans_a) {
      detail::gemm(false, at.trans_b, d.batch * d.M, d.N, d.K, a.ptr(), b.ptr(), out.ptr());
    } else {
      Index const bstride = d.b_shared ? 0 : d.K * d.N;
      for (Index bi = 0; bi < d.batch; ++bi) {
        detail::gemm(at.trans_a, at.trans_b, d.M, d.N, d.K, a.ptr() + bi * d.M * d.K, b.ptr() + bi * bstride,
                     out.ptr() + bi * d.M * d.N);
      }
    }
    break;
  }
  case Kind::transpose: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    std::vector<int> perm = at.perm;
    if (perm.empty()) {
      if (a.rank() < 2) { shape_fail(k, "needs rank >= 2"); }
      perm.resize(a.rank());
      std::iota(perm.begin(), perm.end(), 0);
      std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
    }
    if (static_cast<int>(perm.size()) != a.rank()) { shape_fail(k, "permutation rank mismatch"); }
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
      if (p < 0 || p >= a.rank() || seen[p]) { shape_fail(k, "invalid permutation"); }
      seen[p] = true;
    }
    Shape os(a.rank());
    for (int i = 0; i < a.rank(); ++i) { os[i] = a.shape[perm[i]]; }
    out = Tensor<S>(os);
    kernels::permute(a.shape, perm, a.ptr(), out.ptr());
    n.attrs.perm = perm;
    break;
  }
  case Kind::reshape: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    Shape s = at.shape;
    Index known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == -1) {
        if (infer >= 0) { shape_fail(k, "more than one -1"); }
        infer = static_cast<int>(i);
      } else {
        known *= s[i];
      }
    }
    if (infer >= 0) {
      if (known == 0 || a.numel() % known) { shape_fail(k, "cannot infer dim for " + to_string(a.shape)); }
      s[infer] = a.numel() / known;
    }
    if (numel(s) != a.numel()) { shape_fail(k, "cannot reshape " + to_string(a.shape) + " to " + to_string(s)); }
    out = Tensor<S>(s, a.data);
    break;
  }
  case Kind::concat: {
    if (n.inputs.empty()) { shape_fail(k, "no inputs"); }
    auto const &a0 = in(0);
    int const ax = normalize_axis(at.axis, a0.shape.size());
    Shape os = a0.shape;
    os[ax] = 0;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      auto const &ai = in(i);
      if (ai.rank() != a0.rank()) { shape_fail(k, "rank mismatch"); }
      for (int d = 0; d < a0.rank(); ++d) {
        if (d != ax && ai.shape[d] != a0.shape[d]) {
          shape_fail(k, "dim " + std::to_string(d) + " differs: " + to_string(a0.shape) + " vs " +
                            to_string(ai.shape));
        }
      }
      os[ax] += ai.shape[ax];
    }
    out = Tensor<S>(os);
    auto const ov = detail::axis_view(os, ax);
    Index offset = 0;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      auto const &ai = in(i);
      Index const len = ai.shape[ax] * ov.inner;
      for (Index o = 0; o < ov.outer; ++o) {
        std::copy_n(ai.ptr() + o * len, len, out.ptr() + o * ov.n * ov.inner + offset);
      }
      offset += len;
    }
    break;
  }
  case Kind::slice: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    int const ax = normalize_axis(at.axis, a.shape.size());
    if (at.start < 0 || at.stop > a.shape[ax] || at.start >= at.stop) {
      shape_fail(k, "range [" + std::to_string(at.start) + "," + std::to_string(at.stop) + ") invalid for dim " +
                        std::to_string(a.shape[ax]));
    }
    Shape os = a.shape;
    os[ax] = at.stop - at.start;
    out = Tensor<S>(os);
    auto const v = detail::axis_view(a.shape, ax);
    Index const len = os[ax] * v.inner;
    for (Index o = 0; o < v.outer; ++o) {
      std::copy_n(a.ptr() + (o * v.n + at.start) * v.inner, len, out.ptr() + o * len);
    }
    break;
  }
  case Kind::pad: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    if (a.rank() < 2) { shape_fail(k, "needs rank >= 2"); }
    Index const H = a.dim(-2), W = a.dim(-1);
    for (Index p : at.pads) {
      if (p < 0) { shape_fail(k, "negative padding"); }
    }
    if (at.pad_mode == PadMode::reflect && (at.pads[0] >= H || at.pads[1] >= H || at.pads[2] >= W || at.pads[3] >= W)) {
      shape_fail(k, "reflect padding must be smaller than the padded dim");
    }
    auto const my = detail::pad_map(H, at.pads[0], at.pads[1], at.pad_mode);
    auto const mx = detail::pad_map(W, at.pads[2], at.pads[3], at.pad_mode);
    Shape os = a.shape;
    os[os.size() - 2] = static_cast<Index>(my.size());
    os[os.size() - 1] = static_cast<Index>(mx.size());
    out = Tensor<S>(os);
    Index const planes = a.numel() / (H * W);
    Index const OH = os[os.size() - 2], OW = os[os.size() - 1];
    for (Index p = 0; p < planes; ++p) {
      for (Index y = 0; y < OH; ++y) {
        if (my[y] < 0) { continue; }
        for (Index x = 0; x < OW; ++x) {
          if (mx[x] < 0) { continue; }
          out[(p * OH + y) * OW + x] = a[(p * H + my[y]) * W + mx[x]];
        }
      }
    }
    break;
  }
  case Kind::conv2d: {
    detail::expect_inputs(k, n.inputs.size(), 2, 3);
    auto const &x = in(0);
    auto const &w = in(1);
    if (x.rank() != 4 || w.rank() != 4) { shape_fail(k, "expects x [N,C,H,W] and w [Co,Ci,k,k]"); }
    if (w.shape[1] != x.shape[1]) {
      shape_fail(k, "input channels " + std::to_string(x.shape[1]) + " vs kernel " + std::to_string(w.shape[1]));
    }
    if (w.shape[2] != w.shape[3] || w.shape[2] % 2 == 0) { shape_fail(k, "kernel must be square and odd"); }
    Index const Co = w.shape[0];
    out = Tensor<S>(Shape{x.shape[0], Co, x.shape[2], x.shape[3]});
    if (n.inputs.size() == 3) {
      auto const &b = in(2);
      if (b.numel() != Co) { shape_fail(k, "bias size " + std::to_string(b.numel()) + " vs " + std::to_string(Co)); }
      Index const plane = x.shape[2] * x.shape[3];
      for (Index nn = 0; nn < x.shape[0]; ++nn) {
        for (Index c = 0; c < Co; ++c) { std::fill_n(out.ptr() + (nn * Co + c) * plane, plane, b[c]); }
      }
    }
    kernels::conv2d_forward(x.shape[0], x.shape[1], Co, x.shape[2], x.shape[3], w.shape[2], x.ptr(), w.ptr(),
                            out.ptr());
    break;
  }
  case Kind::conv3d: {
    detail::expect_inputs(k, n.inputs.size(), 2, 3);
    auto const &x = in(0);
    auto const &w = in(1);
    if (x.rank() != 4 || w.rank() != 5) { shape_fail(k, "expects x [T,C,H,W] and w [Co,Ci,kt,k,k]"); }
    if (w.shape[1] != x.shape[1]) {
      shape_fail(k, "input channels " + std::to_string(x.shape[1]) + " vs kernel " + std::to_string(w.shape[1]));
    }
    if (w.shape[3] != w.shape[4] || w.shape[3] % 2 == 0 || w.shape[2] % 2 == 0) {
      shape_fail(k, "kernel must be odd-sized");
    }
    Index const Co = w.shape[0];
    out = Tensor<S>(Shape{x.shape[0], Co, x.shape[2], x.shape[3]});
    if (n.inputs.size() == 3) {
      auto const &b = in(2);
      if (b.numel() != Co) { shape_fail(k, "bias size mismatch"); }
      Index const plane = x.shape[2] * x.shape[3];
      for (Index t = 0; t < x.shape[0]; ++t) {
        for (Index c = 0; c < Co; ++c) { std::fill_n(out.ptr() + (t * Co + c) * plane, plane, b[c]); }
      }
    }
    kernels::conv3d_forward(x.shape[0], x.shape[1], Co, x.shape[2], x.shape[3], w.shape[2], w.shape[3], x.ptr(),
                            w.ptr(), out.ptr());
    break;
  }
  case Kind::downsample2x: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    if (a.rank() < 2) { shape_fail(k, "needs rank >= 2"); }
    Index const H = a.dim(-2), W = a.dim(-1);
    if (H % 2 || W % 2) { shape_fail(k, "H,W must be even, got " + to_string(a.shape)); }
    Shape os = a.shape;
    os[os.size() - 2] = H / 2;
    os[os.size() - 1] = W / 2;
    out = Tensor<S>(os);
    Index const planes = a.numel() / (H * W);
    for (Index p = 0; p < planes; ++p) {
      for (Index y = 0; y < H / 2; ++y) {
        S const *r0 = a.ptr() + (p * H + 2 * y) * W;
        S const *r1 = r0 + W;
        S *o = out.ptr() + (p * H / 2 + y) * (W / 2);
        for (Index x = 0; x < W / 2; ++x) { o[x] = S(0.25) * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]); }
      }
    }
    break;
  }
  case Kind::upsample2x: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    if (a.rank() < 2) { shape_fail(k, "needs rank >= 2"); }
    Index const H = a.dim(-2), W = a.dim(-1);
    Index const planes = a.numel() / (H * W);
    Shape os = a.shape;
    os[os.size() - 2] = 2 * H;
    os[os.size() - 1] = 2 * W;
    out = Tensor<S>(os);
    if (at.resample == Resample::nearest) {
      for (Index p = 0; p < planes; ++p) {
        for (Index y = 0; y < 2 * H; ++y) {
          S const *src = a.ptr() + (p * H + y / 2) * W;
          S *o = out.ptr() + (p * 2 * H + y) * 2 * W;
          for (Index x = 0; x < 2 * W; ++x) { o[x] = src[x / 2]; }
        }
      }
    } else {
      std::vector<S> tmp(static_cast<std::size_t>(planes * 2 * H * W));
      kernels::upsample_linear_axis(planes, H, W, a.ptr(), tmp.data());
      kernels::upsample_linear_axis(planes * 2 * H, W, Index{1}, tmp.data(), out.ptr());
    }
    break;
  }
  case Kind::softmax: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    int const ax = normalize_axis(at.axis, a.shape.size());
    auto const v = detail::axis_view(a.shape, ax);
    out = Tensor<S>(a.shape);
    for (Index o = 0; o < v.outer; ++o) {
      for (Index i = 0; i < v.inner; ++i) {
        S const *src = a.ptr() + o * v.n * v.inner + i;
        S *dst = out.ptr() + o * v.n * v.inner + i;
        S mx = src[0];
        for (Index c = 1; c < v.n; ++c) { mx = std::max(mx, src[c * v.inner]); }
        S sum = 0;
        for (Index c = 0; c < v.n; ++c) {
          dst[c * v.inner] = std::exp(src[c * v.inner] - mx);
          sum += dst[c * v.inner];
        }
        for (Index c = 0; c < v.n; ++c) { dst[c * v.inner] /= sum; }
      }
    }
    break;
  }
  case Kind::exp:
  case Kind::log:
  case Kind::sqrt:
  case Kind::abs:
  case Kind::gelu:
  case Kind::power: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    out = Tensor<S>(a.shape);
    if (k == Kind::gelu) {
      kernels::gelu_forward(a.numel(), a.ptr(), out.ptr());
      break;
    }
    S const p = S(at.alpha);
    for (Index i = 0; i < a.numel(); ++i) {
      S const x = a[i];
      switch (k) {
      case Kind::exp: out[i] = std::exp(x); break;
      case Kind::log: out[i] = std::log(x); break;
      case Kind::sqrt: out[i] = std::sqrt(x); break;
      case Kind::abs: out[i] = std::abs(x); break;
      case Kind::gelu: out[i] = detail::gelu(x); break;
      default: out[i] = std::pow(x, p); break;
      }
    }
    break;
  }
  case Kind::layernorm: {
    detail::expect_inputs(k, n.inputs.size(), 3, 3);
    auto const &x = in(0);
    auto const &g = in(1);
    auto const &b = in(2);
    int const ax = normalize_axis(at.axis, x.shape.size());
    auto const v = detail::axis_view(x.shape, ax);
    if (g.numel() != v.n || b.numel() != v.n) {
      shape_fail(k, "gain/bias size " + std::to_string(g.numel()) + " vs normalized dim " + std::to_string(v.n));
    }
    out = Tensor<S>(x.shape);
    Tensor<S> stats(Shape{2, v.outer * v.inner}); // mean, rstd
    S const inv_n = S(1) / S(v.n);
    if (v.inner == 1) {
      kernels::layernorm_rows(v.outer, v.n, x.ptr(), g.ptr(), b.ptr(), S(at.eps), out.ptr(), stats.ptr(),
                              stats.ptr() + v.outer);
      n.saved.push_back(std::move(stats));
      break;
    }
    for (Index o = 0; o < v.outer; ++o) {
      S const *src = x.ptr() + o * v.n * v.inner;
      S *dst = out.ptr() + o * v.n * v.inner;
      S *mean = stats.ptr() + o * v.inner;
      S *rstd = stats.ptr() + v.outer * v.inner + o * v.inner;
      for (Index c = 0; c < v.n; ++c) {
        for (Index i = 0; i < v.inner; ++i) { mean[i] += src[c * v.inner + i]; }
      }
      for (Index i = 0; i < v.inner; ++i) { mean[i] *= inv_n; }
      for (Index c = 0; c < v.n; ++c) {
        for (Index i = 0; i < v.inner; ++i) {
          S const dd = src[c * v.inner + i] - mean[i];
          rstd[i] += dd * dd;
        }
      }
      for (Index i = 0; i < v.inner; ++i) { rstd[i] = S(1) / std::sqrt(rstd[i] * inv_n + S(at.eps)); }
      for (Index c = 0; c < v.n; ++c) {
        S const gc = g[c], bc = b[c];
        for (Index i = 0; i < v.inner; ++i) {
          dst[c * v.inner + i] = (src[c * v.inner + i] - mean[i]) * rstd[i] * gc + bc;
        }
      }
    }
    n.saved.push_back(std::move(stats));
    break;
  }
  case Kind::mean:
  case Kind::sum: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    if (at.all) {
      S acc = 0;
      for (S x : a.data) { acc += x; }
      if (k == Kind::mean) { acc /= S(a.numel()); }
      out = Tensor<S>::scalar(acc);
    } else {
      int const ax = normalize_axis(at.axis, a.shape.size());
      auto const v = detail::axis_view(a.shape, ax);
      Shape os = a.shape;
      os.erase(os.begin() + ax);
      if (os.empty()) { os = {1}; }
      out = Tensor<S>(os);
      for (Index o = 0; o < v.outer; ++o) {
        for (Index c = 0; c < v.n; ++c) {
          S const *src = a.ptr() + (o * v.n + c) * v.inner;
          S *dst = out.ptr() + o * v.inner;
          for (Index i = 0; i < v.inner; ++i) { dst[i] += src[i]; }
        }
      }
      if (k == Kind::mean) {
        for (S &x : out.data) { x /= S(v.n); }
      }
    }
    break;
  }
  case Kind::attention: {
    detail::expect_inputs(k, n.inputs.size(), 3, 4);
    auto const &q = in(0);
    auto const &kk = in(1);
    auto const &vv = in(2);
    if (q.rank() != 3 || q.shape != kk.shape || q.shape != vv.shape) {
      shape_fail(k, "q,k,v must share shape [G,N,C]; got " + to_string(q.shape) + ", " + to_string(kk.shape) +
                        ", " + to_string(vv.shape));
    }
    Index const G = q.shape[0], N = q.shape[1], C = q.shape[2];
    if (at.heads < 1 || C % at.heads) {
      shape_fail(k, "channels " + std::to_string(C) + " not divisible by heads " + std::to_string(at.heads));
    }
    S const *bias = nullptr;
    if (n.inputs.size() == 4) {
      auto const &b = in(3);
      if (b.shape != Shape{at.heads, N, N}) {
        shape_fail(k, "bias must be [heads,N,N], got " + to_string(b.shape));
      }
      bias = b.ptr();
    }
    out = Tensor<S>(q.shape);
    Tensor<S> lse(Shape{G, at.heads, N});
    kernels::attention_forward(G, N, C, at.heads, q.ptr(), kk.ptr(), vv.ptr(), bias, out.ptr(), lse.ptr());
    n.saved.push_back(std::move(lse));
    break;
  }
  case Kind::gather: {
    detail::expect_inputs(k, n.inputs.size(), 1, 1);
    auto const &a = in(0);
    if (numel(at.shape) != static_cast<Index>(at.indices.size())) { shape_fail(k, "indices vs output shape"); }
    out = Tensor<S>(at.shape);
    for (std::size_t i = 0; i < at.indices.size(); ++i) {
      Index const s = at.indices[i];
      if (s < 0 || s >= a.numel()) { shape_fail(k, "index out of range"); }
      out.data[i] = a[s];
    }
    break;
  }
  case Kind::linear: {
    detail::expect_inputs(k, n.inputs.size(), 2, 3);
    auto const &x = in(0);
    auto const &w = in(1);
    if (x.rank() < 1 || w.rank() != 2 || x.shape.back() != w.shape[0]) {
      shape_fail(k, "x " + to_string(x.shape) + " vs weight " + to_string(w.shape));
    }
    Index const K = w.shape[0], N = w.shape[1], rows = x.numel() / std::max<Index>(K, 1);
    S const *b = nullptr;
    if (n.inputs.size() == 3) {
      if (in(2).numel() != N) { shape_fail(k, "bias size " + std::to_string(in(2).numel())); }
      b = in(2).ptr();
    }
    Shape os = x.shape;
    os.back() = N;
    out = Tensor<S>(os);
    kernels::linear_forward(rows, K, N, x.ptr(), w.ptr(), b, out.ptr());
    break;
  }
  case Kind::mlp: {
    detail::expect_inputs(k, n.inputs.size(), 7, 7);
    auto const &x = in(0);
    auto const &w1 = in(3);
    Index const C = x.rank() ? x.shape.back() : 0;
    if (w1.rank() != 2 || w1.shape[0] != C) { shape_fail(k, "w1 " + to_string(w1.shape) + " vs x " + to_string(x.shape)); }
    Index const E = w1.shape[1];
    if (in(1).numel() != C || in(2).numel() != C || in(4).numel() != E || in(5).shape != Shape{E, C} ||
        in(6).numel() != C) {
      shape_fail(k, "parameter shapes do not match C=" + std::to_string(C) + " E=" + std::to_string(E));
    }
    out = Tensor<S>(x.shape);
    kernels::token_mlp_forward(x.numel() / std::max<Index>(C, 1), C, E, x.ptr(), in(1).ptr(), in(2).ptr(), w1.ptr(),
                               in(4).ptr(), in(5).ptr(), in(6).ptr(), S(at.eps), out.ptr());
    break;
  }
  case Kind::leaf: break;
  }
}

template <class S>
void Tape<S>::backward_node(Node const &n, Tensor<S> const &g, std::vector<Tensor<S> *> const &gin) const
{
  Kind const k = n.kind;
  auto in = [&](std::size_t i) -> Tensor<S> const & { return nodes_[n.inputs[i]].value; };
  Attrs const &at = n.attrs;
  Tensor<S> const &out = n.value;

  switch (k) {
  case Kind::add:
  case Kind::sub:
  case Kind::mul:
  case Kind::div: {
    auto const &a = in(0);
    auto const &b = in(1);
    Index const nb = b.numel(), na = a.numel();
    S *ga = gin[0] ? gin[0]->ptr() : nullptr;
    S *gb = gin[1] ? gin[1]->ptr() : nullptr;
    S const *pa = a.ptr(), *pb = b.ptr(), *pg = g.ptr();
    for (Index base = 0; base < na; base += nb) {
      S const *__restrict xa = pa + base;
      S const *__restrict gv = pg + base;
      S *__restrict da = ga ? ga + base : nullptr;
      switch (k) {
      case Kind::add:
      case Kind::sub: {
        S const sign = k == Kind::add ? S(1) : S(-1);
        if (da) {
#pragma omp simd
          for (Index j = 0; j < nb; ++j) { da[j] += gv[j]; }
        }
        if (gb) {
#pragma omp simd
          for (Index j = 0; j < nb; ++j) { gb[j] += sign * gv[j]; }
        }
        break;
      }
      case Kind::mul:
        if (da) {
#pragma omp simd
          for (Index j = 0; j < nb; ++j) { da[j] += gv[j] * pb[j]; }
        }
        if (gb) {
#pragma omp simd
          for (Index j = 0; j < nb; ++j) { gb[j] += gv[j] * xa[j]; }
        }
        break;
      default:
        for (Index j = 0; j < nb; ++j) {
          if (da) { da[j] += gv[j] / pb[j]; }
          if (gb) { gb[j] -= gv[j] * xa[j] / (pb[j] * pb[j]); }
        }
        break;
      }
    }
    break;
  }
  case Kind::affine: {
    S const al = S(at.alpha);
    for (Index i = 0; i < g.numel(); ++i) { (*gin[0])[i] += al * g[i]; }
    break;
  }
  case Kind::matmul: {
    auto const &a = in(0);
    auto const &b = in(1);
    auto const d = detail::matmul_dims(a.shape, b.shape, at.trans_a, at.trans_b);
    bool const ta = at.trans_a, tb = at.trans_b;
    Index const astride = d.M * d.K, bstride = d.b_shared ? 0 : d.K * d.N, cstride = d.M * d.N;
    bool const fold = d.b_shared && !ta;
    Index const nb = fold ? 1 : d.batch;
    Index const M = fold ? d.batch * d.M : d.M;
    for (Index bi = 0; bi < nb; ++bi) {
      S const *pa = a.ptr() + bi * astride;
      S const *pb = b.ptr() + bi * bstride;
      S const *pg = g.ptr() + bi * cstride;
      if (gin[0]) {
        S *ga = gin[0]->ptr() + bi * astride;
        // C = op(A) op(B)
        if (!ta && !tb) {
          detail::gemm(false, true, M, d.K, d.N, pg, pb, ga);
        } else if (!ta && tb) {
          detail::gemm(false, false, M, d.K, d.N, pg, pb, ga);
        } else if (ta && !tb) {
          detail::gemm(false, true, d.K, M, d.N, pb, pg, ga);
        } else {
          detail::gemm(true, true, d.K, M, d.N, pb, pg, ga);
        }
      }
      if (gin[1]) {
        S *gb = gin[1]->ptr() + bi * bstride;
        if (!ta && !tb) {
          detail::gemm(true, false, d.K, d.N, M, pa, pg, gb);
        } else if (!ta && tb) {
          detail::gemm(true, false, d.N, d.K, M, pg, pa, gb);
        } else if (ta && !tb) {
          detail::gemm(false, false, d.K, d.N, M, pa, pg, gb);
        } else {
          detail::gemm(true, true, d.N, d.K, M, pg, pa, gb);
        }
      }
    }
    break;
  }
  case Kind::transpose: {
    std::vector<int> inv(at.perm.size());
    for (std::size_t i = 0; i < at.perm.size(); ++i) { inv[at.perm[i]] = static_cast<int>(i); }
    kernels::permute(out.shape, inv, g.ptr(), gin[0]->ptr(), true);
    break;
  }
  case Kind::reshape: {
    for (Index i = 0; i < g.numel(); ++i) { (*gin[0])[i] += g[i]; }
    break;
  }
  case Kind::concat: {
    int const ax = normalize_axis(at.axis, out.shape.size());
    auto const ov = detail::axis_view(out.shape, ax);
    Index offset = 0;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      Index const len = in(i).shape[ax] * ov.inner;
      if (gin[i]) {
        for (Index o = 0; o < ov.outer; ++o) {
          S const *src = g.ptr() + o * ov.n * ov.inner + offset;
          S *dst = gin[i]->ptr() + o * len;
          for (Index j = 0; j < len; ++j) { dst[j] += src[j]; }
        }
      }
      offset += len;
    }
    break;
  }
  case Kind::slice: {
    auto const &a = in(0);
    int const ax = normalize_axis(at.axis, a.shape.size());
    auto const v = detail::axis_view(a.shape, ax);
    Index const len = (at.stop - at.start) * v.inner;
    for (Index o = 0; o < v.outer; ++o) {
      S *dst = gin[0]->ptr() + (o * v.n + at.start) * v.inner;
      S const *src = g.ptr() + o * len;
      for (Index j = 0; j < len; ++j) { dst[j] += src[j]; }
    }
    break;
  }
  case Kind::pad: {
    auto const &a = in(0);
    Index const H = a.dim(-2), W = a.dim(-1);
    auto const my = detail::pad_map(H, at.pads[0], at.pads[1], at.pad_mode);
    auto const mx = detail::pad_map(W, at.pads[2], at.pads[3], at.pad_mode);
    Index const planes = a.numel() / (H * W);
    Index const OH = static_cast<Index>(my.size()), OW = static_cast<Index>(mx.size());
    for (Index p = 0; p < planes; ++p) {
      for (Index y = 0; y < OH; ++y) {
        if (my[y] < 0) { continue; }
        for (Index x = 0; x < OW; ++x) {
          if (mx[x] < 0) { continue; }
          (*gin[0])[(p * H + my[y]) * W + mx[x]] += g[(p * OH + y) * OW + x];
        }
      }
    }
    break;
  }
  case Kind::conv2d:
  case Kind::conv3d: {
    auto const &x = in(0);
    auto const &w = in(1);
    Index const Co = w.shape[0];
    if (k == Kind::conv2d) {
      kernels::conv2d_backward(x.shape[0], x.shape[1], Co, x.shape[2], x.shape[3], w.shape[2], x.ptr(), w.ptr(),
                               g.ptr(), gin[0] ? gin[0]->ptr() : nullptr, gin[1] ? gin[1]->ptr() : nullptr);
    } else {
      kernels::conv3d_backward(x.shape[0], x.shape[1], Co, x.shape[2], x.shape[3], w.shape[2], w.shape[3], x.ptr(),
                               w.ptr(), g.ptr(), gin[0] ? gin[0]->ptr() : nullptr,
                               gin[1] ? gin[1]->ptr() : nullptr);
    }
    if (n.inputs.size() == 3 && gin[2]) {
      Index const plane = x.shape[2] * x.shape[3];
      for (Index nn = 0; nn < x.shape[0]; ++nn) {
        for (Index c = 0; c < Co; ++c) {
          S const *src = g.ptr() + (nn * Co + c) * plane;
          S acc = 0;
          for (Index i = 0; i < plane; ++i) { acc += src[i]; }
          (*gin[2])[c] += acc;
        }
      }
    }
    break;
  }
  case Kind::downsample2x: {
    auto const &a = in(0);
    Index const H = a.dim(-2), W = a.dim(-1);
    Index const planes = a.numel() / (H * W);
    for (Index p = 0; p < planes; ++p) {
      for (Index y = 0; y < H; ++y) {
        S const *src = g.ptr() + (p * H / 2 + y / 2) * (W / 2);
        S *dst = gin[0]->ptr() + (p * H + y) * W;
        for (Index x = 0; x < W; ++x) { dst[x] += S(0.25) * src[x / 2]; }
      }
    }
    break;
  }
  case Kind::upsample2x: {
    auto const &a = in(0);
    Index const H = a.dim(-2), W = a.dim(-1);
    Index const planes = a.numel() / (H * W);
    if (at.resample == Resample::nearest) {
      for (Index p = 0; p < planes; ++p) {
        for (Index y = 0; y < 2 * H; ++y) {
          S const *src = g.ptr() + (p * 2 * H + y) * 2 * W;
          S *dst = gin[0]->ptr() + (p * H + y / 2) * W;
          for (Index x = 0; x < 2 * W; ++x) { dst[x / 2] += src[x]; }
        }
      }
    } else {
      std::vector<S> tmp(static_cast<std::size_t>(planes * 2 * H * W), S(0));
      kernels::upsample_linear_axis_adjoint(planes * 2 * H, W, Index{1}, g.ptr(), tmp.data());
      kernels::upsample_linear_axis_adjoint(planes, H, W, tmp.data(), gin[0]->ptr());
    }
    break;
  }
  case Kind::softmax: {
    int const ax = normalize_axis(at.axis, out.shape.size());
    auto const v = detail::axis_view(out.shape, ax);
    for (Index o = 0; o < v.outer; ++o) {
      for (Index i = 0; i < v.inner; ++i) {
        Index const base = o * v.n * v.inner + i;
        S dot = 0;
        for (Index c = 0; c < v.n; ++c) { dot += g[base + c * v.inner] * out[base + c * v.inner]; }
        for (Index c = 0; c < v.n; ++c) {
          Index const idx = base + c * v.inner;
          (*gin[0])[idx] += out[idx] * (g[idx] - dot);
        }
      }
    }
    break;
  }
  case Kind::exp:
  case Kind::log:
  case Kind::sqrt:
  case Kind::abs:
  case Kind::gelu:
  case Kind::power: {
    auto const &a = in(0);
    if (k == Kind::gelu) {
      kernels::gelu_backward(a.numel(), a.ptr(), g.ptr(), gin[0]->ptr());
      break;
    }
    S const p = S(at.alpha);
    for (Index i = 0; i < a.numel(); ++i) {
      S const x = a[i];
      S d;
      switch (k) {
      case Kind::exp: d = out[i]; break;
      case Kind::log: d = S(1) / x; break;
      case Kind::sqrt: d = S(0.5) / out[i]; break;
      case Kind::abs: d = x > 0 ? S(1) : (x < 0 ? S(-1) : S(0)); break;
      case Kind::gelu: d = detail::gelu_grad(x); break;
      default: d = p * std::pow(x, p - S(1)); break;
      }
      (*gin[0])[i] += g[i] * d;
    }
    break;
  }
  case Kind::layernorm: {
    auto const &x = in(0);
    auto const &gam = in(1);
    int const ax = normalize_axis(at.axis, x.shape.size());
    auto const v = detail::axis_view(x.shape, ax);
    Tensor<S> const &stats = n.saved[0];
    S const inv_n = S(1) / S(v.n);
    if (v.inner == 1) {
      kernels::layernorm_rows_backward(v.outer, v.n, x.ptr(), gam.ptr(), stats.ptr(), stats.ptr() + v.outer, g.ptr(),
                                       gin[0] ? gin[0]->ptr() : nullptr, gin[1] ? gin[1]->ptr() : nullptr,
                                       gin[2] ? gin[2]->ptr() : nullptr);
      break;
    }
    std::vector<S> m1(v.inner), m2(v.inner);
    for (Index o = 0; o < v.outer; ++o) {
      S const *src = x.ptr() + o * v.n * v.inner;
      S const *go = g.ptr() + o * v.n * v.inner;
      S const *mean = stats.ptr() + o * v.inner;
      S const *rstd = stats.ptr() + v.outer * v.inner + o * v.inner;
      std::fill(m1.begin(), m1.end(), S(0));
      std::fill(m2.begin(), m2.end(), S(0));
      for (Index c = 0; c < v.n; ++c) {
        S const gc = gam[c];
        for (Index i = 0; i < v.inner; ++i) {
          Index const idx = c * v.inner + i;
          S const xhat = (src[idx] - mean[i]) * rstd[i];
          S const dxhat = go[idx] * gc;
          m1[i] += dxhat;
          m2[i] += dxhat * xhat;
          if (gin[1]) { (*gin[1])[c] += go[idx] * xhat; }
          if (gin[2]) { (*gin[2])[c] += go[idx]; }
        }
      }
      if (gin[0]) {
        S *gx = gin[0]->ptr() + o * v.n * v.inner;
        for (Index c = 0; c < v.n; ++c) {
          S const gc = gam[c];
          for (Index i = 0; i < v.inner; ++i) {
            Index const idx = c * v.inner + i;
            S const xhat = (src[idx] - mean[i]) * rstd[i];
            gx[idx] += rstd[i] * (go[idx] * gc - m1[i] * inv_n - xhat * m2[i] * inv_n);
          }
        }
      }
    }
    break;
  }
  case Kind::mean:
  case Kind::sum: {
    auto const &a = in(0);
    if (at.all) {
      S const gv = k == Kind::mean ? g[0] / S(a.numel()) : g[0];
      for (Index i = 0; i < a.numel(); ++i) { (*gin[0])[i] += gv; }
    } else {
      int const ax = normalize_axis(at.axis, a.shape.size());
      auto const v = detail::axis_view(a.shape, ax);
      S const sc = k == Kind::mean ? S(1) / S(v.n) : S(1);
      for (Index o = 0; o < v.outer; ++o) {
        for (Index c = 0; c < v.n; ++c) {
          S *dst = gin[0]->ptr() + (o * v.n + c) * v.inner;
          S const *src = g.ptr() + o * v.inner;
          for (Index i = 0; i < v.inner; ++i) { dst[i] += sc * src[i]; }
        }
      }
    }
    break;
  }
  case Kind::attention: {
    auto const &q = in(0);
    Index const G = q.shape[0], N = q.shape[1], C = q.shape[2];
    S const *bias = n.inputs.size() == 4 ? in(3).ptr() : nullptr;
    kernels::attention_backward(G, N, C, at.heads, q.ptr(), in(1).ptr(), in(2).ptr(), bias, n.saved[0].ptr(), g.ptr(),
                                gin[0] ? gin[0]->ptr() : nullptr, gin[1] ? gin[1]->ptr() : nullptr,
                                gin[2] ? gin[2]->ptr() : nullptr,
                                (n.inputs.size() == 4 && gin[3]) ? gin[3]->ptr() : nullptr);
    break;
  }
  case Kind::gather: {
    for (std::size_t i = 0; i < at.indices.size(); ++i) { (*gin[0])[at.indices[i]] += g.data[i]; }
    break;
  }
  case Kind::linear: {
    auto const &w = in(1);
    Index const K = w.shape[0], N = w.shape[1];
    auto p = [&](std::size_t i) { return i < gin.size() && gin[i] ? gin[i]->ptr() : nullptr; };
    kernels::linear_backward(in(0).numel() / std::max<Index>(K, 1), K, N, in(0).ptr(), w.ptr(), g.ptr(), p(0), p(1),
                             p(2));
    break;
  }
  case Kind::mlp: {
    auto const &x = in(0);
    Index const C = x.shape.back(), E = in(3).shape[1];
    auto p = [&](std::size_t i) { return gin[i] ? gin[i]->ptr() : nullptr; };
    kernels::token_mlp_backward(x.numel() / std::max<Index>(C, 1), C, E, x.ptr(), in(1).ptr(), in(2).ptr(),
                                in(3).ptr(), in(4).ptr(), in(5).ptr(), S(at.eps), g.ptr(), p(0), p(1), p(2), p(3),
                                p(4), p(5), p(6));
    break;
  }
  case Kind::leaf: break;
  }
}

template <class S>
GradientMap<S> Tape<S>::backward(Var<S> output) const
{
  if (output.tape != this) { throw std::invalid_argument("backward: output belongs to another tape"); }
  Tensor<S> const &ov = nodes_.at(output.id).value;
  if (ov.numel() != 1) { throw ShapeError("backward: output must be scalar, got shape " + to_string(ov.shape)); }

  std::vector<Tensor<S>> grads(output.id + 1);
  grads[output.id] = Tensor<S>(ov.shape, S(1));
  std::vector<Tensor<S> *> gin;
  for (NodeId i = output.id + 1; i-- > 0;) {
    Node const &n = nodes_[i];
    if (n.kind == Kind::leaf || !n.requires_grad || grads[i].data.empty()) { continue; }
    gin.assign(n.inputs.size(), nullptr);
    bool any = false;
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      NodeId const src = n.inputs[j];
      if (!nodes_[src].requires_grad) { continue; }
      if (grads[src].data.empty()) { grads[src] = Tensor<S>(nodes_[src].value.shape); }
      gin[j] = &grads[src];
      any = true;
    }
    if (any) { backward_node(n, grads[i], gin); }
    grads[i] = Tensor<S>();
  }

  GradientMap<S> result;
  for (NodeId leaf : leaves_) {
    if (leaf < grads.size() && !grads[leaf].data.empty()) {
      result.emplace(leaf, std::move(grads[leaf]));
    } else {
      result.emplace(leaf, Tensor<S>(nodes_[leaf].value.shape));
    }
  }
  return result;
}

} // namespace imformer
