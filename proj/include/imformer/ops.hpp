#pragma once

#include "autodiff.hpp"

namespace imformer::ops {

template <class S>
Var<S> unary(Kind k, Var<S> x, Attrs a = {})
{
  return x.tape->record(k, {x}, a);
}

template <class S> Var<S> add(Var<S> a, Var<S> b) { return a.tape->record(Kind::add, {a, b}); }
template <class S> Var<S> sub(Var<S> a, Var<S> b) { return a.tape->record(Kind::sub, {a, b}); }
template <class S> Var<S> mul(Var<S> a, Var<S> b) { return a.tape->record(Kind::mul, {a, b}); }
template <class S> Var<S> div(Var<S> a, Var<S> b) { return a.tape->record(Kind::div, {a, b}); }

template <class S>
Var<S> affine(Var<S> x, double scale, double offset = 0.0)
{
  Attrs a;
  a.alpha = scale;
  a.beta = offset;
  return unary(Kind::affine, x, a);
}

template <class S> Var<S> scale(Var<S> x, double s) { return affine(x, s, 0.0); }

template <class S>
Var<S> matmul(Var<S> a, Var<S> b, bool trans_a = false, bool trans_b = false)
{
  Attrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return a.tape->record(Kind::matmul, {a, b}, at);
}

template <class S>
Var<S> transpose(Var<S> x, std::vector<int> perm = {})
{
  Attrs a;
  a.perm = std::move(perm);
  return unary(Kind::transpose, x, a);
}

template <class S>
Var<S> reshape(Var<S> x, Shape shape)
{
  Attrs a;
  a.shape = std::move(shape);
  return unary(Kind::reshape, x, a);
}

template <class S>
Var<S> concat(std::vector<Var<S>> const &xs, Index axis)
{
  Attrs a;
  a.axis = axis;
  return xs.at(0).tape->record(Kind::concat, xs, a);
}

template <class S>
Var<S> slice(Var<S> x, Index axis, Index start, Index stop)
{
  Attrs a;
  a.axis = axis;
  a.start = start;
  a.stop = stop;
  return unary(Kind::slice, x, a);
}

template <class S>
Var<S> pad(Var<S> x, std::array<Index, 4> pads, PadMode mode)
{
  Attrs a;
  a.pads = pads;
  a.pad_mode = mode;
  return unary(Kind::pad, x, a);
}

template <class S> Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b) { return x.tape->record(Kind::conv2d, {x, w, b}); }
template <class S> Var<S> conv2d(Var<S> x, Var<S> w) { return x.tape->record(Kind::conv2d, {x, w}); }
template <class S> Var<S> conv3d(Var<S> x, Var<S> w, Var<S> b) { return x.tape->record(Kind::conv3d, {x, w, b}); }
template <class S> Var<S> conv3d(Var<S> x, Var<S> w) { return x.tape->record(Kind::conv3d, {x, w}); }

template <class S> Var<S> downsample2x(Var<S> x) { return unary(Kind::downsample2x, x); }

template <class S>
Var<S> upsample2x(Var<S> x, Resample mode = Resample::nearest)
{
  Attrs a;
  a.resample = mode;
  return unary(Kind::upsample2x, x, a);
}

template <class S>
Var<S> softmax(Var<S> x, Index axis = -1)
{
  Attrs a;
  a.axis = axis;
  return unary(Kind::softmax, x, a);
}

template <class S> Var<S> exp(Var<S> x) { return unary(Kind::exp, x); }
template <class S> Var<S> log(Var<S> x) { return unary(Kind::log, x); }
template <class S> Var<S> sqrt(Var<S> x) { return unary(Kind::sqrt, x); }
template <class S> Var<S> abs(Var<S> x) { return unary(Kind::abs, x); }
template <class S> Var<S> gelu(Var<S> x) { return unary(Kind::gelu, x); }

template <class S>
Var<S> power(Var<S> x, double p)
{
  Attrs a;
  a.alpha = p;
  return unary(Kind::power, x, a);
}

template <class S>
Var<S> layernorm(Var<S> x, Var<S> gain, Var<S> bias, Index axis = -1, double eps = 1e-5)
{
  Attrs a;
  a.axis = axis;
  a.eps = eps;
  return x.tape->record(Kind::layernorm, {x, gain, bias}, a);
}

template <class S>
Var<S> mean(Var<S> x)
{
  Attrs a;
  a.all = true;
  return unary(Kind::mean, x, a);
}

template <class S>
Var<S> mean(Var<S> x, Index axis)
{
  Attrs a;
  a.axis = axis;
  return unary(Kind::mean, x, a);
}

template <class S>
Var<S> sum(Var<S> x)
{
  Attrs a;
  a.all = true;
  return unary(Kind::sum, x, a);
}

template <class S>
Var<S> sum(Var<S> x, Index axis)
{
  Attrs a;
  a.axis = axis;
  return unary(Kind::sum, x, a);
}

template <class S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, Index heads)
{
  Attrs a;
  a.heads = heads;
  return q.tape->record(Kind::attention, {q, k, v}, a);
}

template <class S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, Var<S> bias, Index heads)
{
  Attrs a;
  a.heads = heads;
  return q.tape->record(Kind::attention, {q, k, v, bias}, a);
}

/// x W (+ b) over the last axis; W is [K,N].
template <class S>
Var<S> linear(Var<S> x, Var<S> w)
{
  return x.tape->record(Kind::linear, {x, w});
}

template <class S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b)
{
  return x.tape->record(Kind::linear, {x, w, b});
}

/// x + gelu(layernorm(x) w1 + b1) w2 + b2 over the last axis.
template <class S>
Var<S> token_mlp(Var<S> x, Var<S> ln_gain, Var<S> ln_bias, Var<S> w1, Var<S> b1, Var<S> w2, Var<S> b2,
                 double eps = 1e-5)
{
  Attrs a;
  a.eps = eps;
  return x.tape->record(Kind::mlp, {x, ln_gain, ln_bias, w1, b1, w2, b2}, a);
}

template <class S>
Var<S> gather(Var<S> table, std::vector<Index> indices, Shape shape)
{
  Attrs a;
  a.indices = std::move(indices);
  a.shape = std::move(shape);
  return unary(Kind::gather, table, a);
}

template <class S> Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <class S> Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <class S> Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <class S> Var<S> operator/(Var<S> a, Var<S> b) { return div(a, b); }

} // namespace imformer::ops
