#pragma once

// Attention (T, L, G) and convolution (C2, C3) modules on [T,C,H,W] activations, and blocks composed from them.

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "block_config.hpp"
#include "ops.hpp"
#include "params.hpp"

namespace imformer {

struct AttentionConfig
{
  Index channels = 32;
  Index heads = 4;
  Index window = 8; // L: window side
  Index stride = 8; // G: grid cell side
  Index mlp_ratio = 2;
  bool relative_bias = false; // learned per-head offset bias, L only
};

struct AttentionParams
{
  ModuleKind kind = ModuleKind::temporal;
  AttentionConfig cfg;
  ParamId ln1_g, ln1_b;
  ParamId wq, bq, wk, wv, bv, wo, bo;
  ParamId ln2_g, ln2_b;
  ParamId w1, b1, w2, b2;
  std::optional<ParamId> rel_bias; // [heads, (2w-1)^2]
};

struct ConvParams
{
  ModuleKind kind = ModuleKind::conv2d;
  Index channels = 0;
  Index kernel = 3;
  ParamId w, b, ln_g, ln_b;
};

using ModuleParams = std::variant<AttentionParams, ConvParams>;

struct BlockParams
{
  BlockConfig cfg;
  std::vector<ModuleParams> modules;
};

inline void validate(AttentionConfig const &c)
{
  if (c.channels < 1 || c.heads < 1 || c.channels % c.heads) {
    throw std::invalid_argument("channels " + std::to_string(c.channels) + " not divisible by heads " +
                                std::to_string(c.heads));
  }
  if (c.window < 1 || c.stride < 1 || c.mlp_ratio < 1) {
    throw std::invalid_argument("window, stride, mlp_ratio must be >= 1");
  }
}

template <class S>
AttentionParams make_attention_params(ParamStore<S> &store, std::string const &prefix, ModuleKind kind,
                                      AttentionConfig const &cfg, Rng &rng)
{
  if (!is_attention(kind)) { throw std::invalid_argument("not an attention module: " + std::string(symbol(kind))); }
  validate(cfg);
  Index const C = cfg.channels, E = cfg.mlp_ratio * C;
  double const sc = 1.0 / std::sqrt(double(C));
  AttentionParams p;
  p.kind = kind;
  p.cfg = cfg;
  p.ln1_g = store.ones(prefix + ".ln1.g", {C});
  p.ln1_b = store.zeros(prefix + ".ln1.b", {C});
  p.wq = store.normal(prefix + ".wq", {C, C}, sc, rng);
  p.bq = store.zeros(prefix + ".bq", {C});
  p.wk = store.normal(prefix + ".wk", {C, C}, sc, rng);
  p.wv = store.normal(prefix + ".wv", {C, C}, sc, rng);
  p.bv = store.zeros(prefix + ".bv", {C});
  p.wo = store.normal(prefix + ".wo", {C, C}, 0.5 * sc, rng);
  p.bo = store.zeros(prefix + ".bo", {C});
  p.ln2_g = store.ones(prefix + ".ln2.g", {C});
  p.ln2_b = store.zeros(prefix + ".ln2.b", {C});
  p.w1 = store.normal(prefix + ".w1", {C, E}, sc, rng);
  p.b1 = store.zeros(prefix + ".b1", {E});
  p.w2 = store.normal(prefix + ".w2", {E, C}, 0.5 / std::sqrt(double(E)), rng);
  p.b2 = store.zeros(prefix + ".b2", {C});
  if (cfg.relative_bias && kind == ModuleKind::local) {
    Index const span = 2 * cfg.window - 1;
    p.rel_bias = store.zeros(prefix + ".rel_bias", {cfg.heads, span * span});
  }
  return p;
}

template <class S>
ConvParams make_conv_params(ParamStore<S> &store, std::string const &prefix, ModuleKind kind, Index channels, Rng &rng,
                            Index kernel = 3)
{
  if (kind != ModuleKind::conv2d && kind != ModuleKind::conv3d) {
    throw std::invalid_argument("not a convolution module: " + std::string(symbol(kind)));
  }
  ConvParams p;
  p.kind = kind;
  p.channels = channels;
  p.kernel = kernel;
  Shape ws = kind == ModuleKind::conv2d ? Shape{channels, channels, kernel, kernel}
                                        : Shape{channels, channels, kernel, kernel, kernel};
  double const fan_in = double(numel(ws) / channels);
  p.w = store.normal(prefix + ".w", ws, std::sqrt(2.0 / fan_in), rng);
  p.b = store.zeros(prefix + ".b", {channels});
  p.ln_g = store.ones(prefix + ".ln.g", {channels});
  p.ln_b = store.zeros(prefix + ".ln.b", {channels});
  return p;
}

template <class S>
BlockParams make_block_params(ParamStore<S> &store, std::string const &prefix, BlockConfig const &cfg,
                              AttentionConfig const &acfg, Rng &rng)
{
  BlockParams bp;
  bp.cfg = cfg;
  for (std::size_t i = 0; i < cfg.modules.size(); ++i) {
    ModuleKind const k = cfg.modules[i];
    std::string const name = prefix + "." + std::to_string(i) + symbol(k);
    if (is_attention(k)) {
      bp.modules.emplace_back(make_attention_params(store, name, k, acfg, rng));
    } else {
      bp.modules.emplace_back(make_conv_params(store, name, k, acfg.channels, rng));
    }
  }
  return bp;
}

/// Closed-form parameter count of one attention module: 8C^2 + 10C at MLP ratio 2.
inline Index attention_param_count(AttentionConfig const &c, ModuleKind kind)
{
  Index const C = c.channels, E = c.mlp_ratio * C;
  Index n = 4 * C + 4 * C * C + 3 * C + 2 * C * E + E + C;
  if (c.relative_bias && kind == ModuleKind::local) { n += c.heads * (2 * c.window - 1) * (2 * c.window - 1); }
  return n;
}

inline Index conv_param_count(ModuleKind kind, Index C, Index kernel = 3)
{
  Index const taps = kind == ModuleKind::conv2d ? kernel * kernel : kernel * kernel * kernel;
  return C * C * taps + 3 * C;
}

namespace detail {

/// Pre-norm transformer sub-block on token groups [G,N,C].
template <class S>
Var<S> transformer_sublayer(Var<S> x, AttentionParams const &p, Bound<S> const &P, std::optional<Var<S>> bias)
{
  using namespace ops;
  auto h = layernorm(x, P[p.ln1_g], P[p.ln1_b], -1);
  auto q = linear(h, P[p.wq], P[p.bq]);
  auto k = linear(h, P[p.wk]);
  auto v = linear(h, P[p.wv], P[p.bv]);
  auto a = bias ? attention(q, k, v, *bias, p.cfg.heads) : attention(q, k, v, p.cfg.heads);
  x = x + linear(a, P[p.wo], P[p.bo]);
  return token_mlp(x, P[p.ln2_g], P[p.ln2_b], P[p.w1], P[p.b1], P[p.w2], P[p.b2]);
}

template <class S>
void check_input(Var<S> x, AttentionParams const &p, ModuleKind expected)
{
  if (p.kind != expected) {
    throw std::invalid_argument(std::string("parameters are for ") + symbol(p.kind) + ", module is " + symbol(expected));
  }
  auto const &s = x.shape();
  if (s.size() != 4) { throw ShapeError("attention expects [T,C,H,W], got " + to_string(s)); }
  if (s[1] != p.cfg.channels) {
    throw ShapeError("attention expects " + std::to_string(p.cfg.channels) + " channels, got " + to_string(s));
  }
  if (s[1] % p.cfg.heads) { throw ShapeError("channels not divisible by heads"); }
}

// Reflect-pads H, W up to multiples of (ch, cw); returns the padded tensor.
template <class S>
Var<S> pad_to_multiple(Var<S> x, Index ch, Index cw)
{
  Index const H = x.shape()[2], W = x.shape()[3];
  Index const ph = (ch - H % ch) % ch, pw = (cw - W % cw) % cw;
  if (ph == 0 && pw == 0) { return x; }
  return ops::pad(x, {0, ph, 0, pw}, PadMode::reflect);
}

template <class S>
Var<S> crop(Var<S> x, Index H, Index W)
{
  if (x.shape()[2] != H) { x = ops::slice(x, 2, 0, H); }
  if (x.shape()[3] != W) { x = ops::slice(x, 3, 0, W); }
  return x;
}

// Relative position bias [heads, N, N] for a wh x ww window from a table laid out for side `w`.
template <class S>
Var<S> relative_bias(Var<S> table, Index heads, Index w, Index wh, Index ww)
{
  Index const span = 2 * w - 1, N = wh * ww;
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(heads * N * N));
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < N; ++i) {
      for (Index j = 0; j < N; ++j) {
        Index const dy = i / ww - j / ww + w - 1;
        Index const dx = i % ww - j % ww + w - 1;
        idx.push_back(h * span * span + dy * span + dx);
      }
    }
  }
  return ops::gather(table, std::move(idx), Shape{heads, N, N});
}

} // namespace detail

/// Attention across frames at every spatial position.
template <class S>
Var<S> temporal_attention(Var<S> x, AttentionParams const &p, Bound<S> const &P)
{
  using namespace ops;
  detail::check_input(x, p, ModuleKind::temporal);
  Shape const s = x.shape();
  Index const T = s[0], C = s[1], H = s[2], W = s[3];
  auto tok = reshape(transpose(x, {2, 3, 0, 1}), {H * W, T, C});
  auto y = detail::transformer_sublayer(tok, p, P, std::optional<Var<S>>{});
  return transpose(reshape(y, {H, W, T, C}), {2, 3, 0, 1});
}

/// Attention within non-overlapping w x w windows of each frame.
template <class S>
Var<S> local_attention(Var<S> x, AttentionParams const &p, Bound<S> const &P)
{
  using namespace ops;
  detail::check_input(x, p, ModuleKind::local);
  Shape const s = x.shape();
  Index const T = s[0], C = s[1], H = s[2], W = s[3];
  Index const wh = std::min(p.cfg.window, H), ww = std::min(p.cfg.window, W);
  auto xp = detail::pad_to_multiple(x, wh, ww);
  Index const Hp = xp.shape()[2], Wp = xp.shape()[3], nh = Hp / wh, nw = Wp / ww;
  auto tok = reshape(transpose(reshape(xp, {T, C, nh, wh, nw, ww}), {0, 2, 4, 3, 5, 1}), {T * nh * nw, wh * ww, C});
  std::optional<Var<S>> bias;
  if (p.rel_bias) { bias = detail::relative_bias(P[*p.rel_bias], p.cfg.heads, p.cfg.window, wh, ww); }
  auto y = detail::transformer_sublayer(tok, p, P, bias);
  y = reshape(transpose(reshape(y, {T, nh, nw, wh, ww, C}), {0, 5, 1, 3, 2, 4}), {T, C, Hp, Wp});
  return detail::crop(y, H, W);
}

/// Grid attention: tokens sharing an offset inside the s x s cells form one group.
template <class S>
Var<S> global_attention(Var<S> x, AttentionParams const &p, Bound<S> const &P)
{
  using namespace ops;
  detail::check_input(x, p, ModuleKind::global);
  Shape const s = x.shape();
  Index const T = s[0], C = s[1], H = s[2], W = s[3];
  Index const sh = std::min(p.cfg.stride, H), sw = std::min(p.cfg.stride, W);
  auto xp = detail::pad_to_multiple(x, sh, sw);
  Index const Hp = xp.shape()[2], Wp = xp.shape()[3], nh = Hp / sh, nw = Wp / sw;
  auto tok = reshape(transpose(reshape(xp, {T, C, nh, sh, nw, sw}), {0, 3, 5, 2, 4, 1}), {T * sh * sw, nh * nw, C});
  auto y = detail::transformer_sublayer(tok, p, P, std::optional<Var<S>>{});
  y = reshape(transpose(reshape(y, {T, sh, sw, nh, nw, C}), {0, 5, 3, 1, 4, 2}), {T, C, Hp, Wp});
  return detail::crop(y, H, W);
}

template <class S>
Var<S> attention_module(Var<S> x, AttentionParams const &p, Bound<S> const &P)
{
  switch (p.kind) {
  case ModuleKind::temporal: return temporal_attention(x, p, P);
  case ModuleKind::local: return local_attention(x, p, P);
  case ModuleKind::global: return global_attention(x, p, P);
  default: throw std::invalid_argument("attention_module: bad kind");
  }
}

/// conv -> gelu -> channel layernorm. `conv_only` skips activation and norm.
template <class S>
Var<S> conv_module(Var<S> x, ConvParams const &p, Bound<S> const &P, bool conv_only = false)
{
  using namespace ops;
  if (x.shape().size() != 4 || x.shape()[1] != p.channels) {
    throw ShapeError("conv module expects [T," + std::to_string(p.channels) + ",H,W], got " + to_string(x.shape()));
  }
  auto y = p.kind == ModuleKind::conv2d ? conv2d(x, P[p.w], P[p.b]) : conv3d(x, P[p.w], P[p.b]);
  if (conv_only) { return y; }
  return layernorm(ops::gelu(y), P[p.ln_g], P[p.ln_b], 1);
}

template <class S>
Var<S> run_module(Var<S> x, ModuleParams const &m, Bound<S> const &P)
{
  if (auto const *a = std::get_if<AttentionParams>(&m)) { return attention_module(x, *a, P); }
  return conv_module(x, std::get<ConvParams>(m), P);
}

template <class S>
Var<S> run_block(Var<S> x, BlockParams const &bp, Bound<S> const &P)
{
  if (bp.modules.size() != bp.cfg.modules.size()) {
    throw std::invalid_argument("block parameters do not match config " + format(bp.cfg));
  }
  for (std::size_t i = 0; i < bp.modules.size(); ++i) {
    ModuleKind const k = std::visit([](auto const &m) { return m.kind; }, bp.modules[i]);
    if (k != bp.cfg.modules[i]) {
      throw std::invalid_argument("module " + std::to_string(i) + " of " + format(bp.cfg) + " has " + symbol(k) +
                                  " parameters");
    }
    x = run_module(x, bp.modules[i], P);
  }
  return x;
}

} // namespace imformer
