#pragma once

// Unet- and HRnet-style imformer networks on [T, 3, H, W] inputs (real, imag, g) with a long-term skip.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "blocks.hpp"

namespace imformer {

enum class Arch
{
  unet,
  hrnet
};

inline char const *arch_name(Arch a) { return a == Arch::unet ? "unet" : "hrnet"; }

inline Arch parse_arch(std::string const &s)
{
  if (s == "unet") { return Arch::unet; }
  if (s == "hrnet") { return Arch::hrnet; }
  throw std::invalid_argument("unknown architecture '" + s + "' (expected unet or hrnet)");
}

struct ModelConfig
{
  Arch kind = Arch::unet;
  std::vector<BlockConfig> blocks = parse_level_configs("TLG,TLG"); // one per resolution level
  Index channels = 16;
  Index heads = 4;
  Index window = 8;
  Index stride = 8;
  Index mlp_ratio = 2;
  bool relative_bias = false;
  Index in_channels = 3;
  Index out_channels = 2;
  Index stages = 2;           // hrnet only
  bool fusion = true;         // hrnet only
  double input_scale = 1.0 / 64; // applied to the complex channels before the stem

  Index levels() const { return static_cast<Index>(blocks.size()); }

  AttentionConfig attention() const
  {
    AttentionConfig a;
    a.channels = channels;
    a.heads = heads;
    a.window = window;
    a.stride = stride;
    a.mlp_ratio = mlp_ratio;
    a.relative_bias = relative_bias;
    return a;
  }

  void validate() const
  {
    if (blocks.empty()) { throw std::invalid_argument("model needs at least one level"); }
    if (in_channels != 3 || out_channels != 2) { throw std::invalid_argument("model maps 3 input channels to 2"); }
    if (kind == Arch::hrnet && stages < 1) { throw std::invalid_argument("hrnet needs at least one stage"); }
    if (!(input_scale > 0)) { throw std::invalid_argument("input_scale must be positive"); }
    imformer::validate(attention());
  }
};

inline nlohmann::json to_json(ModelConfig const &c)
{
  return {{"arch", arch_name(c.kind)},
          {"blocks", format_levels(c.blocks)},
          {"channels", c.channels},
          {"heads", c.heads},
          {"window", c.window},
          {"stride", c.stride},
          {"mlp_ratio", c.mlp_ratio},
          {"relative_bias", c.relative_bias},
          {"stages", c.stages},
          {"fusion", c.fusion},
          {"input_scale", c.input_scale}};
}

inline ModelConfig model_config_from_json(nlohmann::json const &j)
{
  ModelConfig c;
  c.kind = parse_arch(j.at("arch").get<std::string>());
  c.blocks = parse_level_configs(j.at("blocks").get<std::string>());
  c.channels = j.at("channels").get<Index>();
  c.heads = j.at("heads").get<Index>();
  c.window = j.at("window").get<Index>();
  c.stride = j.at("stride").get<Index>();
  c.mlp_ratio = j.at("mlp_ratio").get<Index>();
  c.relative_bias = j.at("relative_bias").get<bool>();
  c.stages = j.at("stages").get<Index>();
  c.fusion = j.at("fusion").get<bool>();
  c.input_scale = j.at("input_scale").get<double>();
  c.validate();
  return c;
}

struct ConvId
{
  ParamId w, b;
};

struct UnetLayout
{
  ConvId stem;
  std::vector<BlockParams> encoder; // one per level
  std::vector<ConvId> down;         // level l-1 -> l
  std::vector<ConvId> up;           // level l+1 -> l
  std::vector<ConvId> merge;        // 1x1, 2C -> C, per decoder level
  std::vector<BlockParams> decoder; // levels 0 .. L-2
  ConvId head;
};

struct HrnetLayout
{
  ConvId stem;
  std::vector<ConvId> down;                            // creates stream l from stream l-1
  std::vector<std::vector<BlockParams>> stages;        // [stage][stream]
  std::vector<std::vector<std::vector<ParamId>>> fuse; // [stage][to][from], 1x1 C -> C (unused on diagonal)
  std::vector<ParamId> final_fuse;                     // stream l -> full resolution, index l-1
  ConvId head;
};

template <class S>
struct Model
{
  ModelConfig cfg;
  ParamStore<S> params;
  UnetLayout unet;
  HrnetLayout hrnet;

  template <class U>
  Model<U> cast() const
  {
    return {cfg, params.template cast<U>(), unet, hrnet};
  }
};

namespace detail {

template <class S>
ConvId make_conv(ParamStore<S> &st, std::string const &name, Index co, Index ci, Index k, Rng &rng, bool zero = false)
{
  ConvId c;
  Shape const ws{co, ci, k, k};
  c.w = zero ? st.zeros(name + ".w", ws) : st.normal(name + ".w", ws, std::sqrt(2.0 / double(ci * k * k)), rng);
  c.b = st.zeros(name + ".b", {co});
  return c;
}

template <class S>
Var<S> conv(Var<S> x, ConvId c, Bound<S> const &P)
{
  return ops::conv2d(x, P[c.w], P[c.b]);
}

template <class S>
Var<S> resize_levels(Var<S> x, Index from, Index to)
{
  for (; from < to; ++from) { x = ops::downsample2x(x); }
  for (; from > to; --from) { x = ops::upsample2x(x, Resample::bilinear); }
  return x;
}

} // namespace detail

template <class S>
Model<S> build_model(ModelConfig const &cfg, std::uint64_t seed)
{
  cfg.validate();
  Model<S> m;
  m.cfg = cfg;
  Rng rng(seed);
  auto &st = m.params;
  Index const C = cfg.channels, L = cfg.levels();
  auto const acfg = cfg.attention();
  auto lvl = [](char const *p, Index l) { return std::string(p) + std::to_string(l); };

  if (cfg.kind == Arch::unet) {
    auto &u = m.unet;
    u.stem = detail::make_conv(st, "stem", C, cfg.in_channels, 3, rng);
    for (Index l = 0; l < L; ++l) {
      if (l > 0) { u.down.push_back(detail::make_conv(st, lvl("down", l), C, C, 3, rng)); }
      u.encoder.push_back(make_block_params(st, lvl("enc", l), cfg.blocks[l], acfg, rng));
    }
    for (Index l = L - 2; l >= 0; --l) {
      u.up.push_back(detail::make_conv(st, lvl("up", l), C, C, 3, rng));
      u.merge.push_back(detail::make_conv(st, lvl("merge", l), C, 2 * C, 1, rng));
      u.decoder.push_back(make_block_params(st, lvl("dec", l), cfg.blocks[l], acfg, rng));
    }
    u.head = detail::make_conv(st, "head", cfg.out_channels, C, 3, rng, true);
  } else {
    auto &h = m.hrnet;
    h.stem = detail::make_conv(st, "stem", C, cfg.in_channels, 3, rng);
    for (Index l = 1; l < L; ++l) { h.down.push_back(detail::make_conv(st, lvl("down", l), C, C, 3, rng)); }
    for (Index s = 0; s < cfg.stages; ++s) {
      h.stages.emplace_back();
      for (Index l = 0; l < L; ++l) {
        h.stages.back().push_back(make_block_params(st, "s" + std::to_string(s) + lvl(".b", l), cfg.blocks[l], acfg, rng));
      }
      h.fuse.emplace_back(L, std::vector<ParamId>(L, ParamId(-1)));
      if (cfg.fusion && s + 1 < cfg.stages) {
        for (Index to = 0; to < L; ++to) {
          for (Index from = 0; from < L; ++from) {
            if (from == to) { continue; }
            std::string const name = "s" + std::to_string(s) + ".fuse" + std::to_string(from) + "to" + std::to_string(to);
            h.fuse[s][to][from] = st.normal(name, {C, C, 1, 1}, std::sqrt(1.0 / double(C)), rng);
          }
        }
      }
    }
    for (Index l = 1; cfg.fusion && l < L; ++l) {
      h.final_fuse.push_back(st.normal(lvl("final_fuse", l), {C, C, 1, 1}, std::sqrt(1.0 / double(C)), rng));
    }
    h.head = detail::make_conv(st, "head", cfg.out_channels, C, 3, rng, true);
  }
  return m;
}

inline Index count_parameters(ModelConfig const &cfg)
{
  Index const C = cfg.channels, L = cfg.levels();
  auto const acfg = cfg.attention();
  auto block = [&](BlockConfig const &b) {
    Index n = 0;
    for (auto k : b.modules) { n += is_attention(k) ? attention_param_count(acfg, k) : conv_param_count(k, C); }
    return n;
  };
  auto conv = [](Index co, Index ci, Index k) { return co * ci * k * k + co; };
  Index n = conv(C, cfg.in_channels, 3) + conv(cfg.out_channels, C, 3);
  if (cfg.kind == Arch::unet) {
    for (Index l = 0; l < L; ++l) { n += block(cfg.blocks[l]); }
    for (Index l = 0; l + 1 < L; ++l) {
      n += conv(C, C, 3) /*down*/ + conv(C, C, 3) /*up*/ + conv(C, 2 * C, 1) + block(cfg.blocks[l]);
    }
  } else {
    n += (L - 1) * conv(C, C, 3);
    for (Index l = 0; l < L; ++l) { n += cfg.stages * block(cfg.blocks[l]); }
    if (cfg.fusion) { n += (cfg.stages - 1) * L * (L - 1) * C * C + (L - 1) * C * C; }
  }
  return n;
}

template <class S>
Index count_parameters(Model<S> const &m)
{
  return m.params.count();
}

namespace detail {

// Reflect-pads H, W so that every level halves cleanly; returns the padded input.
template <class S>
Var<S> pad_for_levels(Var<S> x, Index levels)
{
  Index const m = Index(1) << (levels - 1);
  return pad_to_multiple(x, m, m);
}

template <class S>
void check_model_input(Var<S> x, ModelConfig const &cfg)
{
  auto const &s = x.shape();
  if (s.size() != 4 || s[1] != cfg.in_channels) {
    throw ShapeError("model expects [T," + std::to_string(cfg.in_channels) + ",H,W], got " + to_string(s));
  }
  Index const m = Index(1) << (cfg.levels() - 1);
  if (s[2] < m || s[3] < m) { throw ShapeError("input too small for " + std::to_string(cfg.levels()) + " levels"); }
}

// Scales the complex channels and appends g unchanged.
template <class S>
Var<S> scale_input(Var<S> x, double scale)
{
  auto z = ops::scale(ops::slice(x, 1, 0, 2), scale);
  return ops::concat(std::vector<Var<S>>{z, ops::slice(x, 1, 2, 3)}, 1);
}

// head / scale + complex(x), cropped to the original size.
template <class S>
Var<S> long_skip(Var<S> head, Var<S> x, double scale)
{
  auto r = crop(head, x.shape()[2], x.shape()[3]);
  return ops::add(ops::scale(r, 1.0 / scale), ops::slice(x, 1, 0, 2));
}

} // namespace detail

template <class S>
Var<S> forward_unet(Model<S> const &m, Var<S> x, Bound<S> const &P)
{
  using namespace ops;
  auto const &cfg = m.cfg;
  auto const &u = m.unet;
  if (cfg.kind != Arch::unet) {
    throw std::invalid_argument("forward_unet on a " + std::string(arch_name(cfg.kind)) + " model");
  }
  detail::check_model_input(x, cfg);
  Index const L = cfg.levels();
  auto h = detail::conv(detail::pad_for_levels(detail::scale_input(x, cfg.input_scale), L), u.stem, P);
  std::vector<Var<S>> enc;
  for (Index l = 0; l < L; ++l) {
    if (l > 0) { h = detail::conv(downsample2x(h), u.down[l - 1], P); }
    h = run_block(h, u.encoder[l], P);
    enc.push_back(h);
  }
  for (Index i = 0, l = L - 2; l >= 0; --l, ++i) {
    auto up = detail::conv(upsample2x(h, Resample::nearest), u.up[i], P);
    h = detail::conv(concat(std::vector<Var<S>>{up, enc[l]}, 1), u.merge[i], P);
    h = run_block(h, u.decoder[i], P);
  }
  return detail::long_skip(detail::conv(h, u.head, P), x, cfg.input_scale);
}

template <class S>
Var<S> forward_hrnet(Model<S> const &m, Var<S> x, Bound<S> const &P)
{
  using namespace ops;
  auto const &cfg = m.cfg;
  auto const &hr = m.hrnet;
  if (cfg.kind != Arch::hrnet) {
    throw std::invalid_argument("forward_hrnet on a " + std::string(arch_name(cfg.kind)) + " model");
  }
  detail::check_model_input(x, cfg);
  Index const L = cfg.levels();
  std::vector<Var<S>> y;
  y.push_back(detail::conv(detail::pad_for_levels(detail::scale_input(x, cfg.input_scale), L), hr.stem, P));
  for (Index l = 1; l < L; ++l) { y.push_back(detail::conv(downsample2x(y.back()), hr.down[l - 1], P)); }
  for (Index s = 0; s < cfg.stages; ++s) {
    for (Index l = 0; l < L; ++l) { y[l] = run_block(y[l], hr.stages[s][l], P); }
    if (s + 1 == cfg.stages || !cfg.fusion) { continue; }
    std::vector<Var<S>> fused = y;
    for (Index to = 0; to < L; ++to) {
      for (Index from = 0; from < L; ++from) {
        if (from == to) { continue; }
        fused[to] = fused[to] + conv2d(detail::resize_levels(y[from], from, to), P[hr.fuse[s][to][from]]);
      }
    }
    y = std::move(fused);
  }
  auto top = y[0];
  if (cfg.fusion) {
    for (Index l = 1; l < L; ++l) { top = top + conv2d(detail::resize_levels(y[l], l, 0), P[hr.final_fuse[l - 1]]); }
  }
  return detail::long_skip(detail::conv(top, hr.head, P), x, cfg.input_scale);
}

template <class S>
Var<S> forward(Model<S> const &m, Var<S> x, Bound<S> const &P)
{
  return m.cfg.kind == Arch::unet ? forward_unet(m, x, P) : forward_hrnet(m, x, P);
}

/// Inference without gradients.
template <class S>
Tensor<S> predict(Model<S> const &m, Tensor<S> const &x)
{
  Tape<S> tape;
  auto P = Bound<S>::bind(tape, m.params, false);
  return forward(m, tape.constant(x), P).value();
}

} // namespace imformer
