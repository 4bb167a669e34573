#pragma once

// Synthetic cine phantoms, patch sampling, optimisers, the training loop, tiled inference and evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "model.hpp"
#include "noise.hpp"
#include "objectives.hpp"
#include "rng.hpp"

namespace imformer {

// ---------------------------------------------------------------- phantoms

struct PhantomSpec
{
  Index height = 64, width = 64, frames = 8;
  Index n_ellipses = 6;
  double motion = 0.08;     // fractional radius pulsation over the cardiac cycle
  double phase_roll = 1.0;  // peak smooth phase (radians) across the field of view
  double intensity = kDefaultIntensityScale;
  bool volume = false;      // frames are slices through ellipsoids instead of cine phases
  std::uint64_t seed = 0;

  void validate() const
  {
    if (height < 8 || width < 8 || frames < 1) { throw std::invalid_argument("phantom needs H,W >= 8 and T >= 1"); }
    if (n_ellipses < 1) { throw std::invalid_argument("phantom needs at least one ellipse"); }
    if (motion < 0 || motion >= 1) { throw std::invalid_argument("motion amplitude must be in [0,1)"); }
    if (!(intensity > 0)) { throw std::invalid_argument("intensity scale must be positive"); }
  }
};

namespace detail {

struct Ellipse
{
  double cy, cx, ry, rx, angle, value, pulse, phase, zc, rz;
};

} // namespace detail

/// Noise-free smooth ellipse phantom; peak magnitude is 0.9 of the intensity scale.
inline ComplexImage gen_phantom(PhantomSpec const &s)
{
  s.validate();
  Rng rng(s.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto U = [&](double a, double b) { return a + (b - a) * u(rng); };
  double const H = double(s.height), W = double(s.width);
  std::vector<detail::Ellipse> es;
  // body, then features inside it
  es.push_back({H / 2 + U(-0.03, 0.03) * H, W / 2 + U(-0.03, 0.03) * W, U(0.36, 0.44) * H, U(0.36, 0.44) * W,
                U(0, M_PI), U(0.3, 0.5), 0.25 * U(0.5, 1.0), U(0, 2 * M_PI), 0.0, 3.0});
  for (Index i = 1; i < s.n_ellipses; ++i) {
    es.push_back({H / 2 + U(-0.2, 0.2) * H, W / 2 + U(-0.2, 0.2) * W, U(0.04, 0.16) * H, U(0.04, 0.16) * W,
                  U(0, M_PI), U(0.2, 0.6), U(0.5, 1.0), U(0, 2 * M_PI), U(-0.4, 0.4), U(0.5, 1.2)});
  }
  double const c1 = U(-1, 1), c2 = U(-1, 1), c3 = U(-1, 1);
  double const norm = 1.0 / (std::abs(c1) + std::abs(c2) + 2 * std::abs(c3) + 1e-12);

  ComplexImage img(s.frames, s.height, s.width);
  std::vector<double> mag(img.values.size(), 0.0);
  double peak = 0;
  for (Index t = 0; t < s.frames; ++t) {
    double const z = s.frames > 1 ? 2.0 * double(t) / double(s.frames - 1) - 1.0 : 0.0;
    for (auto const &e : es) {
      double scale;
      if (s.volume) {
        double const q = (z - e.zc) / e.rz;
        if (q * q >= 1) { continue; }
        scale = std::sqrt(1 - q * q);
      } else {
        scale = 1.0 + s.motion * e.pulse * std::sin(2 * M_PI * double(t) / double(s.frames) + e.phase);
      }
      double const ry = e.ry * scale, rx = e.rx * scale;
      double const ca = std::cos(e.angle), sa = std::sin(e.angle);
      double const edge = 1.0 / std::max(std::min(ry, rx), 1.0); // about one pixel of soft edge
      for (Index y = 0; y < s.height; ++y) {
        for (Index x = 0; x < s.width; ++x) {
          double const dy = double(y) + 0.5 - e.cy, dx = double(x) + 0.5 - e.cx;
          double const a = (ca * dx + sa * dy) / rx, b = (-sa * dx + ca * dy) / ry;
          double const rho = std::sqrt(a * a + b * b);
          mag[static_cast<std::size_t>((t * s.height + y) * s.width + x)] +=
            e.value * 0.5 * (1.0 - std::tanh((rho - 1.0) / edge));
        }
      }
    }
  }
  for (double m : mag) { peak = std::max(peak, m); }
  double const k = peak > 0 ? 0.9 * s.intensity / peak : 0.0;
  for (Index t = 0; t < s.frames; ++t) {
    for (Index y = 0; y < s.height; ++y) {
      double const v = 2.0 * (double(y) + 0.5) / H - 1.0;
      for (Index x = 0; x < s.width; ++x) {
        double const uu = 2.0 * (double(x) + 0.5) / W - 1.0;
        double const ph = s.phase_roll * norm * (c1 * uu + c2 * v + c3 * (uu * uu + v * v));
        auto const i = static_cast<std::size_t>((t * s.height + y) * s.width + x);
        img.values[i] = std::polar(mag[i] * k, ph);
      }
    }
  }
  img.pixel_intensity_scale = s.intensity;
  return img;
}

/// n phantoms with per-item seeds derived from `seed`.
inline std::vector<ComplexImage> make_phantoms(Index n, PhantomSpec base, std::uint64_t seed)
{
  std::vector<ComplexImage> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    base.seed = derive_seed(seed, static_cast<std::uint64_t>(i), 11);
    out.push_back(gen_phantom(base));
  }
  return out;
}

// ---------------------------------------------------------------- cropping

inline ComplexImage crop_image(ComplexImage const &img, Index y0, Index x0, Index ph, Index pw)
{
  if (y0 < 0 || x0 < 0 || y0 + ph > img.height || x0 + pw > img.width) {
    throw std::invalid_argument("crop outside the image");
  }
  ComplexImage out(img.frames, ph, pw);
  out.pixel_intensity_scale = img.pixel_intensity_scale;
  out.snr_unit = img.snr_unit;
  for (Index t = 0; t < img.frames; ++t) {
    for (Index y = 0; y < ph; ++y) {
      auto const *src = &img.at(t, y0 + y, x0);
      std::copy(src, src + pw, &out.at(t, y, 0));
    }
  }
  return out;
}

inline GFactorMap crop_gfactor(GFactorMap const &g, Index y0, Index x0, Index ph, Index pw)
{
  if (y0 < 0 || x0 < 0 || y0 + ph > g.height || x0 + pw > g.width) {
    throw std::invalid_argument("crop outside the g-factor map");
  }
  GFactorMap out{ph, pw, std::vector<double>(static_cast<std::size_t>(ph * pw)), g.acceleration};
  for (Index y = 0; y < ph; ++y) {
    for (Index x = 0; x < pw; ++x) { out.values[static_cast<std::size_t>(y * pw + x)] = g.at(y0 + y, x0 + x); }
  }
  return out;
}

struct PatchOrigin
{
  Index y0 = 0, x0 = 0;
};

/// Uniform crop origins for ph x pw windows in an H x W image.
inline std::vector<PatchOrigin> patch_origins(Index H, Index W, Index ph, Index pw, Index n, std::uint64_t seed)
{
  if (ph < 1 || pw < 1 || ph > H || pw > W) {
    throw std::invalid_argument("patch " + std::to_string(ph) + "x" + std::to_string(pw) + " does not fit " +
                                std::to_string(H) + "x" + std::to_string(W));
  }
  Rng rng(seed);
  std::uniform_int_distribution<Index> dy(0, H - ph), dx(0, W - pw);
  std::vector<PatchOrigin> out(static_cast<std::size_t>(n));
  for (auto &o : out) {
    o.y0 = dy(rng);
    o.x0 = dx(rng);
  }
  return out;
}

struct Patch
{
  ComplexImage image;
  GFactorMap g;
  Index y0 = 0, x0 = 0;
};

/// n spatial crops keeping every frame, with the matching g-factor crops.
inline std::vector<Patch> sample_patches(ComplexImage const &img, GFactorMap const &g, Index patch_size, Index n,
                                         std::uint64_t seed)
{
  if (g.height != img.height || g.width != img.width) {
    throw std::invalid_argument("g-factor map does not match the image");
  }
  if (patch_size > img.height || patch_size > img.width) {
    throw std::invalid_argument("patch " + std::to_string(patch_size) + " larger than image " +
                                std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  std::vector<Patch> out;
  for (auto const &o : patch_origins(img.height, img.width, patch_size, patch_size, n, seed)) {
    out.push_back({crop_image(img, o.y0, o.x0, patch_size, patch_size),
                   crop_gfactor(g, o.y0, o.x0, patch_size, patch_size), o.y0, o.x0});
  }
  return out;
}

// ---------------------------------------------------------------- corruption

/// Random draw of the corruption chain used for training pairs and test sets.
struct AugmentSpec
{
  double sigma_lo = 2.0, sigma_hi = 6.0;
  int accel_lo = 2, accel_hi = 4;
  double roughness_lo = 1.0, roughness_hi = 4.0;
  double filter_strength_max = 1.0;
  std::vector<double> partial_fourier{1.0, 0.875, 0.75};
  bool gfactor = true; // false: g == 1 everywhere

  void validate() const
  {
    if (sigma_lo < 0 || sigma_hi < sigma_lo) { throw std::invalid_argument("invalid sigma range"); }
    if (accel_lo < 2 || accel_hi > 6 || accel_hi < accel_lo) {
      throw std::invalid_argument("acceleration range must lie in [2,6]");
    }
    if (roughness_lo < 0 || roughness_hi < roughness_lo) { throw std::invalid_argument("invalid roughness range"); }
    if (filter_strength_max < 0 || filter_strength_max > 1) {
      throw std::invalid_argument("filter strength must be in [0,1]");
    }
    if (partial_fourier.empty()) { throw std::invalid_argument("need at least one partial Fourier fraction"); }
  }
};

struct NoisyPair
{
  ComplexImage noisy;
  GFactorMap g;
  double sigma = 0;
};

inline NoisyPair draw_corruption(ComplexImage const &clean, AugmentSpec const &a, std::uint64_t seed)
{
  a.validate();
  Rng rng(derive_seed(seed, 0, 21));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int const R = std::uniform_int_distribution<int>(a.accel_lo, a.accel_hi)(rng);
  double const rough = a.roughness_lo + (a.roughness_hi - a.roughness_lo) * u(rng);
  double const strength = a.filter_strength_max * u(rng);
  double const pf = a.partial_fourier[std::uniform_int_distribution<std::size_t>(0, a.partial_fourier.size() - 1)(rng)];
  GFactorMap g = a.gfactor ? synth_gfactor(clean.height, clean.width, R, rough, derive_seed(seed, 0, 22))
                           : GFactorMap::constant(clean.height, clean.width, 1.0, 1);
  NoiseSpec ns;
  ns.acceleration = R;
  ns.filter = strength > 0 ? KSpaceFilter::hann(strength) : KSpaceFilter::identity();
  ns.partial_fourier = pf;
  ns.sigma_lo = a.sigma_lo;
  ns.sigma_hi = a.sigma_hi;
  ns.seed = derive_seed(seed, 0, 23);
  auto c = corrupt(clean, g, ns);
  return {std::move(c.noisy), std::move(g), c.sigma};
}

// ---------------------------------------------------------------- tensors

/// [T,3,H,W] = (real, imag, g) per frame.
template <class S>
Tensor<S> to_model_input(ComplexImage const &img, GFactorMap const &g)
{
  if (g.height != img.height || g.width != img.width) {
    throw std::invalid_argument("g-factor map " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                                " does not match image " + std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  Index const P = img.plane();
  Tensor<S> x(Shape{img.frames, 3, img.height, img.width});
  for (Index t = 0; t < img.frames; ++t) {
    S *re = x.ptr() + (t * 3) * P;
    S *im = re + P;
    S *gg = im + P;
    for (Index i = 0; i < P; ++i) {
      auto const v = img.values[static_cast<std::size_t>(t * P + i)];
      re[i] = S(v.real());
      im[i] = S(v.imag());
      gg[i] = S(g.values[static_cast<std::size_t>(i)]);
    }
  }
  return x;
}

/// [T,2,H,W] = (real, imag).
template <class S>
Tensor<S> to_complex_tensor(ComplexImage const &img)
{
  Index const P = img.plane();
  Tensor<S> x(Shape{img.frames, 2, img.height, img.width});
  for (Index t = 0; t < img.frames; ++t) {
    for (Index i = 0; i < P; ++i) {
      auto const v = img.values[static_cast<std::size_t>(t * P + i)];
      x.data[static_cast<std::size_t>((t * 2) * P + i)] = S(v.real());
      x.data[static_cast<std::size_t>((t * 2 + 1) * P + i)] = S(v.imag());
    }
  }
  return x;
}

template <class S>
ComplexImage from_complex_tensor(Tensor<S> const &y, ComplexImage const &like)
{
  if (y.shape != Shape{like.frames, 2, like.height, like.width}) {
    throw ShapeError("model output " + to_string(y.shape) + " does not match the image");
  }
  ComplexImage out = like;
  Index const P = like.plane();
  for (Index t = 0; t < like.frames; ++t) {
    for (Index i = 0; i < P; ++i) {
      out.values[static_cast<std::size_t>(t * P + i)] = {double(y.data[static_cast<std::size_t>((t * 2) * P + i)]),
                                                         double(y.data[static_cast<std::size_t>((t * 2 + 1) * P + i)])};
    }
  }
  return out;
}

// ---------------------------------------------------------------- optimisers

enum class OptimizerKind
{
  adamw,
  sophia
};

inline char const *optimizer_name(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sophia"; }

inline OptimizerKind parse_optimizer(std::string const &s)
{
  if (s == "adamw") { return OptimizerKind::adamw; }
  if (s == "sophia") { return OptimizerKind::sophia; }
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected adamw or sophia)");
}

struct OptimizerHyper
{
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // sophia
  double curvature_beta = 0.99;
  double rho = 0.01;
  double curvature_eps = 1e-12;
  Index curvature_interval = 10;
};

struct OptimizerState
{
  Index step = 0;
  std::vector<std::vector<double>> m, v; // v holds the curvature estimate for sophia

  /// True when the next sophia step refreshes its curvature estimate.
  bool wants_curvature(OptimizerHyper const &h) const { return step % std::max<Index>(h.curvature_interval, 1) == 0; }
};

class NonFiniteError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// One in-place update. `curvature` (sophia only) is a gradient of the loss against resampled targets; its
/// element-wise square refreshes the curvature EMA.
template <class S>
void optimizer_step(OptimizerKind kind, ParamStore<S> &params, std::vector<Tensor<S>> const &grads,
                    OptimizerState &state, OptimizerHyper const &h, std::vector<Tensor<S>> const *curvature = nullptr)
{
  if (grads.size() != params.size()) { throw std::invalid_argument("gradient count does not match parameters"); }
  if (curvature && curvature->size() != params.size()) {
    throw std::invalid_argument("curvature count does not match parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].numel() != params[i].numel()) {
      throw std::invalid_argument("gradient shape mismatch for " + params.entries[i].name);
    }
    for (S g : grads[i].data) {
      if (!std::isfinite(double(g))) { throw NonFiniteError("non-finite gradient in " + params.entries[i].name); }
    }
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].data.size(), 0.0);
      state.v[i].assign(params[i].data.size(), 0.0);
    }
  }
  bool const refresh = kind == OptimizerKind::sophia && curvature && state.wants_curvature(h);
  ++state.step;
  double const t = double(state.step);
  double const bc1 = 1.0 - std::pow(h.beta1, t), bc2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto &p = params[i].data;
    auto const &g = grads[i].data;
    auto &m = state.m[i];
    auto &v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      double const gj = double(g[j]);
      double th = double(p[j]);
      m[j] = h.beta1 * m[j] + (1 - h.beta1) * gj;
      th -= h.lr * h.weight_decay * th;
      if (kind == OptimizerKind::adamw) {
        v[j] = h.beta2 * v[j] + (1 - h.beta2) * gj * gj;
        th -= h.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + h.eps);
      } else {
        if (refresh) {
          double const c = double((*curvature)[i].data[j]);
          v[j] = h.curvature_beta * v[j] + (1 - h.curvature_beta) * c * c;
        }
        double const r = std::clamp(m[j] / std::max(v[j], h.curvature_eps), -h.rho, h.rho);
        th -= h.lr * r;
      }
      p[j] = S(th);
    }
  }
}

// ---------------------------------------------------------------- training

struct TrainConfig
{
  Index epochs = 5;
  Index patch_small = 32, patch_large = 64; // even steps use the small patch, odd steps the large one
  Index batch_size = 1;
  OptimizerKind optimizer = OptimizerKind::adamw;
  OptimizerHyper hyper;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  LossWeights loss;
  AugmentSpec augment;
  bool noise_aug = true; // false: each training pair is corrupted once and reused every epoch

  void validate() const
  {
    if (epochs < 1) { throw std::invalid_argument("epochs must be >= 1"); }
    if (patch_small < 8 || patch_large < 8) { throw std::invalid_argument("patch sizes must be >= 8"); }
    if (batch_size < 1) { throw std::invalid_argument("batch size must be >= 1"); }
    if (!(val_fraction > 0 && val_fraction < 1)) { throw std::invalid_argument("validation fraction must be in (0,1)"); }
    if (!(hyper.lr > 0)) { throw std::invalid_argument("learning rate must be positive"); }
    loss.validate();
    augment.validate();
  }

  Index patch_for_step(Index step) const { return step % 2 == 0 ? patch_small : patch_large; }
};

struct EpochRecord
{
  Index epoch = 0;
  Index steps = 0;
  double train_loss = 0;
  double val_loss = 0;

  bool operator==(EpochRecord const &) const = default;
};

template <class S>
struct TrainResult
{
  Model<S> model; // best-validation parameters, or the last good ones after divergence
  std::vector<EpochRecord> history;
  Index best_epoch = -1;
  bool diverged = false;
  std::string message;
  Index train_count = 0, val_count = 0;
  double seconds = 0;
};

struct DatasetSplit
{
  std::vector<Index> train, val;
};

inline DatasetSplit split_dataset(Index n, double val_fraction, std::uint64_t seed)
{
  if (n < 2) { throw std::invalid_argument("dataset needs at least two samples to split"); }
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  Rng rng(derive_seed(seed, 0, 31));
  std::shuffle(idx.begin(), idx.end(), rng);
  Index const nv = std::clamp<Index>(static_cast<Index>(std::llround(double(n) * val_fraction)), 1, n - 1);
  DatasetSplit s;
  s.val.assign(idx.begin(), idx.begin() + nv);
  s.train.assign(idx.begin() + nv, idx.end());
  return s;
}

namespace detail {

template <class S>
std::vector<Tensor<S>> collect_grads(GradientMap<S> const &gm, Bound<S> const &P)
{
  std::vector<Tensor<S>> out;
  out.reserve(P.vars.size());
  for (auto const &v : P.vars) { out.push_back(gm.at(v.id)); }
  return out;
}

template <class S>
double validation_loss(Model<S> const &m, std::vector<NoisyPair> const &pairs,
                       std::vector<ComplexImage const *> const &clean, LossWeights const &w)
{
  double acc = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Tape<S> tape;
    auto P = Bound<S>::bind(tape, m.params, false);
    auto y = forward(m, tape.constant(to_model_input<S>(pairs[i].noisy, pairs[i].g)), P);
    acc += double(composite_loss(y, tape.constant(to_complex_tensor<S>(*clean[i])), w).value()[0]);
  }
  return acc / double(pairs.size());
}

} // namespace detail

/// Corrupted training pair for one draw. With noise augmentation off the pair depends only on the sample,
/// so every epoch sees the pair drawn at the start.
inline NoisyPair training_pair(TrainConfig const &tc, ComplexImage const &clean, Index sample, Index draw)
{
  if (tc.noise_aug) {
    return draw_corruption(clean, tc.augment, derive_seed(tc.seed, static_cast<std::uint64_t>(draw), 35));
  }
  return draw_corruption(clean, tc.augment, derive_seed(tc.seed, static_cast<std::uint64_t>(sample), 33));
}

using EpochCallback = std::function<void(EpochRecord const &)>;

/// Trains from a fresh model built with the config's seed. Every random draw derives from `tc.seed`.
template <class S>
TrainResult<S> train(ModelConfig const &mc, TrainConfig const &tc, std::vector<ComplexImage> const &data,
                     EpochCallback const &on_epoch = {})
{
  if (data.empty()) { throw std::invalid_argument("training set is empty"); }
  tc.validate();
  auto const t_start = std::chrono::steady_clock::now();
  TrainResult<S> res;
  Model<S> model = build_model<S>(mc, derive_seed(tc.seed, 0, 30));
  auto const split = split_dataset(static_cast<Index>(data.size()), tc.val_fraction, tc.seed);
  res.train_count = static_cast<Index>(split.train.size());
  res.val_count = static_cast<Index>(split.val.size());

  std::vector<NoisyPair> val_pairs;
  std::vector<ComplexImage const *> val_clean;
  for (Index i : split.val) {
    val_pairs.push_back(draw_corruption(data[i], tc.augment, derive_seed(tc.seed, static_cast<std::uint64_t>(i), 32)));
    val_clean.push_back(&data[i]);
  }
  std::vector<NoisyPair> fixed; // cached frozen pairs when noise augmentation is off
  if (!tc.noise_aug) {
    for (Index i : split.train) { fixed.push_back(training_pair(tc, data[i], i, 0)); }
  }
  std::vector<Index> slot(data.size(), -1); // dataset index -> position in split.train
  for (std::size_t k = 0; k < split.train.size(); ++k) { slot[split.train[k]] = static_cast<Index>(k); }

  OptimizerState opt;
  ParamStore<S> best = model.params;
  double best_val = INFINITY;
  Index step = 0;
  Index const n_train = res.train_count;
  Index const steps_per_epoch = (n_train + tc.batch_size - 1) / tc.batch_size;

  for (Index epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<Index> order = split.train;
    Rng shuffle_rng(derive_seed(tc.seed, static_cast<std::uint64_t>(epoch), 34));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    for (Index b = 0; b < steps_per_epoch; ++b, ++step) {
      Index const patch = tc.patch_for_step(step);
      Tape<S> tape;
      auto P = Bound<S>::bind(tape, model.params, true);
      std::vector<Var<S>> losses, preds;
      std::vector<double> sigmas;
      Index const lo = b * tc.batch_size, hi = std::min(n_train, lo + tc.batch_size);
      for (Index k = lo; k < hi; ++k) {
        Index const di = order[static_cast<std::size_t>(k)];
        Index const draw = step * tc.batch_size + (k - lo);
        ComplexImage const &clean = data[di];
        NoisyPair drawn;
        NoisyPair const *pair = &drawn;
        if (tc.noise_aug) {
          drawn = training_pair(tc, clean, di, draw);
        } else {
          pair = &fixed[static_cast<std::size_t>(slot[di])];
        }
        Index const ph = std::min(patch, clean.height), pw = std::min(patch, clean.width);
        auto const o =
          patch_origins(clean.height, clean.width, ph, pw, 1, derive_seed(tc.seed, static_cast<std::uint64_t>(draw), 36))[0];
        auto const x =
          to_model_input<S>(crop_image(pair->noisy, o.y0, o.x0, ph, pw), crop_gfactor(pair->g, o.y0, o.x0, ph, pw));
        auto y = forward(model, tape.constant(x), P);
        auto const target = to_complex_tensor<S>(crop_image(clean, o.y0, o.x0, ph, pw));
        losses.push_back(composite_loss(y, tape.constant(target), tc.loss));
        preds.push_back(y);
        sigmas.push_back(pair->sigma);
      }
      auto total = losses[0];
      for (std::size_t i = 1; i < losses.size(); ++i) { total = ops::add(total, losses[i]); }
      total = ops::scale(total, 1.0 / double(losses.size()));
      double const lv = double(total.value()[0]);
      if (!std::isfinite(lv)) {
        res.diverged = true;
        res.message = "non-finite training loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step);
        break;
      }
      auto grads = detail::collect_grads(tape.backward(total), P);
      std::optional<std::vector<Tensor<S>>> curv;
      if (tc.optimizer == OptimizerKind::sophia && opt.wants_curvature(tc.hyper)) {
        // Gradient against targets resampled around the prediction.
        Rng crng(derive_seed(tc.seed, static_cast<std::uint64_t>(step), 37));
        std::normal_distribution<double> nd;
        std::vector<Var<S>> rl;
        for (std::size_t i = 0; i < preds.size(); ++i) {
          Tensor<S> t = preds[i].value();
          for (auto &v : t.data) { v += S(sigmas[i] * nd(crng)); }
          rl.push_back(composite_loss(preds[i], tape.constant(std::move(t)), tc.loss));
        }
        auto rt = rl[0];
        for (std::size_t i = 1; i < rl.size(); ++i) { rt = ops::add(rt, rl[i]); }
        curv = detail::collect_grads(tape.backward(ops::scale(rt, 1.0 / double(rl.size()))), P);
      }
      try {
        ParamStore<S> trial = model.params;
        optimizer_step(tc.optimizer, trial, grads, opt, tc.hyper, curv ? &*curv : nullptr);
        model.params = std::move(trial);
      } catch (NonFiniteError const &e) {
        res.diverged = true;
        res.message = std::string(e.what()) + " at epoch " + std::to_string(epoch) + " step " + std::to_string(step);
        break;
      }
      loss_sum += lv;
    }
    if (res.diverged) { break; }
    EpochRecord rec{epoch, steps_per_epoch, loss_sum / double(steps_per_epoch),
                    detail::validation_loss(model, val_pairs, val_clean, tc.loss)};
    if (!std::isfinite(rec.val_loss)) {
      res.history.push_back(rec);
      res.diverged = true;
      res.message = "non-finite validation loss at epoch " + std::to_string(epoch);
      break;
    }
    res.history.push_back(rec);
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best = model.params;
      res.best_epoch = epoch;
    }
    if (on_epoch) { on_epoch(rec); }
  }
  if (res.diverged) {
    res.model = std::move(model); // parameters before the failing update
  } else {
    model.params = std::move(best);
    res.model = std::move(model);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

// ---------------------------------------------------------------- inference

struct DenoiseOptions
{
  Index tile = 0;     // 0: never tile
  Index overlap = 16; // tile overlap in pixels
};

namespace detail {

struct TileAxis
{
  std::vector<Index> starts;
  Index size = 0;
};

inline TileAxis tile_axis(Index n, Index tile, Index overlap)
{
  TileAxis a;
  if (tile <= 0 || n <= tile) {
    a.starts = {0};
    a.size = n;
    return a;
  }
  a.size = tile;
  Index const step = std::max<Index>(tile - overlap, 1);
  for (Index s = 0;; s += step) {
    if (s + tile >= n) {
      a.starts.push_back(n - tile);
      break;
    }
    a.starts.push_back(s);
  }
  return a;
}

// Raised-cosine taper over `overlap` pixels on sides that touch another tile.
inline std::vector<double> tile_weights(Index start, Index size, Index n, Index overlap)
{
  std::vector<double> w(static_cast<std::size_t>(size), 1.0);
  Index const ramp = std::min(overlap, size / 2);
  for (Index i = 0; i < ramp; ++i) {
    double const r = 0.5 * (1.0 - std::cos(M_PI * (double(i) + 0.5) / double(ramp)));
    if (start > 0) { w[static_cast<std::size_t>(i)] *= r; }
    if (start + size < n) { w[static_cast<std::size_t>(size - 1 - i)] *= r; }
  }
  return w;
}

template <class S>
ComplexImage run_model(Model<S> const &m, ComplexImage const &noisy, GFactorMap const &g)
{
  return from_complex_tensor(predict(m, to_model_input<S>(noisy, g)), noisy);
}

} // namespace detail

/// Stacks (real, imag, g), runs the model, returns the complex output. Large images are processed in
/// overlapping tiles blended with raised-cosine weights.
template <class S>
ComplexImage denoise(Model<S> const &m, ComplexImage const &noisy, GFactorMap const &g, DenoiseOptions const &opt = {})
{
  if (g.height != noisy.height || g.width != noisy.width) {
    throw std::invalid_argument("denoise: g-factor map " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                                " does not match image " + std::to_string(noisy.height) + "x" +
                                std::to_string(noisy.width));
  }
  if (opt.tile < 0 || opt.overlap < 0) { throw std::invalid_argument("denoise: negative tile or overlap"); }
  auto const ay = detail::tile_axis(noisy.height, opt.tile, opt.overlap);
  auto const ax = detail::tile_axis(noisy.width, opt.tile, opt.overlap);
  if (ay.starts.size() == 1 && ax.starts.size() == 1) { return detail::run_model(m, noisy, g); }
  ComplexImage out = noisy;
  std::fill(out.values.begin(), out.values.end(), Complex{});
  std::vector<double> wsum(static_cast<std::size_t>(noisy.plane()), 0.0);
  for (Index y0 : ay.starts) {
    auto const wy = detail::tile_weights(y0, ay.size, noisy.height, opt.overlap);
    for (Index x0 : ax.starts) {
      auto const wx = detail::tile_weights(x0, ax.size, noisy.width, opt.overlap);
      auto const r = detail::run_model(m, crop_image(noisy, y0, x0, ay.size, ax.size),
                                       crop_gfactor(g, y0, x0, ay.size, ax.size));
      for (Index y = 0; y < ay.size; ++y) {
        for (Index x = 0; x < ax.size; ++x) {
          double const w = wy[static_cast<std::size_t>(y)] * wx[static_cast<std::size_t>(x)];
          wsum[static_cast<std::size_t>((y0 + y) * noisy.width + x0 + x)] += w;
          for (Index t = 0; t < noisy.frames; ++t) { out.at(t, y0 + y, x0 + x) += w * r.at(t, y, x); }
        }
      }
    }
  }
  for (Index t = 0; t < noisy.frames; ++t) {
    for (Index i = 0; i < noisy.plane(); ++i) {
      out.values[static_cast<std::size_t>(t * noisy.plane() + i)] /= wsum[static_cast<std::size_t>(i)];
    }
  }
  return out;
}

// ---------------------------------------------------------------- evaluation

struct TestSample
{
  std::string id;
  std::string kind; // "2d", "2dt" or "3d"
  ComplexImage clean, noisy;
  GFactorMap g;
  double sigma = 0;
};

struct TestSetSpec
{
  Index height = 64, width = 64, frames = 8;
  std::vector<std::string> kinds{"2d", "2dt", "3d"};
  std::vector<double> sigmas{2.0, 4.0, 6.0}; // one cell per level; empty: draw from augment's range
  Index per_cell = 2;
  AugmentSpec augment;
  std::uint64_t seed = 1000;
};

inline std::vector<TestSample> make_testset(TestSetSpec const &s)
{
  std::vector<TestSample> out;
  std::vector<double> levels = s.sigmas;
  bool const drawn = levels.empty();
  if (drawn) { levels.push_back(NAN); }
  std::uint64_t item = 0;
  for (auto const &kind : s.kinds) {
    if (kind != "2d" && kind != "2dt" && kind != "3d") { throw std::invalid_argument("unknown test kind '" + kind + "'"); }
    for (double sigma : levels) {
      for (Index i = 0; i < s.per_cell; ++i, ++item) {
        PhantomSpec ps;
        ps.height = s.height;
        ps.width = s.width;
        ps.frames = kind == "2d" ? 1 : s.frames;
        ps.volume = kind == "3d";
        ps.seed = derive_seed(s.seed, item, 41);
        AugmentSpec a = s.augment;
        if (!drawn) { a.sigma_lo = a.sigma_hi = sigma; }
        TestSample t;
        t.kind = kind;
        t.clean = gen_phantom(ps);
        auto p = draw_corruption(t.clean, a, derive_seed(s.seed, item, 42));
        t.noisy = std::move(p.noisy);
        t.g = std::move(p.g);
        t.sigma = p.sigma;
        char buf[64];
        std::snprintf(buf, sizeof buf, "%s_s%.2f_%03llu", kind.c_str(), t.sigma, static_cast<unsigned long long>(item));
        t.id = buf;
        out.push_back(std::move(t));
      }
    }
  }
  return out;
}

struct EvalOptions
{
  DenoiseOptions denoise;
  bool unit_g_input = false; // feed g == 1 to the model regardless of the sample's map
};

/// Per-sample metrics of the model output against the clean reference.
template <class S>
std::vector<MetricsRecord> evaluate(Model<S> const &m, std::vector<TestSample> const &set, EvalOptions const &opt = {})
{
  std::vector<MetricsRecord> out;
  out.reserve(set.size());
  for (auto const &t : set) {
    if (t.clean.values.empty()) { throw std::invalid_argument("test sample " + t.id + " has no clean reference"); }
    GFactorMap const g = opt.unit_g_input ? GFactorMap::constant(t.noisy.height, t.noisy.width, 1.0) : t.g;
    out.push_back(compute_metrics(t.id, denoise(m, t.noisy, g, opt.denoise), t.clean));
  }
  return out;
}

/// Metrics of the noisy inputs themselves.
inline std::vector<MetricsRecord> evaluate_noisy(std::vector<TestSample> const &set)
{
  std::vector<MetricsRecord> out;
  out.reserve(set.size());
  for (auto const &t : set) {
    if (t.clean.values.empty()) { throw std::invalid_argument("test sample " + t.id + " has no clean reference"); }
    out.push_back(compute_metrics(t.id, t.noisy, t.clean));
  }
  return out;
}

inline double mean_psnr(std::vector<MetricsRecord> const &r)
{
  if (r.empty()) { return NAN; }
  double s = 0;
  for (auto const &x : r) { s += x.psnr; }
  return s / double(r.size());
}

} // namespace imformer
