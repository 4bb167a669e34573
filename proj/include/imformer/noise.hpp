#pragma once

// SNR-unit noise augmentation: synthetic g-factor maps, k-space filtering and partial Fourier with
// energy renormalisation, correlated unit noise, and g-scaled corruption of clean images.
//
// Every stage rescales so that unit-variance white input noise leaves with unit spatially-averaged variance.
// With the unitary FFT this is a statement about the mean of the squared k-space weighting (Parseval).

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>

#include "complex_image.hpp"
#include "fft.hpp"
#include "rng.hpp"

namespace imformer {

inline constexpr double kGFactorSlope = 0.35; // mean g = 1 + slope * (R - 1)

enum class WindowKind
{
  none,
  hann,
  custom
};

struct AxisWindow
{
  WindowKind kind = WindowKind::none;
  double strength = 0.0;        // hann: 0 flat, 1 full raised cosine
  std::vector<double> weights;  // custom: one weight per unshifted k-space bin

  double operator()(Index k, Index n) const
  {
    if (kind == WindowKind::none) { return 1.0; }
    if (kind == WindowKind::custom) {
      if (static_cast<Index>(weights.size()) != n) {
        throw std::invalid_argument("custom window has " + std::to_string(weights.size()) + " weights for " +
                                    std::to_string(n) + " bins");
      }
      return weights[static_cast<std::size_t>(k)];
    }
    double const f = static_cast<double>(signed_frequency(k, n)) / static_cast<double>(n);
    double const hann = 0.5 * (1.0 + std::cos(2.0 * M_PI * f));
    return 1.0 - strength * (1.0 - hann);
  }
};

/// Separable k-space apodisation; `phase` acts along rows (H), `readout` along columns (W).
struct KSpaceFilter
{
  AxisWindow phase;
  AxisWindow readout;

  static KSpaceFilter identity() { return {}; }
  static KSpaceFilter hann(double strength = 1.0)
  {
    return {{WindowKind::hann, strength, {}}, {WindowKind::hann, strength, {}}};
  }
  bool is_identity() const { return phase.kind == WindowKind::none && readout.kind == WindowKind::none; }
};

struct NoiseSpec
{
  int acceleration = 2;
  KSpaceFilter filter;
  double partial_fourier = 1.0;
  double sigma_lo = 0.5;
  double sigma_hi = 8.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline double mean_square(AxisWindow const &w, Index n)
{
  double acc = 0;
  for (Index k = 0; k < n; ++k) {
    double const v = w(k, n);
    acc += v * v;
  }
  return acc / static_cast<double>(n);
}

inline Index partial_fourier_lines(double f, Index n)
{
  return std::clamp<Index>(static_cast<Index>(std::llround(f * static_cast<double>(n))), 1, n);
}

// Lines are ordered by signed frequency -n/2 .. n/2-1; the trailing ones are dropped.
inline bool partial_fourier_keeps(Index k, Index n, Index kept)
{
  return signed_frequency(k, n) + n / 2 < kept;
}

} // namespace detail

/// Renormalisation applied after `filter`: 1 / sqrt(mean |H(k)|^2).
inline double kspace_filter_scale(KSpaceFilter const &filter, Index height, Index width)
{
  double const ms = detail::mean_square(filter.phase, height) * detail::mean_square(filter.readout, width);
  if (!(ms > 0)) { throw std::invalid_argument("k-space filter is identically zero"); }
  return 1.0 / std::sqrt(ms);
}

inline ComplexImage apply_kspace_filter_snr_unit(ComplexImage img, KSpaceFilter const &filter)
{
  if (!img.finite()) { throw std::invalid_argument("apply_kspace_filter_snr_unit: non-finite input"); }
  double const scale = kspace_filter_scale(filter, img.height, img.width);
  if (filter.is_identity()) { return img; }
  std::vector<double> wy(img.height), wx(img.width);
  for (Index k = 0; k < img.height; ++k) { wy[k] = filter.phase(k, img.height); }
  for (Index k = 0; k < img.width; ++k) { wx[k] = filter.readout(k, img.width) * scale; }
  Fft2d fft(img.height, img.width);
  for (Index t = 0; t < img.frames; ++t) {
    Complex *f = img.frame(t).data();
    fft.forward(f);
    for (Index y = 0; y < img.height; ++y) {
      for (Index x = 0; x < img.width; ++x) { f[y * img.width + x] *= wy[y] * wx[x]; }
    }
    fft.inverse(f);
  }
  return img;
}

/// Energy fraction retained by partial Fourier for noise whose phase-encode spectrum is shaped by `upstream`
/// (identity upstream: kept_lines / H, i.e. the fraction f).
inline double partial_fourier_energy_fraction(double f, Index height, AxisWindow const &upstream = {})
{
  Index const kept = detail::partial_fourier_lines(f, height);
  double total = 0, retained = 0;
  for (Index k = 0; k < height; ++k) {
    double const p = upstream(k, height) * upstream(k, height);
    total += p;
    if (detail::partial_fourier_keeps(k, height, kept)) { retained += p; }
  }
  return retained / total;
}

/// Zero-fills the trailing (1-f) phase-encode lines and renormalises the remaining noise energy.
/// `upstream` is the phase-encode window already applied to the noise (for chained SNR-unit stages).
inline ComplexImage apply_partial_fourier_snr_unit(ComplexImage img, double f, AxisWindow const &upstream = {})
{
  if (!(f > 0.5 && f <= 1.0)) {
    throw std::invalid_argument("partial Fourier fraction must be in (0.5, 1], got " + std::to_string(f));
  }
  Index const kept = detail::partial_fourier_lines(f, img.height);
  if (kept == img.height) { return img; }
  double const scale = 1.0 / std::sqrt(partial_fourier_energy_fraction(f, img.height, upstream));
  Fft2d fft(img.height, img.width);
  for (Index t = 0; t < img.frames; ++t) {
    Complex *fr = img.frame(t).data();
    fft.forward(fr);
    for (Index y = 0; y < img.height; ++y) {
      double const w = detail::partial_fourier_keeps(y, img.height, kept) ? scale : 0.0;
      for (Index x = 0; x < img.width; ++x) { fr[y * img.width + x] *= w; }
    }
    fft.inverse(fr);
  }
  return img;
}

/// White complex Gaussian noise (complex std 1) pushed through the filter and partial Fourier stages.
inline ComplexImage make_correlated_unit_noise(Index frames, Index height, Index width, KSpaceFilter const &filter,
                                               double f, std::uint64_t seed)
{
  ComplexImage n(frames, height, width);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, M_SQRT1_2);
  for (auto &v : n.values) {
    double const re = normal(rng);
    double const im = normal(rng);
    v = {re, im};
  }
  n = apply_kspace_filter_snr_unit(std::move(n), filter);
  n = apply_partial_fourier_snr_unit(std::move(n), f, filter.phase);
  n.snr_unit = true;
  n.pixel_intensity_scale = 1.0;
  return n;
}

/// Smooth random g-factor map: min exactly 1, mean exactly 1 + 0.35 (R - 1).
/// `roughness` is the std (cycles per field of view) of the Gaussian low-pass that shapes the random field;
/// 0 gives a constant map at the target mean.
inline GFactorMap synth_gfactor(Index height, Index width, int acceleration, double roughness, std::uint64_t seed)
{
  if (acceleration < 2 || acceleration > 6) {
    throw std::invalid_argument("acceleration R must be in [2,6], got " + std::to_string(acceleration));
  }
  if (roughness < 0) { throw std::invalid_argument("roughness must be >= 0"); }
  double const excess = kGFactorSlope * (acceleration - 1);
  GFactorMap g = GFactorMap::constant(height, width, 1.0 + excess, acceleration);
  if (roughness == 0) { return g; }

  std::vector<Complex> field(static_cast<std::size_t>(height * width));
  Rng rng(seed);
  std::normal_distribution<double> normal;
  for (auto &v : field) { v = normal(rng); }
  Fft2d fft(height, width);
  fft.forward(field.data());
  for (Index y = 0; y < height; ++y) {
    double const fy = static_cast<double>(signed_frequency(y, height));
    for (Index x = 0; x < width; ++x) {
      double const fx = static_cast<double>(signed_frequency(x, width));
      field[y * width + x] *= std::exp(-(fy * fy + fx * fx) / (2.0 * roughness * roughness));
    }
  }
  fft.inverse(field.data());

  double lo = field[0].real();
  for (auto const &v : field) { lo = std::min(lo, v.real()); }
  double mean = 0;
  for (auto const &v : field) { mean += v.real() - lo; }
  mean /= static_cast<double>(field.size());
  if (!(mean > 0)) { return g; }
  double const a = excess / mean;
  for (std::size_t i = 0; i < field.size(); ++i) { g.values[i] = 1.0 + a * (field[i].real() - lo); }
  return g;
}

/// Largest absolute 5-point Laplacian over the interior of the map.
inline double max_laplacian(GFactorMap const &g)
{
  double worst = 0;
  for (Index y = 1; y + 1 < g.height; ++y) {
    for (Index x = 1; x + 1 < g.width; ++x) {
      double const l = g.at(y - 1, x) + g.at(y + 1, x) + g.at(y, x - 1) + g.at(y, x + 1) - 4.0 * g.at(y, x);
      worst = std::max(worst, std::abs(l));
    }
  }
  return worst;
}

struct Corrupted
{
  ComplexImage noisy;
  double sigma = 0.0;
};

/// noisy = clean + sigma * g(h,w) * n(t,h,w) with n correlated unit noise and sigma ~ U[sigma_lo, sigma_hi].
inline Corrupted corrupt(ComplexImage const &clean, GFactorMap const &g, NoiseSpec const &spec)
{
  if (g.height != clean.height || g.width != clean.width) {
    throw std::invalid_argument("g-factor map " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                                " does not match image " + std::to_string(clean.height) + "x" +
                                std::to_string(clean.width));
  }
  if (spec.sigma_lo < 0 || spec.sigma_hi < spec.sigma_lo) { throw std::invalid_argument("invalid sigma range"); }
  Rng rng(derive_seed(spec.seed, 0, 1));
  double const sigma = spec.sigma_hi > spec.sigma_lo
                         ? std::uniform_real_distribution<double>(spec.sigma_lo, spec.sigma_hi)(rng)
                         : spec.sigma_lo;
  Corrupted out{clean, sigma};
  if (sigma == 0.0) { return out; }
  auto const n = make_correlated_unit_noise(clean.frames, clean.height, clean.width, spec.filter,
                                            spec.partial_fourier, derive_seed(spec.seed, 0, 2));
  for (Index t = 0; t < clean.frames; ++t) {
    for (Index i = 0; i < clean.plane(); ++i) {
      out.noisy.values[t * clean.plane() + i] += sigma * g.values[i] * n.values[t * clean.plane() + i];
    }
  }
  return out;
}

} // namespace imformer
