#pragma once

// Training losses on [T,2,H,W] complex predictions, and magnitude-image metrics.

#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "complex_image.hpp"
#include "ops.hpp"

namespace imformer {

inline constexpr double kMaxIntensity = 2048.0;
inline constexpr double kPsnrCap = 200.0;

struct LossWeights
{
  double mse = 1.0;
  double l1 = 1.0;
  double perpendicular = 1.0;
  double psnr = 1.0;

  void validate() const
  {
    if (mse < 0 || l1 < 0 || perpendicular < 0 || psnr < 0) { throw std::invalid_argument("loss weights must be >= 0"); }
    if (mse + l1 + perpendicular + psnr <= 0) { throw std::invalid_argument("at least one loss weight must be > 0"); }
  }
};

namespace detail {

template <class S>
void check_pair(Var<S> pred, Var<S> target, char const *what)
{
  if (pred.shape() != target.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + to_string(pred.shape()) + " vs target " +
                     to_string(target.shape()));
  }
}

template <class S>
void check_complex(Var<S> x, char const *what)
{
  if (x.shape().size() != 4 || x.shape()[1] != 2) {
    throw ShapeError(std::string(what) + " expects [T,2,H,W], got " + to_string(x.shape()));
  }
}

// |z| per pixel as sqrt(re^2 + im^2 + delta), shape [T,1,H,W].
template <class S>
Var<S> magnitude(Var<S> z, double delta)
{
  auto re = ops::slice(z, 1, 0, 1);
  auto im = ops::slice(z, 1, 1, 2);
  return ops::sqrt(ops::affine(ops::add(ops::mul(re, re), ops::mul(im, im)), 1.0, delta));
}

} // namespace detail

template <class S>
Var<S> loss_mse(Var<S> pred, Var<S> target)
{
  detail::check_pair(pred, target, "loss_mse");
  auto d = ops::sub(pred, target);
  return ops::mean(ops::mul(d, d));
}

template <class S>
Var<S> loss_l1(Var<S> pred, Var<S> target)
{
  detail::check_pair(pred, target, "loss_l1");
  return ops::mean(ops::abs(ops::sub(pred, target)));
}

/// Mean over pixels of |Re p Im t - Im p Re t| / max(|t|, eps) + ||p| - |t||.
/// The denominator is taken from the target's value and is not differentiated.
template <class S>
Var<S> loss_perpendicular(Var<S> pred, Var<S> target, double eps = 1e-6)
{
  detail::check_pair(pred, target, "loss_perpendicular");
  detail::check_complex(pred, "loss_perpendicular");
  if (!(eps > 0)) { throw std::invalid_argument("loss_perpendicular: eps must be > 0"); }
  auto pr = ops::slice(pred, 1, 0, 1), pi = ops::slice(pred, 1, 1, 2);
  auto tr = ops::slice(target, 1, 0, 1), ti = ops::slice(target, 1, 1, 2);
  auto cross = ops::abs(ops::sub(ops::mul(pr, ti), ops::mul(pi, tr)));

  auto const &tv = target.value();
  Shape const s = tv.shape;
  Index const P = s[2] * s[3];
  Tensor<S> inv({s[0], 1, s[2], s[3]});
  for (Index t = 0; t < s[0]; ++t) {
    for (Index i = 0; i < P; ++i) {
      double const re = tv[(t * 2) * P + i], im = tv[(t * 2 + 1) * P + i];
      inv.data[t * P + i] = static_cast<S>(1.0 / std::max(std::hypot(re, im), eps));
    }
  }
  auto perp = ops::mul(cross, pred.tape->constant(std::move(inv)));
  double const delta = eps * eps;
  auto mag = ops::abs(ops::sub(detail::magnitude(pred, delta), detail::magnitude(target, delta)));
  return ops::mean(ops::add(perp, mag));
}

/// -20 log10(max_I / (RMSE of magnitudes + eps)).
template <class S>
Var<S> loss_psnr(Var<S> pred, Var<S> target, double max_intensity = kMaxIntensity, double eps = 1e-8)
{
  detail::check_pair(pred, target, "loss_psnr");
  detail::check_complex(pred, "loss_psnr");
  double const delta = 1e-24;
  auto d = ops::sub(detail::magnitude(pred, delta), detail::magnitude(target, delta));
  auto rmse = ops::sqrt(ops::mean(ops::mul(d, d)));
  double const k = 20.0 / std::log(10.0);
  return ops::affine(ops::log(ops::affine(rmse, 1.0, eps)), k, -20.0 * std::log10(max_intensity));
}

template <class S>
Var<S> composite_loss(Var<S> pred, Var<S> target, LossWeights const &w = {})
{
  w.validate();
  std::vector<Var<S>> terms;
  auto add = [&](double weight, auto make) {
    if (weight == 0) { return; }
    auto v = make();
    terms.push_back(weight == 1.0 ? v : ops::scale(v, weight));
  };
  add(w.mse, [&] { return loss_mse(pred, target); });
  add(w.l1, [&] { return loss_l1(pred, target); });
  add(w.perpendicular, [&] { return loss_perpendicular(pred, target); });
  add(w.psnr, [&] { return loss_psnr(pred, target); });
  auto total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) { total = ops::add(total, terms[i]); }
  return total;
}

// ---------------------------------------------------------------- metrics

/// Magnitude image series [T][H][W].
struct MagnitudeImage
{
  Index frames = 0, height = 0, width = 0;
  std::vector<double> values;

  static MagnitudeImage of(ComplexImage const &img) { return {img.frames, img.height, img.width, img.magnitude()}; }

  bool same_dims(MagnitudeImage const &o) const { return frames == o.frames && height == o.height && width == o.width; }
};

namespace detail {

inline void check_metric_pair(MagnitudeImage const &a, MagnitudeImage const &b)
{
  if (!a.same_dims(b) || a.values.size() != b.values.size()) {
    throw std::invalid_argument("metric: image dimensions differ");
  }
  if (a.values.empty()) { throw std::invalid_argument("metric: empty image"); }
}

} // namespace detail

inline double metric_mse(MagnitudeImage const &a, MagnitudeImage const &b)
{
  detail::check_metric_pair(a, b);
  double acc = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) { acc += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]); }
  return acc / double(a.values.size());
}

inline double metric_l1(MagnitudeImage const &a, MagnitudeImage const &b)
{
  detail::check_metric_pair(a, b);
  double acc = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) { acc += std::abs(a.values[i] - b.values[i]); }
  return acc / double(a.values.size());
}

/// 20 log10(max_I / RMSE), capped at 200 dB (identical images hit the cap).
inline double psnr_from_rmse(double rmse, double max_intensity = kMaxIntensity)
{
  if (rmse <= 0) { return kPsnrCap; }
  return std::min(kPsnrCap, 20.0 * std::log10(max_intensity / rmse));
}

inline double metric_psnr(MagnitudeImage const &a, MagnitudeImage const &b, double max_intensity = kMaxIntensity)
{
  return psnr_from_rmse(std::sqrt(metric_mse(a, b)), max_intensity);
}

/// Frame-averaged means of the SSIM factors; ssim = luminance * contrast * structure pointwise (C3 = C2/2).
struct SsimTerms
{
  double luminance = 0, contrast = 0, structure = 0, ssim = 0;
};

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

inline SsimTerms ssim_terms(MagnitudeImage const &a, MagnitudeImage const &b, double max_intensity = kMaxIntensity)
{
  detail::check_metric_pair(a, b);
  Index const K = kSsimWindow, H = a.height, W = a.width;
  if (H < K || W < K) {
    throw std::invalid_argument("ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " smaller than the " +
                                std::to_string(K) + "x" + std::to_string(K) + " window");
  }
  std::vector<double> w1(K);
  double z = 0;
  for (Index i = 0; i < K; ++i) {
    double const d = double(i - K / 2);
    z += (w1[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma)));
  }
  for (auto &v : w1) { v /= z; }
  double const C1 = std::pow(0.01 * max_intensity, 2), C2 = std::pow(0.03 * max_intensity, 2), C3 = C2 / 2;

  Index const OH = H - K + 1, OW = W - K + 1;
  // separable valid-mode filtering of x, y, x^2, y^2, xy
  auto filter = [&](std::vector<double> const &img) {
    std::vector<double> tmp(static_cast<std::size_t>(H * OW)), out(static_cast<std::size_t>(OH * OW));
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < OW; ++x) {
        double acc = 0;
        for (Index k = 0; k < K; ++k) { acc += w1[k] * img[y * W + x + k]; }
        tmp[y * OW + x] = acc;
      }
    }
    for (Index y = 0; y < OH; ++y) {
      for (Index x = 0; x < OW; ++x) {
        double acc = 0;
        for (Index k = 0; k < K; ++k) { acc += w1[k] * tmp[(y + k) * OW + x]; }
        out[y * OW + x] = acc;
      }
    }
    return out;
  };

  SsimTerms total;
  Index const P = H * W;
  for (Index t = 0; t < a.frames; ++t) {
    std::vector<double> x(a.values.begin() + t * P, a.values.begin() + (t + 1) * P);
    std::vector<double> y(b.values.begin() + t * P, b.values.begin() + (t + 1) * P);
    std::vector<double> xx(P), yy(P), xy(P);
    for (Index i = 0; i < P; ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    auto mx = filter(x), my = filter(y), sxx = filter(xx), syy = filter(yy), sxy = filter(xy);
    SsimTerms f;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      double const vx = std::max(0.0, sxx[i] - mx[i] * mx[i]);
      double const vy = std::max(0.0, syy[i] - my[i] * my[i]);
      double const cxy = sxy[i] - mx[i] * my[i];
      double const sx = std::sqrt(vx), sy = std::sqrt(vy);
      double const l = (2 * mx[i] * my[i] + C1) / (mx[i] * mx[i] + my[i] * my[i] + C1);
      double const c = (2 * sx * sy + C2) / (vx + vy + C2);
      double const s = (cxy + C3) / (sx * sy + C3);
      f.luminance += l;
      f.contrast += c;
      f.structure += s;
      f.ssim += (2 * mx[i] * my[i] + C1) * (2 * cxy + C2) / ((mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2));
    }
    double const n = double(mx.size());
    total.luminance += f.luminance / n;
    total.contrast += f.contrast / n;
    total.structure += f.structure / n;
    total.ssim += f.ssim / n;
  }
  double const T = double(a.frames);
  total.luminance /= T;
  total.contrast /= T;
  total.structure /= T;
  total.ssim /= T;
  return total;
}

inline double metric_ssim(MagnitudeImage const &a, MagnitudeImage const &b, double max_intensity = kMaxIntensity)
{
  return ssim_terms(a, b, max_intensity).ssim;
}

struct MetricsRecord
{
  std::string sample_id;
  double mse = 0, l1 = 0, psnr = 0, ssim = 0;
  Index n_pixels = 0;
};

inline MetricsRecord compute_metrics(std::string id, ComplexImage const &pred, ComplexImage const &ref,
                                     double max_intensity = kMaxIntensity)
{
  if (!pred.same_dims(ref)) { throw std::invalid_argument("compute_metrics: dimension mismatch for " + id); }
  auto const a = MagnitudeImage::of(pred), b = MagnitudeImage::of(ref);
  MetricsRecord r;
  r.sample_id = std::move(id);
  r.mse = metric_mse(a, b);
  r.l1 = metric_l1(a, b);
  r.psnr = psnr_from_rmse(std::sqrt(r.mse), max_intensity);
  r.ssim = metric_ssim(a, b, max_intensity);
  r.n_pixels = pred.size();
  return r;
}

inline std::string metrics_csv_header() { return "sample_id,mse,l1,psnr,ssim"; }

inline std::string to_csv_row(MetricsRecord const &r)
{
  char buf[160];
  std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g", r.mse, r.l1, r.psnr, r.ssim);
  return r.sample_id + buf;
}

} // namespace imformer
