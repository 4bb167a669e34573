#pragma once

#include <cmath>
#include <complex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fft.hpp"
#include "tensor.hpp"

namespace imformer {

inline constexpr double kDefaultIntensityScale = 2048.0;

/// Complex image series [t][h][w]. 2D images have one frame; 3D volumes carry slices as frames.
struct ComplexImage
{
  Index frames = 0;
  Index height = 0;
  Index width = 0;
  std::vector<Complex> values;
  double pixel_intensity_scale = kDefaultIntensityScale;
  bool snr_unit = false;

  ComplexImage() = default;

  ComplexImage(Index t, Index h, Index w)
    : frames(t)
    , height(h)
    , width(w)
  {
    if (t < 1 || h < 8 || w < 8) {
      throw std::invalid_argument("ComplexImage needs T>=1, H>=8, W>=8; got " + std::to_string(t) + "x" +
                                  std::to_string(h) + "x" + std::to_string(w));
    }
    values.assign(static_cast<std::size_t>(t * h * w), Complex{});
  }

  Index size() const { return frames * height * width; }
  Index plane() const { return height * width; }

  Complex &at(Index t, Index h, Index w) { return values[static_cast<std::size_t>((t * height + h) * width + w)]; }
  Complex const &at(Index t, Index h, Index w) const
  {
    return values[static_cast<std::size_t>((t * height + h) * width + w)];
  }

  std::span<Complex> frame(Index t) { return {values.data() + t * plane(), static_cast<std::size_t>(plane())}; }
  std::span<Complex const> frame(Index t) const
  {
    return {values.data() + t * plane(), static_cast<std::size_t>(plane())};
  }

  bool same_dims(ComplexImage const &o) const { return frames == o.frames && height == o.height && width == o.width; }

  std::vector<double> magnitude() const
  {
    std::vector<double> m(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) { m[i] = std::abs(values[i]); }
    return m;
  }

  bool finite() const
  {
    for (auto const &v : values) {
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) { return false; }
    }
    return true;
  }
};

/// Spatial noise-amplification map for one acceleration factor.
struct GFactorMap
{
  Index height = 0;
  Index width = 0;
  std::vector<double> values;
  int acceleration = 1;

  double at(Index h, Index w) const { return values[static_cast<std::size_t>(h * width + w)]; }

  static GFactorMap constant(Index h, Index w, double g, int acceleration = 1)
  {
    return {h, w, std::vector<double>(static_cast<std::size_t>(h * w), g), acceleration};
  }
};

} // namespace imformer
