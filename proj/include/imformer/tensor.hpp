#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace imformer {

using Index = std::int64_t;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

inline Index numel(Shape const &shape)
{
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>{});
}

inline std::string to_string(Shape const &shape)
{
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) { os << ','; }
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Resolves a possibly negative axis against a rank.
inline int normalize_axis(Index axis, std::size_t rank)
{
  Index const r = static_cast<Index>(rank);
  Index const a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<int>(a);
}

/// Dense row-major n-dimensional array of real scalars. Values only: a Tensor never knows about gradients,
/// see Var for the taped handle.
template <class S>
struct Tensor
{
  Shape shape;
  std::vector<S> data;

  Tensor() = default;

  explicit Tensor(Shape s, S fill = S(0))
    : shape(std::move(s))
    , data(static_cast<std::size_t>(imformer::numel(shape)), fill)
  {
  }

  Tensor(Shape s, std::vector<S> values)
    : shape(std::move(s))
    , data(std::move(values))
  {
    if (imformer::numel(shape) != static_cast<Index>(data.size())) {
      throw ShapeError("tensor shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                       " values");
    }
  }

  static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

  Index numel() const { return static_cast<Index>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(Index axis) const { return shape[normalize_axis(axis, shape.size())]; }

  S &operator[](Index i) { return data[static_cast<std::size_t>(i)]; }
  S const &operator[](Index i) const { return data[static_cast<std::size_t>(i)]; }

  S *ptr() { return data.data(); }
  S const *ptr() const { return data.data(); }

  std::span<S> values() { return data; }
  std::span<S const> values() const { return data; }

  template <class U>
  Tensor<U> cast() const
  {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  friend bool operator==(Tensor const &a, Tensor const &b) { return a.shape == b.shape && a.data == b.data; }
};

} // namespace imformer
