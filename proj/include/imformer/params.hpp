#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"

namespace imformer {

using ParamId = std::size_t;

/// Named, ordered parameter tensors. Order is creation order and is what checkpoints serialise.
template <class S>
struct ParamStore
{
  struct Entry
  {
    std::string name;
    Tensor<S> value;
  };

  std::vector<Entry> entries;

  ParamId add(std::string name, Tensor<S> value)
  {
    entries.push_back({std::move(name), std::move(value)});
    return entries.size() - 1;
  }

  ParamId normal(std::string name, Shape shape, double stddev, Rng &rng)
  {
    std::normal_distribution<double> n(0.0, stddev);
    Tensor<S> t(std::move(shape));
    for (auto &v : t.data) { v = static_cast<S>(n(rng)); }
    return add(std::move(name), std::move(t));
  }

  ParamId zeros(std::string name, Shape shape) { return add(std::move(name), Tensor<S>(std::move(shape))); }
  ParamId ones(std::string name, Shape shape) { return add(std::move(name), Tensor<S>(std::move(shape), S(1))); }

  Tensor<S> &operator[](ParamId id) { return entries.at(id).value; }
  Tensor<S> const &operator[](ParamId id) const { return entries.at(id).value; }

  std::size_t size() const { return entries.size(); }

  Index count() const
  {
    Index n = 0;
    for (auto const &e : entries) { n += e.value.numel(); }
    return n;
  }

  template <class U>
  ParamStore<U> cast() const
  {
    ParamStore<U> out;
    for (auto const &e : entries) { out.add(e.name, e.value.template cast<U>()); }
    return out;
  }
};

/// Parameters placed on one tape, indexed like the store.
template <class S>
struct Bound
{
  std::vector<Var<S>> vars;

  Var<S> operator[](ParamId id) const { return vars.at(id); }

  static Bound bind(Tape<S> &tape, ParamStore<S> const &store, bool trainable)
  {
    Bound b;
    b.vars.reserve(store.size());
    for (auto const &e : store.entries) { b.vars.push_back(trainable ? tape.leaf(e.value) : tape.constant(e.value)); }
    return b;
  }
};

} // namespace imformer
