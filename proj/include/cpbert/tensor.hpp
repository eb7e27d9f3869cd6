#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cpbert/random.hpp"

namespace cpbert {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Named, mutable view of one parameter tensor.
template <class T>
struct ParamRef {
  std::string name;
  Matrix<T>* value;
};

template <class T>
struct ConstParamRef {
  std::string name;
  const Matrix<T>* value;
};

/// Collects named references from any struct exposing visit(f).
template <class T, class Module>
std::vector<ParamRef<T>> collect_params(Module& m) {
  std::vector<ParamRef<T>> out;
  m.visit([&](const std::string& name, Matrix<T>& v) { out.push_back({name, &v}); });
  return out;
}

template <class T, class Module>
Module zeros_like(const Module& m) {
  Module z = m;
  z.visit([](const std::string&, Matrix<T>& v) { v.setZero(); });
  return z;
}

template <class T, class Module>
std::size_t parameter_count(Module& m) {
  std::size_t n = 0;
  m.visit([&](const std::string&, Matrix<T>& v) { n += static_cast<std::size_t>(v.size()); });
  return n;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for a (fan_in x fan_out) map.
template <class T>
Matrix<T> init_linear(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  Matrix<T> w(fan_in, fan_out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return w;
}

template <class T>
Matrix<T> init_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix<T> w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.normal(0.0, stddev));
  return w;
}

template <class T>
bool all_finite(const Matrix<T>& m) {
  return m.allFinite();
}

}  // namespace cpbert
