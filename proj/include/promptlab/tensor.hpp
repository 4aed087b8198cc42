#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "promptlab/common.hpp"

namespace promptlab {

// 64-byte-aligned storage keeps Eigen's kernel selection (and thus the
// floating-point reduction order) identical across reruns.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(64)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(64)); }
  bool operator==(const AlignedAllocator&) const { return true; }
};

// Dense row-major tensor, rank 1 or 2. Value semantics; scalar type is a
// template parameter so the same model code runs in float (production) and
// double (finite-difference checks).
template <typename T>
struct Tensor {
  using Storage = std::vector<T, AlignedAllocator<T>>;
  std::vector<std::int64_t> shape;
  Storage v;

  Tensor() = default;
  explicit Tensor(std::int64_t n) : shape{n}, v(static_cast<std::size_t>(n), T(0)) {}
  Tensor(std::int64_t r, std::int64_t c)
      : shape{r, c}, v(static_cast<std::size_t>(r * c), T(0)) {}

  std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
  std::int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator()(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols() + c)]; }
  const T& operator()(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols() + c)]; }
  T& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

  void zero() { std::fill(v.begin(), v.end(), T(0)); }

  bool all_finite() const {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
MatMap<T> as_mat(Tensor<T>& t) {
  return MatMap<T>(t.data(), t.rows(), t.cols());
}
template <typename T>
ConstMatMap<T> as_mat(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data(), t.rows(), t.cols());
}
template <typename T>
VecMap<T> as_vec(Tensor<T>& t) {
  return VecMap<T>(t.data(), t.size());
}
template <typename T>
ConstVecMap<T> as_vec(const Tensor<T>& t) {
  return ConstVecMap<T>(t.data(), t.size());
}

}  // namespace promptlab
