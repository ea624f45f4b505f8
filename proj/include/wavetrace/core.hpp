#pragma once

// Core dense types and small utilities shared across the library.
// Scalar-templated Eigen types; double is the working precision everywhere,
// the templates exist so oracles/tests can instantiate wider scalars.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace wavetrace {

template <typename S, int D>
using DenseVec = Eigen::Matrix<S, D, 1>;
template <typename S, int D>
using DenseMat = Eigen::Matrix<S, D, D>;

// The pipeline's concrete dimension: n = 2 space dimensions, D = 1+n.
inline constexpr int kSpaceDim = 2;
inline constexpr int kDim = kSpaceDim + 1;

using Vec = DenseVec<double, kDim>;        // spacetime point / vector (t, x1, x2)
using Covec = DenseVec<double, kDim>;      // covector components
using Mat = DenseMat<double, kDim>;
using SpaceVec = DenseVec<double, kSpaceDim>;

/// @brief Minkowski metric diag(-1, 1, ..., 1) in dimension D.
template <typename S = double, int D = kDim>
DenseMat<S, D> minkowski_eta() {
  DenseMat<S, D> m = DenseMat<S, D>::Identity();
  m(0, 0) = S(-1);
  return m;
}

/// @brief Shortest-form decimal that round-trips a double (no std::format on gcc 11).
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// @brief Deterministic uniform in [0,1) from a 64-bit generator (bit-shift
/// construction; std::uniform_real_distribution is implementation-defined).
template <typename Rng>
double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// @brief Uniform in [a, b).
template <typename Rng>
double uniform_in(Rng& rng, double a, double b) {
  return a + (b - a) * uniform01(rng);
}

/// @brief FNV-1a over a byte string; stable content hash for descriptors.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace wavetrace
