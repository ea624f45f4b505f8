#pragma once

// Uniform Cartesian grid over [t0,t1] x [x0,x1]^2 with flat storage,
// trilinear interpolation and finite-difference stencils. The grid is the
// shared substrate of the eikonal, transport and reconstruction stages.

#include "wavetrace/core.hpp"

#include <array>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace wavetrace {

/// @brief Axis-aligned uniform grid spec; axis 0 is time.
struct GridSpec {
  double t_min = -3.0, t_max = 3.0;
  double x_min = -3.0, x_max = 3.0;  // shared by both spatial axes
  int nt = 61, nx = 61;              // nodes per axis (spatial axes share nx)

  double dt() const { return (t_max - t_min) / (nt - 1); }
  double dx() const { return (x_max - x_min) / (nx - 1); }
  std::size_t size() const { return std::size_t(nt) * nx * nx; }
  std::size_t idx(int i, int j, int k) const {
    return (std::size_t(i) * nx + j) * nx + k;
  }
  void coords_of(std::size_t id, int& i, int& j, int& k) const {
    k = int(id % nx);
    j = int((id / nx) % nx);
    i = int(id / (std::size_t(nx) * nx));
  }
  Vec node(int i, int j, int k) const {
    return Vec(t_min + i * dt(), x_min + j * dx(), x_min + k * dx());
  }
  bool is_face(int i, int j, int k) const {
    return i == 0 || i == nt - 1 || j == 0 || j == nx - 1 || k == 0 || k == nx - 1;
  }
};

/// @brief Scalar field sampled on a GridSpec.
struct GridField {
  GridSpec spec;
  std::vector<double> v;

  explicit GridField(const GridSpec& s = {}) : spec(s), v(s.size(), 0.0) {}
  double& at(int i, int j, int k) { return v[spec.idx(i, j, k)]; }
  double at(int i, int j, int k) const { return v[spec.idx(i, j, k)]; }

  /// @brief Trilinear interpolation; clamps to the box.
  double interp(const Vec& z) const {
    const auto& s = spec;
    double fi = (z[0] - s.t_min) / s.dt();
    double fj = (z[1] - s.x_min) / s.dx();
    double fk = (z[2] - s.x_min) / s.dx();
    auto clampf = [](double f, int n) {
      if (f < 0) return 0.0;
      if (f > n - 1) return double(n - 1);
      return f;
    };
    fi = clampf(fi, s.nt);
    fj = clampf(fj, s.nx);
    fk = clampf(fk, s.nx);
    int i = std::min(int(fi), s.nt - 2), j = std::min(int(fj), s.nx - 2),
        k = std::min(int(fk), s.nx - 2);
    double a = fi - i, b = fj - j, c = fk - k;
    double out = 0.0;
    for (int di = 0; di < 2; ++di)
      for (int dj = 0; dj < 2; ++dj)
        for (int dk = 0; dk < 2; ++dk) {
          double w = (di ? a : 1 - a) * (dj ? b : 1 - b) * (dk ? c : 1 - c);
          out += w * at(i + di, j + dj, k + dk);
        }
    return out;
  }
};

namespace detail {
// Centered second-order derivative along one axis; third-order one-sided at faces.
inline double fd_axis(const GridField& f, int i, int j, int k, int axis) {
  const auto& s = f.spec;
  const int n = (axis == 0) ? s.nt : s.nx;
  const double h = (axis == 0) ? s.dt() : s.dx();
  int c = (axis == 0) ? i : (axis == 1 ? j : k);
  auto val = [&](int cc) {
    int ii = i, jj = j, kk = k;
    (axis == 0 ? ii : axis == 1 ? jj : kk) = cc;
    return f.at(ii, jj, kk);
  };
  if (c > 0 && c < n - 1) return (val(c + 1) - val(c - 1)) / (2 * h);
  if (c == 0)
    return (-11.0 * val(0) + 18.0 * val(1) - 9.0 * val(2) + 2.0 * val(3)) / (6 * h);
  return (11.0 * val(n - 1) - 18.0 * val(n - 2) + 9.0 * val(n - 3) - 2.0 * val(n - 4)) /
         (6 * h);
}
}  // namespace detail

/// @brief Gradient (d/dt, d/dx1, d/dx2) of a sampled field by centered FD
/// (one-sided third-order at box faces).
inline Covec fd_gradient(const GridField& f, int i, int j, int k) {
  return Covec(detail::fd_axis(f, i, j, k, 0), detail::fd_axis(f, i, j, k, 1),
               detail::fd_axis(f, i, j, k, 2));
}

}  // namespace wavetrace
