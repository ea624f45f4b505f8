#pragma once

// Transport stage. From a completed eikonal field this computes the wave
// operator applied to the phase on the grid, progressing-wave amplitudes
// u0 (and u1) along the plane-flowout rays, and the pointwise residual of
// the transport operator L = 2Z + (box phi).

#include "wavetrace/eikonal.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>
#include <vector>

namespace wavetrace {

// ---------------------------------------------------------------------------
// Grid d'Alembertian from sampled data
// ---------------------------------------------------------------------------

namespace detail {

/// @brief Divergence-form wave operator from per-node gradient samples:
/// -|g|^{-1/2} D_j(|g|^{1/2} g^{jk} s_k) with grid FD for the outer D_j.
template <class M>
GridField divergence_box(const M& m, const GridSpec& grid,
                         const std::vector<Covec>& samples) {
  std::array<GridField, 3> flux{GridField(grid), GridField(grid),
                                GridField(grid)};
  const long long n = (long long)grid.size();
#pragma omp parallel for
  for (long long id = 0; id < n; ++id) {
    int i, j, k;
    grid.coords_of(std::size_t(id), i, j, k);
    const Vec w = grid.node(i, j, k);
    const Vec v = m.sqrt_det(w) * (inverse_metric_at(m, w) * samples[id]);
    flux[0].v[id] = v[0];
    flux[1].v[id] = v[1];
    flux[2].v[id] = v[2];
  }
  GridField out(grid);
#pragma omp parallel for
  for (long long id = 0; id < n; ++id) {
    int i, j, k;
    grid.coords_of(std::size_t(id), i, j, k);
    const double div = fd_axis(flux[0], i, j, k, 0) +
                       fd_axis(flux[1], i, j, k, 1) +
                       fd_axis(flux[2], i, j, k, 2);
    out.v[id] = -div / m.sqrt_det(grid.node(i, j, k));
  }
  return out;
}

}  // namespace detail

/// @brief Wave operator applied to the eikonal phase on the field grid,
/// using the stored gradient samples. Exterior nodes come out as 0 up to
/// FD error because the phase is linear there.
template <class M>
GridField box_phi_field(const M& m, const EikonalField& f) {
  if (f.n_failed() > 0)
    fail(ErrorCode::FieldIncomplete,
         std::to_string(f.n_failed()) +
             " failed nodes; the grid wave operator needs a complete field");
  return detail::divergence_box(m, f.grid, f.dphi);
}

/// @brief Wave operator applied to a node-sampled scalar field: grid-FD
/// gradient first, then the divergence form.
template <class M>
GridField box_scalar_field(const M& m, const GridField& u) {
  std::vector<Covec> du(u.spec.size());
  const long long n = (long long)u.spec.size();
#pragma omp parallel for
  for (long long id = 0; id < n; ++id) {
    int i, j, k;
    u.spec.coords_of(std::size_t(id), i, j, k);
    du[id] = fd_gradient(u, i, j, k);
  }
  return detail::divergence_box(m, u.spec, du);
}

// ---------------------------------------------------------------------------
// Along-ray quadrature
// ---------------------------------------------------------------------------

/// @brief Options for the along-ray Simpson quadratures.
struct RayQuadOptions {
  double tol = 1e-8;       // Richardson tolerance on the integral
  int min_panels = 4;      // panels of the first composite pass
  int max_doublings = 14;  // cap: min_panels * 2^max_doublings panels
  OdeTol ode{};            // ray integration tolerances
};

namespace detail {

/// @brief Null ray from the plane seed as a dense-output trajectory covering
/// parameter [0, r_target] (r_target != 0, either sign).
template <class M>
Trajectory<6> ray_span(const M& m, const Vec& z0, const Covec& zeta0,
                       double r_target, const OdeTol& tol) {
  StateVec<6> y0;
  y0 << z0[0], z0[1], z0[2], zeta0[0], zeta0[1], zeta0[2];
  RayRhs<M> rhs{&m};
  Dp5Stepper<6, RayRhs<M>> stepper(rhs, tol, 0.0, y0);
  const double dir = (r_target > 0) ? 1.0 : -1.0;
  Trajectory<6> out;
  while (dir * (stepper.r() - r_target) < 0) {
    const Vec zc = state_z(stepper.y());
    const double rem = r_target - stepper.r();
    const double leap = flat_leap_extent(
        m, zc, stepper.f().template head<3>().eval(), rem);
    if (dir * leap > 1e-12)
      out.steps.push_back(stepper.leap(
          std::abs(leap) >= std::abs(rem) ? r_target : stepper.r() + leap));
    else
      out.steps.push_back(stepper.step(r_target));
  }
  return out;
}

/// @brief Composite Simpson on [0, r] with panel doubling until the
/// Richardson estimate |S_2n - S_n| / 15 meets tol. Evaluation order is
/// ascending in the parameter so stateful integrands can walk seeds along
/// the ray. Returns {integral, estimate}.
template <class F>
std::pair<double, double> simpson_doubling(F&& fn, double r,
                                           const RayQuadOptions& opt) {
  auto composite = [&](int n) {
    const double h = r / n;
    double s = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double w = (i == 0 || i == n) ? 1.0 : ((i % 2) ? 4.0 : 2.0);
      s += w * fn(i == n ? r : i * h);
    }
    return s * h / 3.0;
  };
  int n = std::max(2, opt.min_panels - opt.min_panels % 2);
  double prev = composite(n);
  for (int d = 0; d < opt.max_doublings; ++d) {
    n *= 2;
    const double cur = composite(n);
    const double est = std::abs(cur - prev) / 15.0;
    if (est <= opt.tol) return {cur, est};
    prev = cur;
  }
  fail(ErrorCode::QuadratureTolFail,
       "estimate above " + fmt17(opt.tol) + " at " + std::to_string(n) +
           " panels over span " + fmt17(r));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Amplitudes
// ---------------------------------------------------------------------------

/// @brief u0 at flowout parameter r on the ray seeded at plane point z0:
/// exp(-1/2 integral of box phi along the ray), with the integrand
/// interpolated from a precomputed grid. For r <= 0 the ray stays in the
/// flat half-space behind the seed plane and u0 is exactly 1.
template <class M>
double amplitude_u0(const M& m, const SpaceVec& omega,
                    const GridField& box_phi, const Vec& z0, double r,
                    const RayQuadOptions& opt = {},
                    double* quad_err = nullptr) {
  if (quad_err) *quad_err = 0.0;
  if (r <= 0.0) return 1.0;
  const Covec zeta0(1.0, -omega[0], -omega[1]);
  const Trajectory<6> ray = detail::ray_span(m, z0, zeta0, r, opt.ode);
  auto integrand = [&](double rho) {
    const StateVec<6> y = ray.eval(rho);
    return box_phi.interp(Vec(y[0], y[1], y[2]));
  };
  const auto [integral, est] = detail::simpson_doubling(integrand, r, opt);
  if (quad_err) *quad_err = est;
  return std::exp(-0.5 * integral);
}

/// @brief u0 with the grid built internally from the eikonal field; prefer
/// the grid overload when evaluating many rays against one field.
template <class M>
double amplitude_u0(const M& m, const SpaceVec& omega, const EikonalField& f,
                    const Vec& z0, double r, const RayQuadOptions& opt = {}) {
  return amplitude_u0(m, omega, box_phi_field(m, f), z0, r, opt);
}

/// @brief Grid-free reference for u0: the integrand is the divergence-form
/// wave operator of the inverted phase itself, by nested central differences
/// on gradients obtained from fresh Newton inversions along the ray. Slow;
/// used to cross-check the grid route at sampled rays.
template <class M>
double amplitude_u0_direct(const M& m, const SpaceVec& omega, const Vec& z0,
                           double r, const RayQuadOptions& opt = {},
                           double fd_step = 1.4e-5) {
  if (r <= 0.0) return 1.0;
  const Covec zeta0(1.0, -omega[0], -omega[1]);
  const Trajectory<6> ray = detail::ray_span(m, z0, zeta0, r, opt.ode);
  InvertOptions iopt;
  iopt.inv_tol = 1e-12;
  iopt.tol = opt.ode;
  const FlowoutCoords seed0 = straight_seed(omega, z0);
  FlowoutCoords seed = seed0;
  auto grad = [&](const Vec& y) {
    const FlowoutInverse inv = invert_phi(m, omega, y, seed, iopt);
    seed = inv.q;
    return inv.zeta;
  };
  auto integrand = [&](double rho) {
    if (rho == 0.0) seed = seed0;  // each composite pass restarts at the seed
    const StateVec<6> y = ray.eval(rho);
    return box_of(m, grad, Vec(y[0], y[1], y[2]), fd_step);
  };
  const auto [integral, est] = detail::simpson_doubling(integrand, r, opt);
  (void)est;
  return std::exp(-0.5 * integral);
}

/// @brief u1 at flowout parameter r via the first-order recursion:
/// u1(r) = -1/2 u0(r) * integral of (box u0)/u0 along the ray, with box u0
/// from grid FD of the sampled u0 and u0 under the integral interpolated
/// from the same grid.
template <class M>
double amplitude_u1(const M& m, const SpaceVec& omega,
                    const GridField& box_phi, const GridField& u0_grid,
                    const GridField& box_u0, const Vec& z0, double r,
                    const RayQuadOptions& opt = {},
                    double* quad_err = nullptr) {
  if (quad_err) *quad_err = 0.0;
  if (r <= 0.0) return 0.0;
  const Covec zeta0(1.0, -omega[0], -omega[1]);
  const Trajectory<6> ray = detail::ray_span(m, z0, zeta0, r, opt.ode);
  auto integrand = [&](double rho) {
    const StateVec<6> y = ray.eval(rho);
    const Vec w(y[0], y[1], y[2]);
    return box_u0.interp(w) / u0_grid.interp(w);  // u0 > 0 everywhere
  };
  const auto [integral, est] = detail::simpson_doubling(integrand, r, opt);
  const double u0_end = amplitude_u0(m, omega, box_phi, z0, r, opt);
  if (quad_err) *quad_err = 0.5 * u0_end * est;
  return -0.5 * u0_end * integral;
}

// ---------------------------------------------------------------------------
// Amplitude fields
// ---------------------------------------------------------------------------

/// @brief Amplitude samples u_j on the eikonal grid with per-node quadrature
/// error estimates. u0 > 0 everywhere; u0 = 1 and u1 = 0 on the half-space
/// x . omega <= -1 behind the seed plane.
struct AmplitudeField {
  int order = 0;
  SpaceVec omega = SpaceVec(1.0, 0.0);
  GridSpec grid{};
  nlohmann::json model{};
  std::string model_hash;
  double quad_tol = 1e-8;
  std::vector<double> u;
  std::vector<double> quad_err;

  double u_min() const {
    return u.empty() ? 0.0 : *std::min_element(u.begin(), u.end());
  }
  double max_quad_err() const {
    return quad_err.empty()
               ? 0.0
               : *std::max_element(quad_err.begin(), quad_err.end());
  }

  /// @brief View of the samples as a grid field (for FD and interpolation).
  GridField as_grid() const {
    GridField g(grid);
    g.v = u;
    return g;
  }
};

/// @brief Build u_j (j = 0 or 1) at every grid node by along-ray quadrature
/// from the node's stored flowout preimage. Throws FieldIncomplete on failed
/// nodes and QuadratureTolFail when a ray quadrature stalls.
template <class M>
AmplitudeField amplitude_field(const M& m, const SpaceVec& omega,
                               const EikonalField& f, int order = 0,
                               const RayQuadOptions& opt = {}) {
  if (order != 0 && order != 1)
    fail(ErrorCode::ConfigError,
         "amplitude order must be 0 or 1, got " + std::to_string(order));
  const GridField box_phi = box_phi_field(m, f);

  AmplitudeField out;
  out.order = order;
  out.omega = omega;
  out.grid = f.grid;
  out.model = f.model;
  out.model_hash = f.model_hash;
  out.quad_tol = opt.tol;
  out.u.assign(f.grid.size(), order == 0 ? 1.0 : 0.0);
  out.quad_err.assign(f.grid.size(), 0.0);

  const long long n = (long long)f.grid.size();
  std::exception_ptr first_error;

  auto fill_order0 = [&](std::vector<double>& u, std::vector<double>& err) {
#pragma omp parallel for schedule(dynamic, 64)
    for (long long id = 0; id < n; ++id) {
      try {
        const FlowoutCoords& q = f.coords[id];
        if (q.r <= 0.0) continue;  // behind the seed plane: u0 = 1 exactly
        const Vec z0 = plane_point(omega, q.t0, q.y);
        u[id] = amplitude_u0(m, omega, box_phi, z0, q.r, opt, &err[id]);
      } catch (...) {
#pragma omp critical
        if (!first_error) first_error = std::current_exception();
      }
    }
  };

  if (order == 0) {
    fill_order0(out.u, out.quad_err);
  } else {
    // u1 needs the complete u0 field for its grid-FD source term.
    std::vector<double> u0(f.grid.size(), 1.0);
    std::vector<double> err0(f.grid.size(), 0.0);
    fill_order0(u0, err0);
    if (first_error) std::rethrow_exception(first_error);
    GridField u0_grid(f.grid);
    u0_grid.v = u0;
    const GridField box_u0 = box_scalar_field(m, u0_grid);
#pragma omp parallel for schedule(dynamic, 64)
    for (long long id = 0; id < n; ++id) {
      try {
        const FlowoutCoords& q = f.coords[id];
        if (q.r <= 0.0) continue;  // behind the seed plane: u1 = 0 exactly
        const Vec z0 = plane_point(omega, q.t0, q.y);
        out.u[id] = amplitude_u1(m, omega, box_phi, u0_grid, box_u0, z0, q.r,
                                 opt, &out.quad_err[id]);
      } catch (...) {
#pragma omp critical
        if (!first_error) first_error = std::current_exception();
      }
    }
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

// ---------------------------------------------------------------------------
// Transport residual
// ---------------------------------------------------------------------------

/// @brief Pointwise |L u0| = |2 Z u0 + (box phi) u0| with Z u0 = -g(dphi, du0)
/// and du0 by grid FD of the sampled amplitude.
template <class M>
GridField transport_residual(const M& m, const SpaceVec& omega,
                             const EikonalField& f, const AmplitudeField& u0,
                             const GridField& box_phi) {
  (void)omega;
  if (u0.grid.size() != f.grid.size() || u0.u.size() != f.grid.size())
    fail(ErrorCode::ConfigError,
         "amplitude and eikonal fields live on different grids");
  const GridField u0_grid = u0.as_grid();
  GridField out(f.grid);
  const long long n = (long long)f.grid.size();
#pragma omp parallel for
  for (long long id = 0; id < n; ++id) {
    int i, j, k;
    f.grid.coords_of(std::size_t(id), i, j, k);
    const Vec w = f.grid.node(i, j, k);
    const Covec du0 = fd_gradient(u0_grid, i, j, k);
    const double zu0 = -f.dphi[id].dot(inverse_metric_at(m, w) * du0);
    out.v[id] = std::abs(2.0 * zu0 + box_phi.v[id] * u0.u[id]);
  }
  return out;
}

template <class M>
GridField transport_residual(const M& m, const SpaceVec& omega,
                             const EikonalField& f, const AmplitudeField& u0) {
  return transport_residual(m, omega, f, u0, box_phi_field(m, f));
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline json amplitude_header_json(const AmplitudeField& a) {
  json h;
  h["kind"] = "amplitude_field";
  h["order"] = a.order;
  h["omega"] = {json_num(a.omega[0]), json_num(a.omega[1])};
  h["grid"] = {{"t_min", json_num(a.grid.t_min)}, {"t_max", json_num(a.grid.t_max)},
               {"x_min", json_num(a.grid.x_min)}, {"x_max", json_num(a.grid.x_max)},
               {"nt", a.grid.nt},                 {"nx", a.grid.nx}};
  h["model"] = a.model;
  h["model_hash"] = a.model_hash;
  h["quad_tol"] = json_num(a.quad_tol);
  h["u_min"] = json_num(a.u_min());
  h["max_quad_err"] = json_num(a.max_quad_err());
  return h;
}

/// @brief Write <stem>.json (header) and <stem>.csv (node table) under dir.
inline void write_amplitude_field(const AmplitudeField& a,
                                  const std::filesystem::path& dir,
                                  const std::string& stem) {
  std::filesystem::create_directories(dir);
  write_json(dir / (stem + ".json"), amplitude_header_json(a));
  CsvWriter table(dir / (stem + ".csv"), {"t", "x1", "x2", "u", "quad_err"});
  const auto& g = a.grid;
  for (int i = 0; i < g.nt; ++i)
    for (int j = 0; j < g.nx; ++j)
      for (int k = 0; k < g.nx; ++k) {
        const std::size_t id = g.idx(i, j, k);
        const Vec w = g.node(i, j, k);
        table.row_mixed({fmt17(w[0]), fmt17(w[1]), fmt17(w[2]), fmt17(a.u[id]),
                         fmt17(a.quad_err[id])});
      }
}

}  // namespace wavetrace
