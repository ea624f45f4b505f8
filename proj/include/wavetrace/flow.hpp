#pragma once

// Null bicharacteristic flow: adaptive Dormand-Prince 5(4) integration of the
// Hamilton equations with dense output, exact affine "leaps" through the flat
// exterior, exit-event localization by bisection, the linearized (Jacobi)
// flow, and the focal-point scan built on it.

#include "wavetrace/core.hpp"
#include "wavetrace/errors.hpp"
#include "wavetrace/io.hpp"
#include "wavetrace/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace wavetrace {

// Default integrator tolerances. 1e-12 keeps the Hamiltonian drift of the
// pullback family below 1e-9 over r-spans of 40 (measured worst 1.4e-10 over
// 200 random rays; at 1e-10 the drift reaches 1.3e-8).
struct OdeTol {
  double abs = 1e-12;
  double rel = 1e-12;
};

struct PhasePoint {
  Vec z;
  Covec zeta;
};

template <int N>
using StateVec = DenseVec<double, N>;

/// @brief One accepted step with endpoint values/derivatives plus the
/// order-4 continuous-extension coefficients of the Dormand-Prince pair.
/// An event may truncate the covered span [r0, r1] to a prefix of the
/// interpolation interval h_dense without invalidating the polynomial.
template <int N>
struct OdeStep {
  double r0, r1;
  double h_dense;  // interpolation interval of the accepted step
  StateVec<N> y0, y1, f0, f1;
  StateVec<N> c2, c3, c4, c5;  // dense-output coefficients

  StateVec<N> eval(double r) const {
    if (h_dense == 0.0) return y1;
    const double th = (r - r0) / h_dense;
    const double th1 = 1.0 - th;
    return y0 + th * (c2 + th1 * (c3 + th * (c4 + th1 * c5)));
  }
};

template <int N>
struct Trajectory {
  std::vector<OdeStep<N>> steps;

  double r_begin() const { return steps.empty() ? 0.0 : steps.front().r0; }
  double r_end() const { return steps.empty() ? 0.0 : steps.back().r1; }

  /// @brief Dense-output evaluation; r clamped to the covered span.
  StateVec<N> eval(double r) const {
    if (steps.empty()) fail(ErrorCode::EmptyInput, "empty trajectory");
    const bool fwd = steps.back().r1 >= steps.front().r0;
    std::size_t lo = 0, hi = steps.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      const bool after = fwd ? (r > steps[mid].r1) : (r < steps[mid].r1);
      if (after)
        lo = mid + 1;
      else
        hi = mid;
    }
    return steps[lo].eval(r);
  }
};

namespace detail {

// Dormand-Prince 5(4) tableau (FSAL).
inline constexpr double kDpC[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
inline constexpr double kDpA[7][6] = {
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
// 5th-order weights equal the last tableau row (FSAL); the embedded 4th-order
// weights below give the error estimate.
inline constexpr double kDpB4[7] = {5179.0 / 57600, 0.0,           7571.0 / 16695,
                                    393.0 / 640,    -92097.0 / 339200,
                                    187.0 / 2100,   1.0 / 40};
// Dense-output weights of the order-4 continuous extension.
inline constexpr double kDpD[7] = {-12715105075.0 / 11282082432.0,
                                   0.0,
                                   87487479700.0 / 32700410799.0,
                                   -10690763975.0 / 1880347072.0,
                                   701980252875.0 / 199316789632.0,
                                   -1453857185.0 / 822651844.0,
                                   69997945.0 / 29380423.0};

}  // namespace detail

/// @brief Adaptive DP5(4) stepper with PI step-size control. Direction is the
/// sign of (r_target - r0); call step(limit) repeatedly.
template <int N, class Rhs>
class Dp5Stepper {
 public:
  Dp5Stepper(Rhs rhs, const OdeTol& tol, double r0, const StateVec<N>& y0,
             double h_init = 1e-3)
      : rhs_(rhs), tol_(tol), r_(r0), y_(y0), f_(rhs_(r0, y0)), h_mag_(h_init) {}

  double r() const { return r_; }
  const StateVec<N>& y() const { return y_; }
  const StateVec<N>& f() const { return f_; }

  /// @brief Jump the state along the current derivative (exact in affine
  /// regions); returns the recorded step.
  OdeStep<N> leap(double r_to) {
    OdeStep<N> s;
    s.r0 = r_;
    s.r1 = r_to;
    s.h_dense = r_to - r_;
    s.y0 = y_;
    s.y1 = y_ + (r_to - r_) * f_;
    s.f0 = s.f1 = f_;  // derivative is unchanged along an affine segment
    s.c2 = s.y1 - s.y0;
    s.c3 = s.c4 = s.c5 = StateVec<N>::Zero();
    r_ = r_to;
    y_ = s.y1;
    return s;
  }

  /// @brief One accepted adaptive step toward r_limit (never past it).
  OdeStep<N> step(double r_limit) {
    const double dir = (r_limit >= r_) ? 1.0 : -1.0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      double h = dir * h_mag_;
      bool capped = false;
      if ((r_ + h - r_limit) * dir > 0) {
        h = r_limit - r_;
        capped = true;
      }
      if (std::abs(h) < 1e-14 * std::max(1.0, std::abs(r_))) {
        // A sub-ulp remainder to the limit is finished affinely; a genuine
        // error-control underflow is fatal.
        if (capped) return leap(r_limit);
        fail(ErrorCode::StepSizeUnderflow, "at r = " + fmt17(r_));
      }
      StateVec<N> k[7];
      k[0] = f_;
      for (int i = 1; i < 7; ++i) {
        StateVec<N> yi = y_;
        for (int j = 0; j < i; ++j)
          if (detail::kDpA[i][j] != 0.0) yi += h * detail::kDpA[i][j] * k[j];
        k[i] = rhs_(r_ + detail::kDpC[i] * h, yi);
      }
      // FSAL: stage 6 argument is already the 5th-order solution.
      StateVec<N> y1 = y_;
      for (int j = 0; j < 6; ++j)
        if (detail::kDpA[6][j] != 0.0) y1 += h * detail::kDpA[6][j] * k[j];
      StateVec<N> y4 = y_;
      for (int j = 0; j < 7; ++j)
        if (detail::kDpB4[j] != 0.0) y4 += h * detail::kDpB4[j] * k[j];
      if (!y1.allFinite()) fail(ErrorCode::NonFinite, "state blew up at r = " + fmt17(r_));
      double err2 = 0.0;
      for (int c = 0; c < N; ++c) {
        const double sc = tol_.abs + tol_.rel * std::max(std::abs(y_[c]), std::abs(y1[c]));
        const double e = (y1[c] - y4[c]) / sc;
        err2 += e * e;
      }
      const double err = std::sqrt(err2 / N);
      if (err <= 1.0) {
        OdeStep<N> s;
        s.r0 = r_;
        // Snap capped steps to the limit exactly so callers' loop guards see
        // the target reached (r_ + (r_limit - r_) can land one ulp short).
        s.r1 = capped ? r_limit : r_ + h;
        s.h_dense = h;
        s.y0 = y_;
        s.y1 = y1;
        s.f0 = k[0];
        s.f1 = k[6];
        s.c2 = y1 - y_;
        s.c3 = h * k[0] - s.c2;
        s.c4 = s.c2 - h * k[6] - s.c3;
        s.c5 = StateVec<N>::Zero();
        for (int j = 0; j < 7; ++j)
          if (detail::kDpD[j] != 0.0) s.c5 += (h * detail::kDpD[j]) * k[j];
        r_ = s.r1;
        y_ = y1;
        f_ = k[6];
        const double fac = 0.9 * std::pow(std::max(err, 1e-10), -0.7 / 5.0) *
                           std::pow(err_prev_, 0.4 / 5.0);
        h_mag_ = std::abs(h) * std::clamp(fac, 0.2, 5.0);
        err_prev_ = std::max(err, 1e-4);
        return s;
      }
      h_mag_ = std::abs(h) * std::clamp(0.9 * std::pow(err, -0.2), 0.1, 0.9);
    }
    fail(ErrorCode::StepSizeUnderflow, "no accepted step at r = " + fmt17(r_));
  }

 private:
  Rhs rhs_;
  OdeTol tol_;
  double r_;
  StateVec<N> y_, f_;
  double h_mag_;
  double err_prev_ = 1e-4;
};

// ---------------------------------------------------------------------------
// Ray state and right-hand sides
// ---------------------------------------------------------------------------

namespace detail {

template <int N>
Vec state_z(const StateVec<N>& y) {
  return Vec(y[0], y[1], y[2]);
}
template <int N>
Covec state_zeta(const StateVec<N>& y) {
  return Covec(y[3], y[4], y[5]);
}

/// @brief True where the model is exactly flat: outside the support cylinder
/// or outside the support time slab.
template <class M>
bool in_flat_zone(const M& m, const Vec& z) {
  const double r = std::hypot(z[1], z[2]);
  return r >= m.support_radius() || std::abs(z[0]) >= m.support_time();
}

/// @brief Largest leap from z along constant velocity v staying in the flat
/// zone, capped at dr_max (signed, same sign as dr_max). Returns 0 when no
/// leap is possible.
template <class M>
double flat_leap_extent(const M& m, const Vec& z, const Vec& v, double dr_max) {
  if (dr_max == 0.0 || !in_flat_zone(m, z)) return 0.0;
  const double sgn = (dr_max > 0) ? 1.0 : -1.0;
  // Work in the forward parameter s = sgn*dr >= 0 with velocity u = sgn*v.
  const Vec u = sgn * v;
  const double s_max = sgn * dr_max;
  const double Rs = m.support_radius(), Ts = m.support_time();
  // Entry interval into {|x| < Rs}.
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo;
  {
    const double a = u[1] * u[1] + u[2] * u[2];
    const double b = z[1] * u[1] + z[2] * u[2];
    const double c = z[1] * z[1] + z[2] * z[2] - Rs * Rs;
    if (a > 0) {
      const double disc = b * b - a * c;
      if (disc > 0) {
        xlo = (-b - std::sqrt(disc)) / a;
        xhi = (-b + std::sqrt(disc)) / a;
      }
    } else if (c < 0) {
      xlo = -std::numeric_limits<double>::infinity();
      xhi = std::numeric_limits<double>::infinity();
    }
  }
  // Entry interval into {|t| < Ts}.
  double tlo = -std::numeric_limits<double>::infinity(), thi = -tlo;
  if (std::isfinite(Ts)) {
    if (u[0] != 0.0) {
      tlo = (-Ts - z[0]) / u[0];
      thi = (Ts - z[0]) / u[0];
      if (tlo > thi) std::swap(tlo, thi);
    } else if (std::abs(z[0]) >= Ts) {
      tlo = std::numeric_limits<double>::infinity();
      thi = -tlo;
    }
  }
  const double lo = std::max(xlo, tlo), hi = std::min(xhi, thi);
  double entry = s_max;  // no support crossing within range
  if (lo < hi && hi > 0) entry = std::min(entry, std::max(lo, 0.0));
  if (entry <= 0) return 0.0;
  return sgn * entry;
}

}  // namespace detail

/// @brief RHS of the Hamilton system, state y = (z, ζ).
template <class M>
struct RayRhs {
  const M* model;
  StateVec<6> operator()(double, const StateVec<6>& y) const {
    const HamGrad h =
        hamiltonian_gradients(*model, detail::state_z(y), detail::state_zeta(y));
    StateVec<6> f;
    f << h.dp_dzeta[0], h.dp_dzeta[1], h.dp_dzeta[2], -h.dp_dz[0], -h.dp_dz[1],
        -h.dp_dz[2];
    return f;
  }
};

/// @brief RHS of the Hamilton system coupled with two Jacobi variations,
/// state y = (z, ζ, δz_t, δζ_t, δz_y, δζ_y).
template <class M>
struct VariationalRhs {
  const M* model;
  StateVec<18> operator()(double, const StateVec<18>& y) const {
    const Vec z = Vec(y[0], y[1], y[2]);
    const Covec zeta = Covec(y[3], y[4], y[5]);
    const HamHess H = hamiltonian_hessians(*model, z, zeta);
    StateVec<18> f;
    f.template segment<3>(0) = H.grad.dp_dzeta;
    f.template segment<3>(3) = -H.grad.dp_dz;
    for (int s = 0; s < 2; ++s) {
      const Vec dz = y.template segment<3>(6 + 6 * s);
      const Covec dzeta = y.template segment<3>(9 + 6 * s);
      // δż_j   =  Σ_l ∂²p/∂z_l∂ζ_j δz_l + (∂²p/∂ζ∂ζ δζ)_j
      // δζ̇_l  = -Σ_m ∂²p/∂z_l∂z_m δz_m - Σ_j ∂²p/∂z_l∂ζ_j δζ_j
      f.template segment<3>(6 + 6 * s) = H.p_zzeta.transpose() * dz + H.p_zetazeta * dzeta;
      f.template segment<3>(9 + 6 * s) = -(H.p_zz * dz) - (H.p_zzeta * dzeta);
    }
    return f;
  }
};

// ---------------------------------------------------------------------------
// Ray tracing with exit events
// ---------------------------------------------------------------------------

struct RayRecord {
  Vec z0;
  SpaceVec omega;
  Covec zeta0;
  Trajectory<6> traj;
  std::optional<double> r_plus;  // event parameter (signed for backward rays)
  PhasePoint exit{};             // valid when r_plus is set
  bool not_exited_by_cap = false;
  bool grazing = false;
  double ham_drift = 0.0;        // max |p| over step endpoints and the event
};

struct TraceOptions {
  double r_cap = 100.0;
  OdeTol tol{};
  double event_tol = 1e-10;   // bisection width in r
  double graze_tol = 1e-6;    // |d(x·ω)/dr| below this at the event → grazing
  double plane_c = 1.0;       // event plane x·ω = plane_c
  double direction = 1.0;     // +1 forward in r, -1 backward
};

/// @brief Integrate the bicharacteristic from (z0, ζ0) until x·ω crosses the
/// event plane, the cap is reached, or (direction<0) the backward cap.
template <class M>
RayRecord trace_ray(const M& m, const Vec& z0, const Covec& zeta0,
                    const SpaceVec& omega, const TraceOptions& opt = {}) {
  RayRecord rec;
  rec.z0 = z0;
  rec.omega = omega;
  rec.zeta0 = zeta0;
  const double r_target = opt.direction * opt.r_cap;

  StateVec<6> y0;
  y0 << z0[0], z0[1], z0[2], zeta0[0], zeta0[1], zeta0[2];
  RayRhs<M> rhs{&m};
  Dp5Stepper<6, RayRhs<M>> stepper(rhs, opt.tol, 0.0, y0);

  auto plane_val = [&](const StateVec<6>& y) {
    return y[1] * omega[0] + y[2] * omega[1] - opt.plane_c;
  };
  auto track_drift = [&](const StateVec<6>& y) {
    const double p = hamiltonian(m, detail::state_z(y), detail::state_zeta(y));
    rec.ham_drift = std::max(rec.ham_drift, std::abs(p));
  };
  track_drift(y0);

  double e_prev = plane_val(y0);
  while (opt.direction * (stepper.r() - r_target) < 0) {
    OdeStep<6> s;
    const Vec zc = detail::state_z(stepper.y());
    const double leap =
        detail::flat_leap_extent(m, zc, stepper.f().template head<3>().eval(),
                                 r_target - stepper.r());
    if (opt.direction * leap > 1e-12) {
      const double rem = r_target - stepper.r();
      s = stepper.leap(std::abs(leap) >= std::abs(rem) ? r_target
                                                       : stepper.r() + leap);
    } else {
      s = stepper.step(r_target);
    }
    track_drift(s.y1);
    const double e_now = plane_val(s.y1);
    if ((e_prev < 0) != (e_now < 0) || e_now == 0.0) {
      // Bisection on the dense output down to event_tol in r.
      double lo = s.r0, hi = s.r1;
      double e_lo = e_prev;
      while (std::abs(hi - lo) > opt.event_tol) {
        const double mid = 0.5 * (lo + hi);
        const double e_mid = plane_val(s.eval(mid));
        if ((e_mid < 0) == (e_lo < 0)) {
          lo = mid;
          e_lo = e_mid;
        } else {
          hi = mid;
        }
      }
      double r_ev = 0.5 * (lo + hi);
      // Newton polish on the dense output (exact for affine leap steps).
      for (int it = 0; it < 3; ++it) {
        const StateVec<6> ym = s.eval(r_ev);
        const StateVec<6> fm = rhs(r_ev, ym);
        const double slope = fm[1] * omega[0] + fm[2] * omega[1];
        if (std::abs(slope) < opt.graze_tol) break;
        const double r_next = r_ev - plane_val(ym) / slope;
        if (r_next < std::min(s.r0, s.r1) || r_next > std::max(s.r0, s.r1)) break;
        r_ev = r_next;
      }
      const StateVec<6> ye = s.eval(r_ev);
      rec.r_plus = r_ev;
      rec.exit = {detail::state_z(ye), detail::state_zeta(ye)};
      track_drift(ye);
      // Grazing check: slope of x·ω along the ray at the event.
      const StateVec<6> fe = rhs(r_ev, ye);
      rec.grazing = std::abs(fe[1] * omega[0] + fe[2] * omega[1]) < opt.graze_tol;
      // Truncate the final step at the event for a clean trajectory span.
      s.r1 = r_ev;
      s.y1 = ye;
      s.f1 = fe;
      rec.traj.steps.push_back(s);
      return rec;
    }
    e_prev = e_now;
    rec.traj.steps.push_back(s);
  }
  rec.not_exited_by_cap = true;
  return rec;
}

/// @brief Trace the null geodesic from z0 ∈ Σ_- with initial covector (1,-ω).
template <class M>
RayRecord geodesic_from_sigma_minus(const M& m, const SpaceVec& omega, const Vec& z0,
                                    double r_cap = 100.0, const OdeTol& tol = {}) {
  const double off = z0[1] * omega[0] + z0[2] * omega[1] + 1.0;
  if (std::abs(off) > 1e-12)
    fail(ErrorCode::BadInitialPoint,
         "x·ω + 1 = " + fmt17(off) + " (start must lie on the incoming plane)");
  TraceOptions opt;
  opt.r_cap = r_cap;
  opt.tol = tol;
  return trace_ray(m, z0, Covec(1.0, -omega[0], -omega[1]), omega, opt);
}

// ---------------------------------------------------------------------------
// Variational (Jacobi) flow
// ---------------------------------------------------------------------------

struct JacobiNode {
  double r;
  Mat dPhi;          // columns: [J_t | J_y | γ̇]
  double det;
  double pairing_t;  // g(J_t, γ̇) = -⟨ζ, J_t⟩, conserved along the ray
};

struct VariationalRecord {
  RayRecord ray;
  std::vector<JacobiNode> nodes;  // one per accepted step endpoint (incl. r=0)
};

/// @brief Co-integrate the ray and the two Σ_- seed variations
/// (∂_t:  δz=(1,0,0);  ∂_y:  δz=(0,ω^⊥)), both with δζ = 0.
template <class M>
VariationalRecord variational_flow(const M& m, const SpaceVec& omega, const Vec& z0,
                                   double r_cap = 100.0, const OdeTol& tol = {},
                                   double plane_c = 1.0) {
  const double off = z0[1] * omega[0] + z0[2] * omega[1] + 1.0;
  if (std::abs(off) > 1e-12)
    fail(ErrorCode::BadInitialPoint, "x·ω + 1 = " + fmt17(off));
  const Covec zeta0(1.0, -omega[0], -omega[1]);
  const SpaceVec perp(-omega[1], omega[0]);

  StateVec<18> y0 = StateVec<18>::Zero();
  y0 << z0[0], z0[1], z0[2], zeta0[0], zeta0[1], zeta0[2],
      // ∂_t seed
      1, 0, 0, 0, 0, 0,
      // ∂_y seed
      0, perp[0], perp[1], 0, 0, 0;

  VariationalRecord out;
  out.ray.z0 = z0;
  out.ray.omega = omega;
  out.ray.zeta0 = zeta0;

  VariationalRhs<M> rhs{&m};
  Dp5Stepper<18, VariationalRhs<M>> stepper(rhs, tol, 0.0, y0);

  auto plane_val = [&](const StateVec<18>& y) {
    return y[1] * omega[0] + y[2] * omega[1] - plane_c;
  };
  auto node_of = [&](double r, const StateVec<18>& y, const StateVec<18>& f) {
    JacobiNode n;
    n.r = r;
    n.dPhi.col(0) = y.template segment<3>(6);
    n.dPhi.col(1) = y.template segment<3>(12);
    n.dPhi.col(2) = f.template segment<3>(0);  // γ̇ = dz/dr
    n.det = n.dPhi.determinant();
    const Covec zeta = y.template segment<3>(3);
    n.pairing_t = -zeta.dot(Vec(y[6], y[7], y[8]));
    return n;
  };
  auto base_step = [](const OdeStep<18>& s) {
    OdeStep<6> b;
    b.r0 = s.r0;
    b.r1 = s.r1;
    b.h_dense = s.h_dense;
    b.y0 = s.y0.template head<6>();
    b.y1 = s.y1.template head<6>();
    b.f0 = s.f0.template head<6>();
    b.f1 = s.f1.template head<6>();
    b.c2 = s.c2.template head<6>();
    b.c3 = s.c3.template head<6>();
    b.c4 = s.c4.template head<6>();
    b.c5 = s.c5.template head<6>();
    return b;
  };
  auto track_drift = [&](const StateVec<18>& y) {
    const double p = hamiltonian(m, Vec(y[0], y[1], y[2]), Covec(y[3], y[4], y[5]));
    out.ray.ham_drift = std::max(out.ray.ham_drift, std::abs(p));
  };

  out.nodes.push_back(node_of(0.0, y0, rhs(0.0, y0)));
  track_drift(y0);
  double e_prev = plane_val(y0);
  while (stepper.r() < r_cap) {
    OdeStep<18> s;
    const Vec zc(stepper.y()[0], stepper.y()[1], stepper.y()[2]);
    const double rem = r_cap - stepper.r();
    const double leap = detail::flat_leap_extent(
        m, zc, stepper.f().template head<3>().eval(), rem);
    if (leap > 1e-12) {
      s = stepper.leap(leap >= rem ? r_cap : stepper.r() + leap);
    } else {
      s = stepper.step(r_cap);
    }
    track_drift(s.y1);
    const double e_now = plane_val(s.y1);
    if ((e_prev < 0) != (e_now < 0) || e_now == 0.0) {
      double lo = s.r0, hi = s.r1, e_lo = e_prev;
      while (hi - lo > 1e-10) {
        const double mid = 0.5 * (lo + hi);
        if ((plane_val(s.eval(mid)) < 0) == (e_lo < 0))
          lo = mid;
        else
          hi = mid;
      }
      double r_ev = 0.5 * (lo + hi);
      for (int it = 0; it < 3; ++it) {
        const StateVec<18> ym = s.eval(r_ev);
        const StateVec<18> fm = rhs(r_ev, ym);
        const double slope = fm[1] * omega[0] + fm[2] * omega[1];
        if (std::abs(slope) < 1e-6) break;
        const double r_next = r_ev - plane_val(ym) / slope;
        if (r_next < std::min(s.r0, s.r1) || r_next > std::max(s.r0, s.r1)) break;
        r_ev = r_next;
      }
      const StateVec<18> ye = s.eval(r_ev);
      const StateVec<18> fe = rhs(r_ev, ye);
      out.ray.r_plus = r_ev;
      out.ray.exit = {Vec(ye[0], ye[1], ye[2]), Covec(ye[3], ye[4], ye[5])};
      track_drift(ye);
      s.r1 = r_ev;
      s.y1 = ye;
      s.f1 = fe;
      out.ray.traj.steps.push_back(base_step(s));
      out.nodes.push_back(node_of(r_ev, ye, fe));
      return out;
    }
    e_prev = e_now;
    out.ray.traj.steps.push_back(base_step(s));
    out.nodes.push_back(node_of(s.r1, s.y1, s.f1));
  }
  out.ray.not_exited_by_cap = true;
  return out;
}

// ---------------------------------------------------------------------------
// Flow to a fixed parameter value (no exit event)
// ---------------------------------------------------------------------------

/// @brief Integrate the bicharacteristic from (z0, ζ0) to parameter r_target
/// (signed; negative runs backward). Returns the endpoint phase point.
template <class M>
PhasePoint flow_to(const M& m, const Vec& z0, const Covec& zeta0, double r_target,
                   const OdeTol& tol = {}) {
  if (r_target == 0.0) return {z0, zeta0};
  StateVec<6> y0;
  y0 << z0[0], z0[1], z0[2], zeta0[0], zeta0[1], zeta0[2];
  RayRhs<M> rhs{&m};
  Dp5Stepper<6, RayRhs<M>> stepper(rhs, tol, 0.0, y0);
  const double dir = (r_target > 0) ? 1.0 : -1.0;
  while (dir * (stepper.r() - r_target) < 0) {
    const Vec zc = detail::state_z(stepper.y());
    const double rem = r_target - stepper.r();
    const double leap = detail::flat_leap_extent(
        m, zc, stepper.f().template head<3>().eval(), rem);
    if (dir * leap > 1e-12)
      stepper.leap(std::abs(leap) >= std::abs(rem) ? r_target
                                                   : stepper.r() + leap);
    else
      stepper.step(r_target);
  }
  return {detail::state_z(stepper.y()), detail::state_zeta(stepper.y())};
}

/// @brief Endpoint of the plane flowout together with its first derivative.
struct FlowoutJet {
  PhasePoint end{};            // z = Φ(t0, y, r) and ζ(r) there
  Mat dPhi = Mat::Zero();      // columns [∂z/∂t0 | ∂z/∂y | γ̇]
  double det = 0.0;            // det dPhi
};

/// @brief Co-integrate the ray and the plane seed variations to parameter
/// r_target (signed), without exit events. z0 must lie on x·ω = −1.
template <class M>
FlowoutJet variational_to(const M& m, const SpaceVec& omega, const Vec& z0,
                          double r_target, const OdeTol& tol = {}) {
  const SpaceVec perp(-omega[1], omega[0]);
  const Covec zeta0(1.0, -omega[0], -omega[1]);
  StateVec<18> y0 = StateVec<18>::Zero();
  y0 << z0[0], z0[1], z0[2], zeta0[0], zeta0[1], zeta0[2],
      // ∂_t seed
      1, 0, 0, 0, 0, 0,
      // ∂_y seed
      0, perp[0], perp[1], 0, 0, 0;
  VariationalRhs<M> rhs{&m};
  Dp5Stepper<18, VariationalRhs<M>> stepper(rhs, tol, 0.0, y0);
  const double dir = (r_target > 0) ? 1.0 : -1.0;
  while (dir * (stepper.r() - r_target) < 0) {
    const Vec zc(stepper.y()[0], stepper.y()[1], stepper.y()[2]);
    const double rem = r_target - stepper.r();
    const double leap = detail::flat_leap_extent(
        m, zc, stepper.f().template head<3>().eval(), rem);
    if (dir * leap > 1e-12)
      stepper.leap(std::abs(leap) >= std::abs(rem) ? r_target
                                                   : stepper.r() + leap);
    else
      stepper.step(r_target);
  }
  const StateVec<18>& ye = stepper.y();
  const StateVec<18> fe = rhs(stepper.r(), ye);
  FlowoutJet out;
  out.end = {Vec(ye[0], ye[1], ye[2]), Covec(ye[3], ye[4], ye[5])};
  out.dPhi.col(0) = ye.template segment<3>(6);
  out.dPhi.col(1) = ye.template segment<3>(12);
  out.dPhi.col(2) = fe.template segment<3>(0);
  out.det = out.dPhi.determinant();
  return out;
}

// ---------------------------------------------------------------------------
// Focal scan
// ---------------------------------------------------------------------------

struct FocalHit {
  Vec z0;
  double r_lo, r_hi;    // bracketing interval of the det sign change / dip
  double det_lo, det_hi;
};

/// @brief Scan a (t0, y) grid of starting points on Σ_- for zeros or sign
/// changes of det[DΦ | γ̇]; an empty result certifies no focal point at this
/// resolution.
template <class M>
std::vector<FocalHit> focal_scan(const M& m, const SpaceVec& omega,
                                 const std::vector<double>& t_nodes,
                                 const std::vector<double>& y_nodes,
                                 double r_cap = 100.0, double det_tol = 1e-6,
                                 const OdeTol& tol = {}) {
  if (t_nodes.empty() || y_nodes.empty()) fail(ErrorCode::EmptyInput, "empty focal grid");
  const SpaceVec perp(-omega[1], omega[0]);
  const int nt = int(t_nodes.size()), ny = int(y_nodes.size());
  std::vector<std::optional<FocalHit>> hits(std::size_t(nt) * ny);
  std::exception_ptr first_error;
#pragma omp parallel for schedule(static)
  for (int idx = 0; idx < nt * ny; ++idx) {
    try {
      const double t0 = t_nodes[idx / ny];
      const double yv = y_nodes[idx % ny];
      const Vec z0(t0, -omega[0] + yv * perp[0], -omega[1] + yv * perp[1]);
      const VariationalRecord vr = variational_flow(m, omega, z0, r_cap, tol);
      for (std::size_t i = 1; i < vr.nodes.size(); ++i) {
        const auto& a = vr.nodes[i - 1];
        const auto& b = vr.nodes[i];
        if (a.det * b.det < 0 || std::abs(b.det) < det_tol) {
          hits[idx] = FocalHit{z0, a.r, b.r, a.det, b.det};
          break;
        }
      }
    } catch (...) {
#pragma omp critical
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (first_error) std::rethrow_exception(first_error);
  std::vector<FocalHit> out;
  for (const auto& h : hits)
    if (h) out.push_back(*h);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline void ray_to_csv(const RayRecord& rec, const std::filesystem::path& path) {
  CsvWriter csv(path, {"r", "t", "x1", "x2", "zeta_t", "zeta_x1", "zeta_x2"});
  auto row = [&](double r, const StateVec<6>& y) {
    csv.row({r, y[0], y[1], y[2], y[3], y[4], y[5]});
  };
  if (!rec.traj.steps.empty()) row(rec.traj.steps.front().r0, rec.traj.steps.front().y0);
  for (const auto& s : rec.traj.steps) row(s.r1, s.y1);
}

inline json ray_summary_json(const RayRecord& rec) {
  json j;
  j["z0"] = {json_num(rec.z0[0]), json_num(rec.z0[1]), json_num(rec.z0[2])};
  j["omega"] = {json_num(rec.omega[0]), json_num(rec.omega[1])};
  j["ham_drift"] = json_num(rec.ham_drift);
  j["flags"] = json::array();
  if (rec.not_exited_by_cap) j["flags"].push_back("NotExitedByCap");
  if (rec.grazing) j["flags"].push_back("GrazingExit");
  if (rec.r_plus) {
    j["r_plus"] = json_num(*rec.r_plus);
    j["exit"] = {{"z", {json_num(rec.exit.z[0]), json_num(rec.exit.z[1]),
                        json_num(rec.exit.z[2])}},
                 {"zeta", {json_num(rec.exit.zeta[0]), json_num(rec.exit.zeta[1]),
                           json_num(rec.exit.zeta[2])}}};
  }
  return j;
}

}  // namespace wavetrace
