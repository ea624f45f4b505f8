#pragma once

// Metric model families on R^{1+2}: flat space, a compactly supported
// pullback-of-flat "twirl" diffeomorphism, a conformal ultrastatic bump, and
// an ultrastatic strip model with focusing (used as a negative control).
// Every family carries analytic metric derivatives to second order, an exact
// sqrt|det g|, a JSON descriptor, and exterior flatness: g = diag(-1,1,1)
// bit-for-bit once |x| >= support radius (and, for the twirl, |t| >= t_w).

#include "wavetrace/core.hpp"
#include "wavetrace/errors.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace wavetrace {

using MatArr3 = std::array<Mat, 3>;
using MatArr33 = std::array<std::array<Mat, 3>, 3>;

/// @brief Metric with first derivatives dg[l] = d g / d z_l.
struct MetricJet1 {
  Mat g;
  MatArr3 dg;
};

/// @brief Metric with first and (symmetric) second derivatives.
struct MetricJet2 {
  Mat g;
  MatArr3 dg;
  MatArr33 d2g;
};

// ---------------------------------------------------------------------------
// Smooth profiles
// ---------------------------------------------------------------------------

/// @brief C^4 monotone blend: 0 for u<=0, 1 for u>=1,
/// S(u) = u^5 (126 - 420u + 540u^2 - 315u^3 + 70u^4).
struct ProfileJet {
  double v = 0, d1 = 0, d2 = 0, d3 = 0;
};

inline double s4(double u) {
  if (u <= 0) return 0.0;
  if (u >= 1) return 1.0;
  return u * u * u * u * u * (126.0 + u * (-420.0 + u * (540.0 + u * (-315.0 + u * 70.0))));
}

inline ProfileJet s4_jet(double u) {
  ProfileJet j;
  if (u <= 0 || u >= 1) {
    j.v = (u >= 1) ? 1.0 : 0.0;
    return j;
  }
  const double u2 = u * u, u3 = u2 * u, u4 = u2 * u2;
  j.v = u4 * u * (126.0 + u * (-420.0 + u * (540.0 + u * (-315.0 + u * 70.0))));
  // S' = 630 u^4 (1-u)^4
  const double om = 1.0 - u;
  j.d1 = 630.0 * u4 * om * om * om * om;
  // S'' = 2520 u^3 (1-u)^3 (1-2u)
  j.d2 = 2520.0 * u3 * om * om * om * (1.0 - 2.0 * u);
  // S''' = 2520 u^2 (3 - 20u + 45u^2 - 42u^3 + 14u^4)
  j.d3 = 2520.0 * u2 * (3.0 + u * (-20.0 + u * (45.0 + u * (-42.0 + u * 14.0))));
  return j;
}

/// @brief C^2 smoothstep: 0 for u<=0, 1 for u>=1, u^3(10-15u+6u^2) between.
inline double smoothstep01(double u) {
  if (u <= 0) return 0.0;
  if (u >= 1) return 1.0;
  return u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
}

// ---------------------------------------------------------------------------
// Direction sets
// ---------------------------------------------------------------------------

/// @brief {±e_j} ∪ {(e_j+e_k)/√2, j<k}; size 2n + n(n-1)/2.
inline std::vector<Eigen::VectorXd> canonical_omega_set(int n) {
  if (n < 2) fail(ErrorCode::DimensionTooSmall, "direction set needs n >= 2");
  std::vector<Eigen::VectorXd> out;
  for (int j = 0; j < n; ++j) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
    e[j] = 1.0;
    out.push_back(e);
    out.push_back(-e);
  }
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (int j = 0; j < n; ++j)
    for (int k = j + 1; k < n; ++k) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
      e[j] = inv_sqrt2;
      e[k] = inv_sqrt2;
      out.push_back(e);
    }
  return out;
}

/// @brief The n=2 direction set as fixed-size vectors, in canonical order
/// (e1, -e1, e2, -e2, (e1+e2)/√2).
inline std::vector<SpaceVec> omega_set_2d() {
  auto gen = canonical_omega_set(2);
  std::vector<SpaceVec> out;
  for (const auto& w : gen) out.push_back(SpaceVec(w[0], w[1]));
  return out;
}

// ---------------------------------------------------------------------------
// Model families
// ---------------------------------------------------------------------------

struct MinkowskiModel {
  static constexpr const char* family = "minkowski";

  Mat g(const Vec&) const { return minkowski_eta(); }
  MetricJet1 jet1(const Vec& z) const {
    MetricJet1 j;
    j.g = g(z);
    j.dg = {Mat::Zero(), Mat::Zero(), Mat::Zero()};
    return j;
  }
  MetricJet2 jet2(const Vec& z) const {
    MetricJet2 j;
    j.g = g(z);
    j.dg = {Mat::Zero(), Mat::Zero(), Mat::Zero()};
    for (auto& row : j.d2g) row = {Mat::Zero(), Mat::Zero(), Mat::Zero()};
    return j;
  }
  double sqrt_det(const Vec&) const { return 1.0; }
  double support_radius() const { return 0.0; }
  double support_time() const { return 0.0; }
  nlohmann::json descriptor() const {
    return {{"family", family}, {"n", 2}, {"params", nlohmann::json::object()}};
  }
};

/// @brief Pullback of the flat metric by F(t,x) = (t, R(a(t) χ(|x|)) x):
/// a compactly supported spacetime "twirl". The inverse map, null rays and
/// the phase (t - x·ω)∘F are available in closed form, so this family is the
/// main exactly-solvable test bed. det DF = 1 identically, so sqrt|det g| = 1.
struct TwirlPullbackModel {
  static constexpr const char* family = "twirl";

  double a0 = 3.0 * M_PI / 4.0;  // peak twirl angle
  double t_w = 2.0;              // temporal half-width of a(t)
  double r_in = 0.25;            // χ = 1 for r <= r_in
  double r_out = 0.9;            // χ = 0 for r >= r_out

  // -- scalar profiles -------------------------------------------------------

  /// @brief χ(r) with derivatives to third order.
  ProfileJet chi_jet(double r) const {
    const double W = r_out - r_in;  // S4 argument u = (r_out - r)/W
    ProfileJet s = s4_jet((r_out - r) / W);
    ProfileJet c;
    c.v = s.v;
    c.d1 = -s.d1 / W;
    c.d2 = s.d2 / (W * W);
    c.d3 = -s.d3 / (W * W * W);
    return c;
  }

  /// @brief a(t) = a0 · S4(1 - (t/t_w)^2) with derivatives to third order.
  ProfileJet a_jet(double t) const {
    const double s = t / t_w;
    ProfileJet S = s4_jet(1.0 - s * s);
    ProfileJet a;
    a.v = a0 * S.v;
    // dB/ds with B(s) = S4(1-s^2)
    const double B1 = -2.0 * s * S.d1;
    const double B2 = 4.0 * s * s * S.d2 - 2.0 * S.d1;
    const double B3 = 12.0 * s * S.d2 - 8.0 * s * s * s * S.d3;
    a.d1 = a0 * B1 / t_w;
    a.d2 = a0 * B2 / (t_w * t_w);
    a.d3 = a0 * B3 / (t_w * t_w * t_w);
    return a;
  }

  double theta(const Vec& z) const {
    return a_jet(z[0]).v * chi_jet(std::hypot(z[1], z[2])).v;
  }

  // -- the map and its exact inverse ----------------------------------------

  static DenseMat<double, 2> rot(double th) {
    DenseMat<double, 2> R;
    const double c = std::cos(th), s = std::sin(th);
    R << c, -s, s, c;
    return R;
  }

  /// @brief F(t,x) = (t, R(θ)x).
  Vec map(const Vec& z) const {
    const SpaceVec x(z[1], z[2]);
    const SpaceVec y = rot(theta(z)) * x;
    return Vec(z[0], y[0], y[1]);
  }

  /// @brief F⁻¹(t,y) = (t, R(-θ)y); valid because |R(θ)x| = |x| so the angle
  /// evaluated at (t,|y|) equals the angle at the preimage.
  Vec inverse_map(const Vec& z) const {
    const SpaceVec y(z[1], z[2]);
    const SpaceVec x = rot(-theta(z)) * y;
    return Vec(z[0], x[0], x[1]);
  }

  /// @brief Exact phase (t - x·ω) ∘ F.
  double phase(const Vec& z, const SpaceVec& omega) const {
    const Vec w = map(z);
    return w[0] - (w[1] * omega[0] + w[2] * omega[1]);
  }

  // -- derivative stack ------------------------------------------------------

  // θ and its coordinate derivatives to third order (indices 0=t,1,2).
  struct ThetaJet {
    double th = 0;
    double d[3] = {0, 0, 0};
    double dd[3][3] = {};
    double ddd[3][3][3] = {};
  };

  ThetaJet theta_jet(const Vec& z) const {
    ThetaJet T;
    const double r = std::hypot(z[1], z[2]);
    const ProfileJet A = a_jet(z[0]);
    const ProfileJet C = chi_jet(r);
    // Spatial derivatives of c(x) = χ(|x|).
    double ci[2] = {0, 0}, cij[2][2] = {}, cijk[2][2][2] = {};
    if (C.d1 != 0.0 || C.d2 != 0.0 || C.d3 != 0.0) {
      // Here r >= r_in > 0, so u = x/r is safe.
      const double u[2] = {z[1] / r, z[2] / r};
      double Q[2][2];
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) Q[i][j] = (i == j ? 1.0 : 0.0) - u[i] * u[j];
      for (int i = 0; i < 2; ++i) ci[i] = C.d1 * u[i];
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) cij[i][j] = C.d2 * u[i] * u[j] + (C.d1 / r) * Q[i][j];
      const double m = C.d2 / r - C.d1 / (r * r);
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          for (int k = 0; k < 2; ++k)
            cijk[i][j][k] = C.d3 * u[i] * u[j] * u[k] +
                            m * (u[i] * Q[j][k] + u[j] * Q[i][k] + u[k] * Q[i][j]);
    }
    T.th = A.v * C.v;
    T.d[0] = A.d1 * C.v;
    for (int i = 0; i < 2; ++i) T.d[1 + i] = A.v * ci[i];
    T.dd[0][0] = A.d2 * C.v;
    for (int i = 0; i < 2; ++i) T.dd[0][1 + i] = T.dd[1 + i][0] = A.d1 * ci[i];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) T.dd[1 + i][1 + j] = A.v * cij[i][j];
    T.ddd[0][0][0] = A.d3 * C.v;
    for (int i = 0; i < 2; ++i)
      T.ddd[0][0][1 + i] = T.ddd[0][1 + i][0] = T.ddd[1 + i][0][0] = A.d2 * ci[i];
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        const double v = A.d1 * cij[i][j];
        T.ddd[0][1 + i][1 + j] = T.ddd[1 + i][0][1 + j] = T.ddd[1 + i][1 + j][0] = v;
      }
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        for (int k = 0; k < 2; ++k) T.ddd[1 + i][1 + j][1 + k] = A.v * cijk[i][j][k];
    return T;
  }

  // DF and its coordinate derivatives. DF row 0 is (1,0,0) identically.
  struct MapJet {
    Mat DF;
    MatArr3 dDF;
    MatArr33 d2DF;
  };

  /// @brief Map derivatives up to the requested order (0: DF, 1: +dDF,
  /// 2: +d2DF); skipped orders are zero-filled.
  MapJet map_jet(const Vec& z, int order = 2) const {
    const ThetaJet T = theta_jet(z);
    const SpaceVec x(z[1], z[2]);
    using M2 = DenseMat<double, 2>;
    const M2 R = rot(T.th);
    M2 J;
    J << 0, -1, 1, 0;
    const M2 JR = J * R;
    // Rotation-matrix derivatives by direction index a,b,c in {0,1,2}.
    auto R_a = [&](int a) -> M2 { return T.d[a] * JR; };
    auto R_ab = [&](int a, int b) -> M2 { return T.dd[a][b] * JR - T.d[a] * T.d[b] * R; };
    auto R_abc = [&](int a, int b, int c) -> M2 {
      return T.ddd[a][b][c] * JR -
             (T.dd[a][b] * T.d[c] + T.dd[a][c] * T.d[b] + T.dd[b][c] * T.d[a]) * R -
             T.d[a] * T.d[b] * T.d[c] * JR;
    };
    auto E = [](int a) -> SpaceVec {
      SpaceVec e = SpaceVec::Zero();
      if (a >= 1) e[a - 1] = 1.0;
      return e;
    };
    // Spatial part of F differentiated along directions a (and b, c).
    auto Fx_a = [&](int a) -> SpaceVec { return R_a(a) * x + R * E(a); };
    auto Fx_ab = [&](int a, int b) -> SpaceVec {
      return R_ab(a, b) * x + R_a(a) * E(b) + R_a(b) * E(a);
    };
    auto Fx_abc = [&](int a, int b, int c) -> SpaceVec {
      return R_abc(a, b, c) * x + R_ab(a, b) * E(c) + R_ab(a, c) * E(b) + R_ab(b, c) * E(a);
    };
    MapJet out;
    out.DF = Mat::Zero();
    out.DF(0, 0) = 1.0;
    for (int a = 0; a < 3; ++a) {
      const SpaceVec col = Fx_a(a);
      out.DF(1, a) = col[0];
      out.DF(2, a) = col[1];
    }
    for (int l = 0; l < 3; ++l) {
      out.dDF[l] = Mat::Zero();
      if (order < 1) continue;
      for (int a = 0; a < 3; ++a) {
        const SpaceVec col = Fx_ab(a, l);
        out.dDF[l](1, a) = col[0];
        out.dDF[l](2, a) = col[1];
      }
    }
    for (int l = 0; l < 3; ++l)
      for (int m = 0; m < 3; ++m) {
        out.d2DF[l][m] = Mat::Zero();
        if (order < 2) continue;
        for (int a = 0; a < 3; ++a) {
          const SpaceVec col = Fx_abc(a, l, m);
          out.d2DF[l][m](1, a) = col[0];
          out.d2DF[l][m](2, a) = col[1];
        }
      }
    return out;
  }

  bool is_exterior(const Vec& z) const {
    return std::abs(z[0]) >= t_w || std::hypot(z[1], z[2]) >= r_out;
  }

  Mat g(const Vec& z) const {
    if (is_exterior(z)) return minkowski_eta();
    const MapJet M = map_jet(z, 0);
    return M.DF.transpose() * minkowski_eta() * M.DF;
  }

  MetricJet1 jet1(const Vec& z) const {
    MetricJet1 j;
    if (is_exterior(z)) {
      j.g = minkowski_eta();
      for (int l = 0; l < 3; ++l) j.dg[l] = Mat::Zero();
      return j;
    }
    const MapJet M = map_jet(z, 1);
    const Mat eta = minkowski_eta();
    j.g = M.DF.transpose() * eta * M.DF;
    for (int l = 0; l < 3; ++l)
      j.dg[l] = M.dDF[l].transpose() * eta * M.DF + M.DF.transpose() * eta * M.dDF[l];
    return j;
  }

  MetricJet2 jet2(const Vec& z) const {
    if (is_exterior(z)) {
      MetricJet2 j;
      j.g = minkowski_eta();
      for (int l = 0; l < 3; ++l) j.dg[l] = Mat::Zero();
      for (int l = 0; l < 3; ++l)
        for (int m = 0; m < 3; ++m) j.d2g[l][m] = Mat::Zero();
      return j;
    }
    const MapJet M = map_jet(z);
    const Mat eta = minkowski_eta();
    MetricJet2 j;
    j.g = M.DF.transpose() * eta * M.DF;
    for (int l = 0; l < 3; ++l)
      j.dg[l] = M.dDF[l].transpose() * eta * M.DF + M.DF.transpose() * eta * M.dDF[l];
    for (int l = 0; l < 3; ++l)
      for (int m = 0; m < 3; ++m)
        j.d2g[l][m] = M.d2DF[l][m].transpose() * eta * M.DF +
                      M.dDF[l].transpose() * eta * M.dDF[m] +
                      M.dDF[m].transpose() * eta * M.dDF[l] +
                      M.DF.transpose() * eta * M.d2DF[l][m];
    return j;
  }

  // det DF = 1 + a χ'(r) x·(J x)/r = 1 since x·(Jx) = 0: volume is preserved.
  double sqrt_det(const Vec&) const { return 1.0; }
  double support_radius() const { return r_out; }
  double support_time() const { return t_w; }
  nlohmann::json descriptor() const {
    return {{"family", family},
            {"n", 2},
            {"params",
             {{"a0", a0}, {"t_w", t_w}, {"r_in", r_in}, {"r_out", r_out}}}};
  }
};

/// @brief Conformal ultrastatic metric g = κ(x)·diag(-1,1,1) with
/// κ = 1 + A·S4(1 - |x|²/r_b²). Null cones agree with flat ones (straight
/// null rays), but the conformal factor feeds the amplitude transport, which
/// is what makes this family a non-rigid control.
struct ConformalBumpModel {
  static constexpr const char* family = "conformal";

  double amplitude = 0.3;  // A
  double r_b = 0.8;        // bump support radius

  /// @brief κ with spatial gradient and Hessian (time-independent).
  struct KappaJet {
    double k = 1;
    SpaceVec dk = SpaceVec::Zero();
    DenseMat<double, 2> ddk = DenseMat<double, 2>::Zero();
  };

  KappaJet kappa_jet(const Vec& z) const {
    KappaJet K;
    const SpaceVec x(z[1], z[2]);
    const double rb2 = r_b * r_b;
    const double v = 1.0 - x.squaredNorm() / rb2;
    const ProfileJet S = s4_jet(v);
    K.k = 1.0 + amplitude * S.v;
    if (S.d1 == 0.0 && S.d2 == 0.0) return K;
    const SpaceVec dv = -2.0 / rb2 * x;
    K.dk = amplitude * S.d1 * dv;
    K.ddk = amplitude * (S.d2 * dv * dv.transpose() -
                         (2.0 / rb2) * S.d1 * DenseMat<double, 2>::Identity());
    return K;
  }

  double kappa(const Vec& z) const { return kappa_jet(z).k; }

  Mat g(const Vec& z) const { return kappa_jet(z).k * minkowski_eta(); }

  MetricJet1 jet1(const Vec& z) const {
    const KappaJet K = kappa_jet(z);
    const Mat eta = minkowski_eta();
    MetricJet1 j;
    j.g = K.k * eta;
    j.dg[0] = Mat::Zero();
    j.dg[1] = K.dk[0] * eta;
    j.dg[2] = K.dk[1] * eta;
    return j;
  }

  MetricJet2 jet2(const Vec& z) const {
    const KappaJet K = kappa_jet(z);
    const Mat eta = minkowski_eta();
    MetricJet2 j;
    j.g = K.k * eta;
    j.dg[0] = Mat::Zero();
    j.dg[1] = K.dk[0] * eta;
    j.dg[2] = K.dk[1] * eta;
    for (auto& row : j.d2g) row = {Mat::Zero(), Mat::Zero(), Mat::Zero()};
    for (int i = 0; i < 2; ++i)
      for (int jj = 0; jj < 2; ++jj) j.d2g[1 + i][1 + jj] = K.ddk(i, jj) * eta;
    return j;
  }

  // |det g| = κ^3 in 1+2 dimensions.
  double sqrt_det(const Vec& z) const { return std::pow(kappa_jet(z).k, 1.5); }
  double support_radius() const { return r_b; }
  double support_time() const { return std::numeric_limits<double>::infinity(); }
  nlohmann::json descriptor() const {
    return {{"family", family},
            {"n", 2},
            {"params", {{"amplitude", amplitude}, {"r_b", r_b}}}};
  }
};

/// @brief Ultrastatic metric g = diag(-1, f(x), 1) with
/// f = 1 + ψ(|x|)(cos²(x₂/ρ) - 1), ψ = S4((0.95-|x|)/0.45). Inside the core
/// (|x| <= 0.5) the spatial slice is a product strip of a sphere, which
/// focuses parallel geodesic bundles — the negative control for the eikonal
/// construction. Euclidean for |x| >= 0.95.
struct SphereStripModel {
  static constexpr const char* family = "sphere_strip";

  double rho = 0.4;          // sphere-strip scale: f = cos²(x₂/ρ) in the core
  double blend_in = 0.5;     // ψ = 1 for r <= blend_in
  double blend_out = 0.95;   // ψ = 0 for r >= blend_out

  /// @brief f with spatial gradient and Hessian (time-independent).
  struct FJet {
    double f = 1;
    SpaceVec df = SpaceVec::Zero();
    DenseMat<double, 2> ddf = DenseMat<double, 2>::Zero();
  };

  FJet f_jet(const Vec& z) const {
    FJet F;
    const SpaceVec x(z[1], z[2]);
    const double r = x.norm();
    const double W = blend_out - blend_in;
    const ProfileJet S = s4_jet((blend_out - r) / W);
    const double psi = S.v, psi1 = -S.d1 / W, psi2 = S.d2 / (W * W);
    const double c = std::cos(x[1] / rho);  // x₂ is the second spatial coord
    const double q = c * c - 1.0;
    const double q1 = -std::sin(2.0 * x[1] / rho) / rho;
    const double q2 = -2.0 * std::cos(2.0 * x[1] / rho) / (rho * rho);
    F.f = 1.0 + psi * q;
    SpaceVec u = SpaceVec::Zero();
    DenseMat<double, 2> Q = DenseMat<double, 2>::Zero();
    if (psi1 != 0.0 || psi2 != 0.0) {
      u = x / r;  // r >= blend_in > 0 whenever ψ varies
      Q = DenseMat<double, 2>::Identity() - u * u.transpose();
    }
    const SpaceVec e2(0.0, 1.0);
    F.df = psi1 * q * u + psi * q1 * e2;
    F.ddf = q * (psi2 * u * u.transpose() + (psi1 / std::max(r, blend_in)) * Q) +
            psi1 * q1 * (u * e2.transpose() + e2 * u.transpose()) +
            psi * q2 * e2 * e2.transpose();
    return F;
  }

  Mat g(const Vec& z) const {
    Mat m = minkowski_eta();
    m(1, 1) = f_jet(z).f;
    return m;
  }

  MetricJet1 jet1(const Vec& z) const {
    const FJet F = f_jet(z);
    MetricJet1 j;
    j.g = minkowski_eta();
    j.g(1, 1) = F.f;
    j.dg = {Mat::Zero(), Mat::Zero(), Mat::Zero()};
    j.dg[1](1, 1) = F.df[0];
    j.dg[2](1, 1) = F.df[1];
    return j;
  }

  MetricJet2 jet2(const Vec& z) const {
    const FJet F = f_jet(z);
    MetricJet2 j;
    j.g = minkowski_eta();
    j.g(1, 1) = F.f;
    j.dg = {Mat::Zero(), Mat::Zero(), Mat::Zero()};
    j.dg[1](1, 1) = F.df[0];
    j.dg[2](1, 1) = F.df[1];
    for (auto& row : j.d2g) row = {Mat::Zero(), Mat::Zero(), Mat::Zero()};
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) j.d2g[1 + a][1 + b](1, 1) = F.ddf(a, b);
    return j;
  }

  double sqrt_det(const Vec& z) const { return std::sqrt(f_jet(z).f); }
  double support_radius() const { return blend_out; }
  double support_time() const { return std::numeric_limits<double>::infinity(); }
  nlohmann::json descriptor() const {
    return {{"family", family},
            {"n", 2},
            {"params",
             {{"rho", rho}, {"blend_in", blend_in}, {"blend_out", blend_out}}}};
  }
};

/// @brief User-supplied metric from closures. Derivatives come from optional
/// closures, else central differences with h_fd = h_fd_scale·(1+|z|_inf);
/// with FD disabled and no closures, derivative requests fail.
struct CustomModel {
  static constexpr const char* family = "custom";

  std::function<Mat(const Vec&)> g_fn;
  std::function<MatArr3(const Vec&)> dg_fn;      // optional
  std::function<MatArr33(const Vec&)> d2g_fn;    // optional
  double r_supp = 1.0;
  bool allow_fd = true;
  double h_fd_scale = 1e-5;
  std::string label = "custom";

  double h_fd(const Vec& z) const {
    return h_fd_scale * (1.0 + z.cwiseAbs().maxCoeff());
  }

  Mat g(const Vec& z) const { return g_fn(z); }

  MetricJet1 jet1(const Vec& z) const {
    MetricJet1 j;
    j.g = g_fn(z);
    if (dg_fn) {
      j.dg = dg_fn(z);
      return j;
    }
    if (!allow_fd)
      fail(ErrorCode::DerivativeUnavailable, "custom model '" + label +
                                                 "' has no derivative closures and FD is disabled");
    const double h = h_fd(z);
    for (int l = 0; l < 3; ++l) {
      Vec zp = z, zm = z;
      zp[l] += h;
      zm[l] -= h;
      j.dg[l] = (g_fn(zp) - g_fn(zm)) / (2.0 * h);
    }
    return j;
  }

  MetricJet2 jet2(const Vec& z) const {
    MetricJet2 j;
    MetricJet1 j1 = jet1(z);
    j.g = j1.g;
    j.dg = j1.dg;
    if (d2g_fn) {
      j.d2g = d2g_fn(z);
      return j;
    }
    if (!allow_fd)
      fail(ErrorCode::DerivativeUnavailable, "custom model '" + label +
                                                 "' has no second-derivative closures and FD is disabled");
    const double h = h_fd(z);
    auto dg_at = [&](const Vec& y, int l) -> Mat {
      if (dg_fn) return dg_fn(y)[l];
      Vec yp = y, ym = y;
      yp[l] += h;
      ym[l] -= h;
      return (g_fn(yp) - g_fn(ym)) / (2.0 * h);
    };
    for (int l = 0; l < 3; ++l)
      for (int m = 0; m < 3; ++m) {
        Vec zp = z, zm = z;
        zp[m] += h;
        zm[m] -= h;
        j.d2g[l][m] = (dg_at(zp, l) - dg_at(zm, l)) / (2.0 * h);
      }
    return j;
  }

  double sqrt_det(const Vec& z) const {
    return std::sqrt(std::abs(g_fn(z).determinant()));
  }
  double support_radius() const { return r_supp; }
  double support_time() const { return std::numeric_limits<double>::infinity(); }
  nlohmann::json descriptor() const {
    return {{"family", family}, {"n", 2}, {"params", {{"label", label}}}};
  }
};

using AnyModel = std::variant<MinkowskiModel, TwirlPullbackModel, ConformalBumpModel,
                              SphereStripModel, CustomModel>;

// ---------------------------------------------------------------------------
// Generic metric operations
// ---------------------------------------------------------------------------

/// @brief Invert a metric matrix; rejects near-degenerate input.
inline Mat invert_metric(const Mat& g) {
  const double det = g.determinant();
  const double scale = g.cwiseAbs().maxCoeff();
  if (!(std::abs(det) > 1e-14 * scale * scale * scale))
    fail(ErrorCode::SingularMetric, "determinant " + fmt17(det));
  return g.inverse();
}

template <class M>
Mat metric_at(const M& m, const Vec& z) {
  if (!z.allFinite()) fail(ErrorCode::NonFinite, "metric requested at non-finite point");
  return m.g(z);
}

template <class M>
Mat inverse_metric_at(const M& m, const Vec& z) {
  return invert_metric(metric_at(m, z));
}

/// @brief p(z,ζ) = -½ g^{jk}(z) ζ_j ζ_k.
template <class M>
double hamiltonian(const M& m, const Vec& z, const Covec& zeta) {
  const Mat G = inverse_metric_at(m, z);
  return -0.5 * zeta.dot(G * zeta);
}

/// @brief Value and first derivatives of the Hamiltonian.
struct HamGrad {
  double p;
  Vec dp_dzeta;    // = -G ζ  (the ż of the ray equations)
  Covec dp_dz;     // ∂p/∂z_l = ½ wᵀ(∂_l g) w with w = Gζ
};

template <class M>
HamGrad hamiltonian_gradients(const M& m, const Vec& z, const Covec& zeta) {
  const MetricJet1 j = m.jet1(z);
  const Mat G = invert_metric(j.g);
  const Vec w = G * zeta;
  HamGrad h;
  h.p = -0.5 * zeta.dot(w);
  h.dp_dzeta = -w;
  for (int l = 0; l < 3; ++l) h.dp_dz[l] = 0.5 * w.dot(j.dg[l] * w);
  return h;
}

/// @brief FD cross-check of ∂p/∂z by 5-point central differences.
template <class M>
Covec hamiltonian_dz_fd(const M& m, const Vec& z, const Covec& zeta, double h = 1e-5) {
  Covec out;
  for (int l = 0; l < 3; ++l) {
    auto p_at = [&](double s) {
      Vec y = z;
      y[l] += s;
      return hamiltonian(m, y, zeta);
    };
    out[l] = (-p_at(2 * h) + 8 * p_at(h) - 8 * p_at(-h) + p_at(-2 * h)) / (12 * h);
  }
  return out;
}

/// @brief Second derivatives of the Hamiltonian, for the variational flow.
struct HamHess {
  HamGrad grad;
  Mat p_zetazeta;  // ∂²p/∂ζ∂ζ = -G
  Mat p_zzeta;     // (l,j) = ∂²p/∂z_l∂ζ_j = (G ∂_l g G ζ)_j
  Mat p_zz;        // (l,m) = ∂²p/∂z_l∂z_m
};

template <class M>
HamHess hamiltonian_hessians(const M& m, const Vec& z, const Covec& zeta) {
  const MetricJet2 j = m.jet2(z);
  const Mat G = invert_metric(j.g);
  const Vec w = G * zeta;
  HamHess H;
  H.grad.p = -0.5 * zeta.dot(w);
  H.grad.dp_dzeta = -w;
  for (int l = 0; l < 3; ++l) H.grad.dp_dz[l] = 0.5 * w.dot(j.dg[l] * w);
  H.p_zetazeta = -G;
  std::array<Vec, 3> Gdgw;
  for (int l = 0; l < 3; ++l) Gdgw[l] = G * (j.dg[l] * w);
  for (int l = 0; l < 3; ++l)
    for (int jj = 0; jj < 3; ++jj) H.p_zzeta(l, jj) = Gdgw[l][jj];
  for (int l = 0; l < 3; ++l)
    for (int mm = 0; mm < 3; ++mm)
      H.p_zz(l, mm) = 0.5 * (w.dot(j.d2g[l][mm] * w) - (j.dg[l] * w).dot(Gdgw[mm]) -
                             (j.dg[mm] * w).dot(Gdgw[l]));
  return H;
}

/// @brief Coefficients of □ in non-divergence form:
/// □u = -(g^{jk} ∂_j∂_k u + b^k ∂_k u), b^k = ∂_j g^{jk} + g^{jk} ∂_j log√|g|.
struct WaveCoeffs {
  Mat ginv;
  Vec b;
  double sqrt_det;
};

template <class M>
WaveCoeffs wave_coeffs(const M& m, const Vec& z) {
  const MetricJet1 j = m.jet1(z);
  const Mat G = invert_metric(j.g);
  WaveCoeffs w;
  w.ginv = G;
  w.sqrt_det = m.sqrt_det(z);
  Covec dlogs;  // ∂_j log√|g| = ½ tr(G ∂_j g)
  for (int l = 0; l < 3; ++l) dlogs[l] = 0.5 * (G * j.dg[l]).trace();
  for (int k = 0; k < 3; ++k) {
    double bk = 0.0;
    for (int l = 0; l < 3; ++l) {
      // ∂_l g^{lk} = -(G ∂_l g G)_{lk}
      bk += -(G * (j.dg[l] * G))(l, k) + G(l, k) * dlogs[l];
    }
    w.b[k] = bk;
  }
  return w;
}

/// @brief Divergence-form wave operator applied to a field given by its
/// gradient closure: □f = -|g|^{-1/2} ∂_j(|g|^{1/2} g^{jk} ∂_k f), with the
/// outer ∂_j by central differences at step h.
template <class M, class GradFn>
double box_of(const M& m, GradFn&& grad, const Vec& z, double h = 1e-4) {
  auto flux = [&](const Vec& y, int jcomp) {
    const Mat G = inverse_metric_at(m, y);
    const Covec df = grad(y);
    return m.sqrt_det(y) * (G * df)[jcomp];
  };
  double div = 0.0;
  for (int jcomp = 0; jcomp < 3; ++jcomp) {
    Vec zp = z, zm = z;
    zp[jcomp] += h;
    zm[jcomp] -= h;
    div += (flux(zp, jcomp) - flux(zm, jcomp)) / (2.0 * h);
  }
  return -div / m.sqrt_det(z);
}

// ---------------------------------------------------------------------------
// Construction, validation, descriptors
// ---------------------------------------------------------------------------

/// @brief Signature probe: one negative and n positive eigenvalues at 64
/// lattice points in [-2,2]³ (checked on construction, not per evaluation).
template <class M>
void check_signature(const M& m) {
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int c = 0; c < 4; ++c) {
        const Vec z(-2.0 + 4.0 * a / 3.0, -2.0 + 4.0 * b / 3.0, -2.0 + 4.0 * c / 3.0);
        Eigen::SelfAdjointEigenSolver<Mat> es(metric_at(m, z));
        const auto& ev = es.eigenvalues();
        if (!(ev[0] < 0 && ev[1] > 0 && ev[2] > 0))
          fail(ErrorCode::NonLorentzianSignature,
               "eigenvalues (" + fmt17(ev[0]) + ", " + fmt17(ev[1]) + ", " +
                   fmt17(ev[2]) + ") at (" + fmt17(z[0]) + ", " + fmt17(z[1]) +
                   ", " + fmt17(z[2]) + ")");
      }
}

inline void check_signature_any(const AnyModel& m) {
  std::visit([](const auto& mm) { check_signature(mm); }, m);
}

inline nlohmann::json model_descriptor(const AnyModel& m) {
  return std::visit([](const auto& mm) { return mm.descriptor(); }, m);
}

inline std::string model_hash(const AnyModel& m) {
  return hex64(fnv1a(model_descriptor(m).dump()));
}

inline double model_support_radius(const AnyModel& m) {
  return std::visit([](const auto& mm) { return mm.support_radius(); }, m);
}

inline double model_support_time(const AnyModel& m) {
  return std::visit([](const auto& mm) { return mm.support_time(); }, m);
}

namespace detail {
inline double take_param(nlohmann::json& p, const std::string& key, double dflt) {
  if (!p.contains(key)) return dflt;
  if (!p[key].is_number())
    fail(ErrorCode::ConfigError, "params." + key + " must be a number");
  double v = p[key].get<double>();
  p.erase(key);
  return v;
}
inline void reject_leftovers(const nlohmann::json& p) {
  if (!p.empty())
    fail(ErrorCode::ConfigError, "unknown model parameter: params." + p.begin().key());
}
}  // namespace detail

/// @brief Build a model from a JSON descriptor {"family", "n", "params"};
/// unknown fields are rejected by name, and the signature probe runs once.
inline AnyModel make_model(const nlohmann::json& desc) {
  if (!desc.contains("family") || !desc["family"].is_string())
    fail(ErrorCode::ConfigError, "model.family missing or not a string");
  const std::string family = desc["family"].get<std::string>();
  const int n = desc.value("n", 2);
  if (n < 2) fail(ErrorCode::DimensionTooSmall, "model.n must be >= 2");
  if (n != 2)
    fail(ErrorCode::ConfigError, "model.n: this build supports n = 2 only");
  nlohmann::json params = desc.value("params", nlohmann::json::object());
  for (auto it = desc.begin(); it != desc.end(); ++it)
    if (it.key() != "family" && it.key() != "n" && it.key() != "params")
      fail(ErrorCode::ConfigError, "unknown model field: " + it.key());

  AnyModel out;
  if (family == "minkowski") {
    detail::reject_leftovers(params);
    out = MinkowskiModel{};
  } else if (family == "twirl") {
    TwirlPullbackModel m;
    m.a0 = detail::take_param(params, "a0", m.a0);
    m.t_w = detail::take_param(params, "t_w", m.t_w);
    m.r_in = detail::take_param(params, "r_in", m.r_in);
    m.r_out = detail::take_param(params, "r_out", m.r_out);
    if (!(m.r_out > m.r_in && m.r_in > 0 && m.r_out <= 1.0))
      fail(ErrorCode::ConfigError, "params.r_in/r_out must satisfy 0 < r_in < r_out <= 1");
    if (!(m.t_w > 0)) fail(ErrorCode::ConfigError, "params.t_w must be positive");
    detail::reject_leftovers(params);
    out = m;
  } else if (family == "conformal") {
    ConformalBumpModel m;
    m.amplitude = detail::take_param(params, "amplitude", m.amplitude);
    m.r_b = detail::take_param(params, "r_b", m.r_b);
    if (!(m.r_b > 0 && m.r_b <= 1.0))
      fail(ErrorCode::ConfigError, "params.r_b must be in (0, 1]");
    if (!(m.amplitude > -1.0))
      fail(ErrorCode::ConfigError, "params.amplitude must exceed -1");
    detail::reject_leftovers(params);
    out = m;
  } else if (family == "sphere_strip") {
    SphereStripModel m;
    m.rho = detail::take_param(params, "rho", m.rho);
    m.blend_in = detail::take_param(params, "blend_in", m.blend_in);
    m.blend_out = detail::take_param(params, "blend_out", m.blend_out);
    if (!(m.blend_out > m.blend_in && m.blend_in > 0 && m.blend_out <= 1.0))
      fail(ErrorCode::ConfigError,
           "params.blend_in/blend_out must satisfy 0 < blend_in < blend_out <= 1");
    if (!(m.rho > 0)) fail(ErrorCode::ConfigError, "params.rho must be positive");
    detail::reject_leftovers(params);
    out = m;
  } else {
    fail(ErrorCode::ConfigError, "unknown model family: " + family);
  }
  check_signature_any(out);
  return out;
}

// AnyModel-level dispatch for the contract operations.
inline Mat metric_at(const AnyModel& m, const Vec& z) {
  return std::visit([&](const auto& mm) { return metric_at(mm, z); }, m);
}
inline Mat inverse_metric_at(const AnyModel& m, const Vec& z) {
  return std::visit([&](const auto& mm) { return inverse_metric_at(mm, z); }, m);
}
inline double hamiltonian(const AnyModel& m, const Vec& z, const Covec& zeta) {
  return std::visit([&](const auto& mm) { return hamiltonian(mm, z, zeta); }, m);
}
inline HamGrad hamiltonian_gradients(const AnyModel& m, const Vec& z, const Covec& zeta) {
  return std::visit([&](const auto& mm) { return hamiltonian_gradients(mm, z, zeta); }, m);
}

}  // namespace wavetrace
