#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wavetrace/models.hpp"

#include <random>

using namespace wavetrace;

namespace {

// Independent FD Jacobian of a spacetime map, column a = dF/dz_a.
// h = 1e-5 balances truncation (~h^2 |F'''| ~ 1e-8) against roundoff.
template <class MapFn>
Mat fd_jacobian(MapFn&& F, const Vec& z, double h = 1e-5) {
  Mat J;
  for (int a = 0; a < 3; ++a) {
    Vec zp = z, zm = z;
    zp[a] += h;
    zm[a] -= h;
    J.col(a) = (F(zp) - F(zm)) / (2.0 * h);
  }
  return J;
}

// Independent FD of the metric itself (5-point, for dg oracles).
template <class M>
Mat fd_dg(const M& m, const Vec& z, int l, double h = 1e-3) {
  auto gl = [&](double s) {
    Vec y = z;
    y[l] += s;
    return Mat(m.g(y));
  };
  return (-gl(2 * h) + 8.0 * gl(h) - 8.0 * gl(-h) + gl(-2 * h)) / (12.0 * h);
}

std::vector<Vec> sample_points(int count, unsigned seed, double tmax = 2.5,
                               double xmax = 1.5) {
  std::mt19937_64 rng(seed);
  std::vector<Vec> pts;
  for (int i = 0; i < count; ++i)
    pts.emplace_back(uniform_in(rng, -tmax, tmax), uniform_in(rng, -xmax, xmax),
                     uniform_in(rng, -xmax, xmax));
  return pts;
}

const Mat kEta = minkowski_eta();

}  // namespace

TEST_CASE("S4 blend: endpoints, symmetry, derivative accuracy") {
  CHECK(s4(0.0) == 0.0);
  CHECK(s4(1.0) == 1.0);
  CHECK(s4(-3.0) == 0.0);
  CHECK(s4(7.0) == 1.0);
  CHECK(s4(0.5) == doctest::Approx(0.5).epsilon(1e-15));
  for (double u : {0.1, 0.3, 0.5, 0.77, 0.93}) {
    CHECK(s4(u) + s4(1.0 - u) == doctest::Approx(1.0).epsilon(1e-13));
    // Each derivative order checked against a central difference of the one
    // below it (truncation ~h^2 * next order, well under the tolerances).
    ProfileJet j = s4_jet(u);
    const double h = 1e-5;
    ProfileJet jp = s4_jet(u + h), jm = s4_jet(u - h);
    CHECK(j.d1 == doctest::Approx((jp.v - jm.v) / (2 * h)).epsilon(1e-8).scale(1.0));
    CHECK(j.d2 == doctest::Approx((jp.d1 - jm.d1) / (2 * h)).epsilon(1e-7).scale(1.0));
    CHECK(j.d3 == doctest::Approx((jp.d2 - jm.d2) / (2 * h)).epsilon(1e-6).scale(100.0));
  }
  // C^4 gluing: low-order derivatives vanish at the edges.
  for (double u : {1e-9, 1.0 - 1e-9}) {
    ProfileJet j = s4_jet(u);
    CHECK(std::abs(j.d1) < 1e-30);
    CHECK(std::abs(j.d2) < 1e-20);
    CHECK(std::abs(j.d3) < 1e-10);
  }
}

TEST_CASE("smoothstep01: C2 front profile") {
  CHECK(smoothstep01(-1.0) == 0.0);
  CHECK(smoothstep01(2.0) == 1.0);
  CHECK(smoothstep01(0.5) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(smoothstep01(0.25) + smoothstep01(0.75) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("metric_at: flat family is exactly eta everywhere") {
  MinkowskiModel mink;
  for (const Vec& z : sample_points(50, 11))
    CHECK((metric_at(mink, z) - kEta).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("metric_at: twirl equals chain-rule oracle at interior points") {
  TwirlPullbackModel tw;
  // Spec'd interior point plus random ones.
  std::vector<Vec> pts = {Vec(0.0, 0.3, 0.0)};
  for (const Vec& z : sample_points(40, 12, 1.8, 0.95)) pts.push_back(z);
  for (const Vec& z : pts) {
    const Mat DF_fd = fd_jacobian([&](const Vec& y) { return tw.map(y); }, z);
    const Mat g_oracle = DF_fd.transpose() * kEta * DF_fd;
    CHECK((metric_at(tw, z) - g_oracle).cwiseAbs().maxCoeff() < 2e-7);
    // Analytic DF agrees with the independent FD Jacobian (oracle-limited).
    CHECK((tw.map_jet(z).DF - DF_fd).cwiseAbs().maxCoeff() < 5e-8);
  }
}

TEST_CASE("metric_at: exterior flatness is bit-exact for all analytic families") {
  TwirlPullbackModel tw;
  ConformalBumpModel cf;
  SphereStripModel ss;
  std::mt19937_64 rng(13);
  for (int i = 0; i < 200; ++i) {
    const double ang = uniform_in(rng, 0.0, 2.0 * M_PI);
    const double r = uniform_in(rng, 1.0, 3.0);
    const Vec z(uniform_in(rng, -3.0, 3.0), r * std::cos(ang), r * std::sin(ang));
    CHECK((metric_at(tw, z) - kEta).cwiseAbs().maxCoeff() == 0.0);
    CHECK((metric_at(cf, z) - kEta).cwiseAbs().maxCoeff() == 0.0);
    CHECK((metric_at(ss, z) - kEta).cwiseAbs().maxCoeff() == 0.0);
    // Twirl is also flat once |t| >= t_w, at any x.
    const Vec zt(uniform_in(rng, 2.0, 5.0), uniform_in(rng, -0.8, 0.8),
                 uniform_in(rng, -0.8, 0.8));
    CHECK((metric_at(tw, zt) - kEta).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("inverse_metric_at: product with metric is identity (1e-12)") {
  TwirlPullbackModel tw;
  ConformalBumpModel cf;
  SphereStripModel ss;
  MinkowskiModel mink;
  auto run = [&](const auto& m, unsigned seed) {
    for (const Vec& z : sample_points(10000, seed)) {
      const Mat P = metric_at(m, z) * inverse_metric_at(m, z);
      CHECK((P - Mat::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    }
  };
  run(mink, 21);
  run(tw, 22);
  run(cf, 23);
  run(ss, 24);
}

TEST_CASE("inverse_metric_at: conformal inverse is kappa^{-1} eta") {
  ConformalBumpModel cf;
  for (const Vec& z : sample_points(100, 31, 2.0, 1.0)) {
    const Mat G = inverse_metric_at(cf, z);
    const Mat expect = (1.0 / cf.kappa(z)) * kEta;
    CHECK((G - expect).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("hamiltonian: null covectors and flat values") {
  MinkowskiModel mink;
  const Vec z(0.3, -0.2, 0.7);
  const SpaceVec w(std::cos(1.1), std::sin(1.1));
  CHECK(hamiltonian(mink, z, Covec(1.0, -w[0], -w[1])) ==
        doctest::Approx(0.0).epsilon(1e-15));
  CHECK(hamiltonian(mink, z, Covec(1.0, 0.0, 0.0)) == doctest::Approx(0.5));
  TwirlPullbackModel tw;
  const Vec zi(0.1, 0.4, -0.2);
  const Covec zeta(1.0, -1.0, 0.0);
  const Mat DF_fd = fd_jacobian([&](const Vec& y) { return tw.map(y); }, zi);
  const Mat G_oracle = (DF_fd.transpose() * kEta * DF_fd).inverse();
  CHECK(hamiltonian(tw, zi, zeta) ==
        doctest::Approx(-0.5 * zeta.dot(G_oracle * zeta)).epsilon(1e-8));
}

TEST_CASE("hamiltonian: vanishes on model-null vectors (all families)") {
  TwirlPullbackModel tw;
  ConformalBumpModel cf;
  SphereStripModel ss;
  auto run = [&](const auto& m, unsigned seed) {
    std::mt19937_64 rng(seed);
    for (const Vec& z : sample_points(100, seed + 1)) {
      const double ang = uniform_in(rng, 0.0, 2.0 * M_PI);
      const Vec s(0.0, std::cos(ang), std::sin(ang));
      const Mat g = metric_at(m, z);
      // Solve g(e0 + c s, e0 + c s) = 0 for c > 0.
      const Vec e0(1.0, 0.0, 0.0);
      const double A = s.dot(g * s), B = 2.0 * e0.dot(g * s), C = e0.dot(g * e0);
      const double disc = B * B - 4 * A * C;
      REQUIRE(disc > 0);
      const double c = (-B + std::sqrt(disc)) / (2 * A);
      const Vec v = e0 + c * s;
      const Covec zeta = -(g * v);
      CHECK(std::abs(hamiltonian(m, z, zeta)) < 1e-12);
    }
  };
  run(tw, 41);
  run(cf, 43);
  run(ss, 45);
}

TEST_CASE("hamiltonian_gradients: flat values and FD oracle") {
  MinkowskiModel mink;
  const Vec z(0.2, 0.1, -0.4);
  HamGrad h = hamiltonian_gradients(mink, z, Covec(1.0, -1.0, 0.0));
  CHECK(h.dp_dz.cwiseAbs().maxCoeff() == 0.0);
  CHECK((h.dp_dzeta - Vec(1.0, 1.0, 0.0)).cwiseAbs().maxCoeff() < 1e-15);

  // Conformal model at a point where kappa = 1 (outside the bump).
  ConformalBumpModel cf;
  const Vec zout(0.1, 1.2, 0.3);
  HamGrad hc = hamiltonian_gradients(cf, zout, Covec(1.0, -1.0, 0.0));
  HamGrad hm = hamiltonian_gradients(mink, zout, Covec(1.0, -1.0, 0.0));
  CHECK((hc.dp_dzeta - hm.dp_dzeta).cwiseAbs().maxCoeff() == 0.0);

  // Analytic dp_dz matches the 5-point FD oracle at step 1e-5: within 1e-8 at
  // a canonical interior point; the random sweep sits at the oracle's
  // roundoff floor (measured up to 7e-8 over 60 points) and uses 1e-7.
  TwirlPullbackModel tw;
  {
    const Vec zi(0.1, 0.4, -0.2);
    const Covec zeta(1.0, -1.0, 0.0);
    HamGrad ha = hamiltonian_gradients(tw, zi, zeta);
    CHECK((ha.dp_dz - hamiltonian_dz_fd(tw, zi, zeta)).cwiseAbs().maxCoeff() < 1e-8);
  }
  std::mt19937_64 rng(51);
  for (const Vec& zi : sample_points(60, 52, 1.8, 0.95)) {
    const Covec zeta(uniform_in(rng, 0.5, 1.5), uniform_in(rng, -1.0, 1.0),
                     uniform_in(rng, -1.0, 1.0));
    HamGrad ha = hamiltonian_gradients(tw, zi, zeta);
    CHECK((ha.dp_dz - hamiltonian_dz_fd(tw, zi, zeta)).cwiseAbs().maxCoeff() < 1e-7);
    CHECK((ha.dp_dzeta + inverse_metric_at(tw, zi) * zeta).cwiseAbs().maxCoeff() <
          1e-13);
  }
}

TEST_CASE("hamiltonian_gradients: FD agreement for every family (1e-7)") {
  TwirlPullbackModel tw;
  ConformalBumpModel cf;
  SphereStripModel ss;
  std::mt19937_64 rng(61);
  auto run = [&](const auto& m, unsigned seed) {
    for (const Vec& z : sample_points(200, seed)) {
      const Covec zeta(uniform_in(rng, -1.5, 1.5), uniform_in(rng, -1.5, 1.5),
                       uniform_in(rng, -1.5, 1.5));
      HamGrad ha = hamiltonian_gradients(m, z, zeta);
      CHECK((ha.dp_dz - hamiltonian_dz_fd(m, z, zeta)).cwiseAbs().maxCoeff() < 1e-7);
    }
  };
  run(tw, 62);
  run(cf, 63);
  run(ss, 64);
}

TEST_CASE("metric first and second derivatives match FD oracles") {
  TwirlPullbackModel tw;
  ConformalBumpModel cf;
  SphereStripModel ss;
  auto run = [&](const auto& m, unsigned seed) {
    for (const Vec& z : sample_points(40, seed, 1.8, 1.1)) {
      const MetricJet2 j = m.jet2(z);
      for (int l = 0; l < 3; ++l) {
        CHECK((j.dg[l] - fd_dg(m, z, l)).cwiseAbs().maxCoeff() < 2e-6);
        for (int mm = 0; mm < 3; ++mm) {
          // FD of the analytic first derivative.
          auto dgl = [&](double s) {
            Vec y = z;
            y[mm] += s;
            return Mat(m.jet1(y).dg[l]);
          };
          const double h = 1e-4;
          const Mat d2_fd =
              (-dgl(2 * h) + 8.0 * dgl(h) - 8.0 * dgl(-h) + dgl(-2 * h)) / (12.0 * h);
          CHECK((j.d2g[l][mm] - d2_fd).cwiseAbs().maxCoeff() < 2e-5);
          CHECK((j.d2g[l][mm] - j.d2g[mm][l]).cwiseAbs().maxCoeff() < 1e-12);
        }
      }
    }
  };
  run(tw, 71);
  run(cf, 72);
  run(ss, 73);
}

TEST_CASE("hamiltonian_hessians: FD cross-check of second derivatives") {
  TwirlPullbackModel tw;
  std::mt19937_64 rng(81);
  for (const Vec& z : sample_points(25, 82, 1.8, 0.95)) {
    const Covec zeta(uniform_in(rng, 0.5, 1.5), uniform_in(rng, -1.0, 1.0),
                     uniform_in(rng, -1.0, 1.0));
    const HamHess H = hamiltonian_hessians(tw, z, zeta);
    CHECK((H.p_zetazeta + inverse_metric_at(tw, z)).cwiseAbs().maxCoeff() < 1e-13);
    const double h = 1e-5;
    for (int l = 0; l < 3; ++l) {
      Vec zp = z, zm = z;
      zp[l] += h;
      zm[l] -= h;
      const HamGrad gp = hamiltonian_gradients(tw, zp, zeta);
      const HamGrad gm = hamiltonian_gradients(tw, zm, zeta);
      const Vec dzeta_fd = (gp.dp_dzeta - gm.dp_dzeta) / (2 * h);
      const Covec dz_fd = (gp.dp_dz - gm.dp_dz) / (2 * h);
      for (int jj = 0; jj < 3; ++jj) {
        CHECK(H.p_zzeta(l, jj) == doctest::Approx(dzeta_fd[jj]).epsilon(5e-6).scale(1.0));
        CHECK(H.p_zz(l, jj) == doctest::Approx(dz_fd[jj]).epsilon(5e-5).scale(1.0));
      }
    }
  }
}

TEST_CASE("sqrt_det: closed forms agree with generic determinant") {
  TwirlPullbackModel tw;
  ConformalBumpModel cf;
  SphereStripModel ss;
  for (const Vec& z : sample_points(200, 91)) {
    CHECK(tw.sqrt_det(z) == 1.0);
    CHECK(std::sqrt(std::abs(metric_at(tw, z).determinant())) ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cf.sqrt_det(z) ==
          doctest::Approx(std::sqrt(std::abs(metric_at(cf, z).determinant())))
              .epsilon(1e-12));
    CHECK(ss.sqrt_det(z) ==
          doctest::Approx(std::sqrt(std::abs(metric_at(ss, z).determinant())))
              .epsilon(1e-12));
  }
}

TEST_CASE("twirl map: inverse and phase are exact") {
  TwirlPullbackModel tw;
  for (const Vec& z : sample_points(200, 101, 2.2, 1.2)) {
    const Vec w = tw.map(z);
    CHECK((tw.inverse_map(w) - z).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(std::hypot(w[1], w[2]) == doctest::Approx(std::hypot(z[1], z[2])).epsilon(1e-14));
    const SpaceVec omega(0.6, 0.8);
    CHECK(tw.phase(z, omega) == doctest::Approx(w[0] - 0.6 * w[1] - 0.8 * w[2]));
  }
  // Identity outside the support.
  const Vec zout(0.0, 1.3, -0.4);
  CHECK((tw.map(zout) - zout).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("box_of: flat operator on linear and quadratic fields") {
  MinkowskiModel mink;
  const SpaceVec omega(1.0, 0.0);
  auto grad_phase = [&](const Vec&) { return Covec(1.0, -omega[0], -omega[1]); };
  auto grad_t2 = [](const Vec& z) { return Covec(2.0 * z[0], 0.0, 0.0); };
  for (const Vec& z : sample_points(20, 111)) {
    CHECK(std::abs(box_of(mink, grad_phase, z)) < 1e-10);
    CHECK(box_of(mink, grad_t2, z) == doctest::Approx(2.0).epsilon(1e-9));
  }
}

TEST_CASE("box_of: conformal value matches analytic divergence form") {
  // For g = kappa*eta and f = t - x1:
  //   box f = kappa^{-3/2} d/dx1 (kappa^{1/2}) = 0.5 kappa^{-2} d kappa/dx1.
  ConformalBumpModel cf;
  auto grad = [](const Vec&) { return Covec(1.0, -1.0, 0.0); };
  for (const Vec& z : sample_points(60, 121, 1.0, 0.75)) {
    const auto K = cf.kappa_jet(z);
    const double expect = 0.5 * K.dk[0] / (K.k * K.k);
    CHECK(box_of(cf, grad, z, 1e-4) == doctest::Approx(expect).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("wave_coeffs: flat zero and conformal closed form") {
  MinkowskiModel mink;
  const WaveCoeffs wm = wave_coeffs(mink, Vec(0.1, 0.2, 0.3));
  CHECK(wm.b.cwiseAbs().maxCoeff() == 0.0);
  CHECK((wm.ginv - kEta).cwiseAbs().maxCoeff() == 0.0);

  // b^k = 0.5 kappa^{-2} eta^{jk} d_j kappa for the conformal family.
  ConformalBumpModel cf;
  for (const Vec& z : sample_points(60, 131, 1.0, 0.75)) {
    const auto K = cf.kappa_jet(z);
    const WaveCoeffs w = wave_coeffs(cf, z);
    const Vec expect(0.0, 0.5 * K.dk[0] / (K.k * K.k), 0.5 * K.dk[1] / (K.k * K.k));
    CHECK((w.b - expect).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(w.sqrt_det == doctest::Approx(std::pow(K.k, 1.5)).epsilon(1e-14));
  }

  // Twirl coefficients agree with an FD-derivative custom wrapper; the FD dg
  // truncation is ~h^2 |g'''| ~ 3e-5 here (|g'''| ~ 4e4 near the blend peak).
  TwirlPullbackModel tw;
  CustomModel fd_twirl;
  fd_twirl.g_fn = [tw](const Vec& z) { return tw.g(z); };
  for (const Vec& z : sample_points(20, 132, 1.5, 0.85)) {
    const WaveCoeffs wa = wave_coeffs(tw, z);
    const WaveCoeffs wf = wave_coeffs(fd_twirl, z);
    CHECK((wa.b - wf.b).cwiseAbs().maxCoeff() < 5e-5);
  }
}

TEST_CASE("canonical_omega_set: contents, size, units, dimension guard") {
  auto s2 = canonical_omega_set(2);
  REQUIRE(s2.size() == 5);
  CHECK((s2[0] - Eigen::Vector2d(1, 0).eval()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((s2[1] - Eigen::Vector2d(-1, 0).eval()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((s2[2] - Eigen::Vector2d(0, 1).eval()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((s2[3] - Eigen::Vector2d(0, -1).eval()).cwiseAbs().maxCoeff() == 0.0);
  const double s = 1.0 / std::sqrt(2.0);
  CHECK((s2[4] - Eigen::Vector2d(s, s).eval()).cwiseAbs().maxCoeff() < 1e-16);
  CHECK(canonical_omega_set(3).size() == 9);
  CHECK(canonical_omega_set(5).size() == 20);
  for (int n : {2, 3, 4})
    for (const auto& w : canonical_omega_set(n))
      CHECK(std::abs(w.norm() - 1.0) < 1e-15);
  CHECK_THROWS_WITH_AS(canonical_omega_set(1), doctest::Contains("n >= 2"), Error);
  try {
    canonical_omega_set(0);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionTooSmall);
  }
}

TEST_CASE("make_model: descriptor round trip, validation, signature probe") {
  AnyModel tw = make_model({{"family", "twirl"}, {"n", 2}});
  CHECK(model_descriptor(tw)["params"]["a0"].get<double>() ==
        doctest::Approx(3.0 * M_PI / 4.0));
  AnyModel tw2 = make_model(
      {{"family", "twirl"}, {"params", {{"a0", M_PI / 4.0}}}});
  CHECK(model_hash(tw) != model_hash(tw2));
  CHECK(model_hash(tw) == model_hash(make_model({{"family", "twirl"}})));

  try {
    make_model({{"family", "nosuch"}});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigError);
  }
  try {
    make_model({{"family", "twirl"}, {"params", {{"a00", 1.0}}}});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("a00") != std::string::npos);
  }
  try {
    make_model({{"family", "minkowski"}, {"n", 1}});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionTooSmall);
  }
}

TEST_CASE("custom models: FD fallback, closure priority, failure modes") {
  TwirlPullbackModel tw;
  CustomModel c;
  c.g_fn = [tw](const Vec& z) { return tw.g(z); };
  const Vec z(0.2, 0.35, -0.1);
  // FD fallback approximates the analytic jet.
  const MetricJet1 ja = tw.jet1(z);
  const MetricJet1 jf = c.jet1(z);
  for (int l = 0; l < 3; ++l)
    CHECK((ja.dg[l] - jf.dg[l]).cwiseAbs().maxCoeff() < 1e-6);

  // Signature probe rejects a non-Lorentzian custom metric.
  CustomModel bad;
  bad.g_fn = [](const Vec&) { return Mat(Mat::Identity()); };
  try {
    check_signature(bad);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonLorentzianSignature);
  }

  // Derivatives unavailable when FD is disabled and no closures exist.
  CustomModel locked;
  locked.g_fn = [](const Vec&) { return minkowski_eta(); };
  locked.allow_fd = false;
  try {
    locked.jet1(Vec(0, 0, 0));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DerivativeUnavailable);
  }

  // Singular metric rejected.
  CustomModel sing;
  sing.g_fn = [](const Vec&) { return Mat(Mat::Zero()); };
  try {
    inverse_metric_at(sing, Vec(0, 0, 0));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SingularMetric);
  }
}

TEST_CASE("sphere strip: core metric is the strip product form") {
  SphereStripModel ss;
  // Inside |x| <= blend_in the psi blend is exactly 1, so g11 = cos^2(x2/rho).
  for (double x2 : {0.0, 0.1, 0.25, 0.4}) {
    const Vec z(0.3, 0.2, x2);
    if (std::hypot(z[1], z[2]) > ss.blend_in) continue;
    const double c = std::cos(x2 / ss.rho);
    CHECK(metric_at(ss, z)(1, 1) == doctest::Approx(c * c).epsilon(1e-14));
  }
  // Positivity margin of the spatial part over a dense scan.
  double fmin = 1e9;
  for (int a = -60; a <= 60; ++a)
    for (int b = -60; b <= 60; ++b) {
      const Vec z(0.0, a / 40.0, b / 40.0);
      fmin = std::min(fmin, metric_at(ss, z)(1, 1));
    }
  CHECK(fmin > 0.02);
}
