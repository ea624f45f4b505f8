#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wavetrace/eikonal.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace wavetrace;

namespace {

const SpaceVec kE1(1.0, 0.0);
const SpaceVec kDiag(1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0));

// Closed-form flowout preimage for the pullback model: Φ(q) = F⁻¹(z0 + r(1,ω))
// gives z0 + r(1,ω) = F(w), i.e. r = F(w)_x·ω + 1, y = F(w)_x·ω⊥,
// t0 = F(w)_t − r.
FlowoutCoords twirl_oracle_coords(const TwirlPullbackModel& tw, const SpaceVec& omega,
                                  const Vec& w) {
  const Vec Fw = tw.map(w);
  FlowoutCoords q;
  q.r = Fw[1] * omega[0] + Fw[2] * omega[1] + 1.0;
  q.y = -Fw[1] * omega[1] + Fw[2] * omega[0];
  q.t0 = Fw[0] - q.r;
  return q;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("plane chart and straight seed invert each other exactly") {
  for (const SpaceVec& omega : {kE1, kDiag}) {
    for (double t0 : {-2.0, 0.3}) {
      for (double y : {-0.8, 0.0, 1.7}) {
        for (double r : {-1.5, 0.0, 2.25}) {
          const Vec w = plane_point(omega, t0, y) + r * Vec(1.0, omega[0], omega[1]);
          const FlowoutCoords q = straight_seed(omega, w);
          CHECK(std::abs(q.t0 - t0) < 1e-14);
          CHECK(std::abs(q.y - y) < 1e-14);
          CHECK(std::abs(q.r - r) < 1e-14);
        }
      }
    }
  }
}

TEST_CASE("invert_phi: flat-space examples are exact") {
  MinkowskiModel mink;
  for (const SpaceVec& omega : {kE1, kDiag}) {
    // Generic target off the plane.
    const SpaceVec perp(-omega[1], omega[0]);
    const Vec w(3.0, 0.2 * omega[0] + 0.37 * perp[0], 0.2 * omega[1] + 0.37 * perp[1]);
    const FlowoutInverse inv = invert_phi(mink, omega, w);
    CHECK(inv.status == InvertStatus::Seeded);
    CHECK(inv.iterations == 0);
    CHECK(inv.residual < 1e-14);
    CHECK(std::abs(inv.q.r - 1.2) < 1e-14);          // x·ω + 1
    CHECK(std::abs(inv.q.y - 0.37) < 1e-14);
    CHECK(std::abs(inv.q.t0 - (3.0 - 1.2)) < 1e-14);
    CHECK((inv.z0 - (w - inv.q.r * Vec(1.0, omega[0], omega[1]))).norm() < 1e-14);
    CHECK((inv.zeta - Covec(1.0, -omega[0], -omega[1])).norm() < 1e-15);
    CHECK(std::abs(inv.det + 1.0) < 1e-12);  // det [e_t | (0,ω⊥) | (1,ω)] = −1
    CHECK(inv.condition >= 1.0);
    CHECK(inv.condition < 5.0);

    // Target on the incoming plane itself: the fixed point r = 0.
    const Vec w0 = plane_point(omega, -0.9, 0.55);
    const FlowoutInverse inv0 = invert_phi(mink, omega, w0);
    CHECK(inv0.status == InvertStatus::Seeded);
    CHECK(inv0.residual == 0.0);
    CHECK(std::abs(inv0.q.r) < 1e-15);
    CHECK((inv0.z0 - w0).norm() < 1e-15);

    // Value and gradient wrappers.
    CHECK(std::abs(eikonal_value(mink, omega, w) -
                   (w[0] - w[1] * omega[0] - w[2] * omega[1])) < 1e-14);
    CHECK((eikonal_gradient(mink, omega, w) - Covec(1.0, -omega[0], -omega[1]))
              .norm() < 1e-15);
  }
}

TEST_CASE("invert_phi: twirl interior targets match the closed-form oracle") {
  TwirlPullbackModel tw;
  const std::vector<Vec> targets = {Vec(0.3, 0.2, -0.1), Vec(-0.5, 0.4, 0.3),
                                    Vec(1.2, -0.3, 0.5), Vec(0.0, 0.0, 0.0),
                                    Vec(0.8, 0.55, -0.45)};
  for (const SpaceVec& omega : {kE1, kDiag}) {
    for (const Vec& w : targets) {
      const FlowoutCoords qo = twirl_oracle_coords(tw, omega, w);
      const FlowoutInverse inv = invert_phi(tw, omega, w);
      CHECK(inv.status != InvertStatus::Failed);
      CHECK(inv.residual <= 1e-9);
      CHECK(std::abs(inv.q.t0 - qo.t0) < 1e-7);
      CHECK(std::abs(inv.q.y - qo.y) < 1e-7);
      CHECK(std::abs(inv.q.r - qo.r) < 1e-7);
      CHECK(std::abs(inv.det + 1.0) < 1e-6);  // det DF ≡ 1 for the pullback

      // Phase value and gradient against the pullback composition.
      const double phi_o = tw.phase(w, omega);
      CHECK(std::abs((inv.q.t0 + 1.0) - phi_o) < 1e-7);
      const Covec dphi_o =
          tw.map_jet(w, 1).DF.transpose() * Covec(1.0, -omega[0], -omega[1]);
      CHECK((inv.zeta - dphi_o).norm() < 1e-6);

      // Seeding with the oracle converges without corrections.
      const FlowoutInverse seeded = invert_phi(tw, omega, w, qo);
      CHECK(seeded.status == InvertStatus::Seeded);
      CHECK(seeded.iterations == 0);
    }
  }
}

TEST_CASE("exterior identity holds through traced inversion (shadow included)") {
  TwirlPullbackModel tw;
  ConformalBumpModel conf;
  // Pre-plane, side, and shadow (behind the support) exterior points.
  const std::vector<Vec> targets = {Vec(0.4, -1.5, 0.8), Vec(0.3, 0.2, 1.3),
                                    Vec(0.7, 1.2, 0.3), Vec(2.5, 1.05, -0.2),
                                    Vec(-1.1, -0.4, -1.6)};
  for (const Vec& w : targets) {
    const double expect = w[0] - w[1];  // t − x·ω for ω = e₁
    const double vt = eikonal_value(tw, kE1, w);
    const double vc = eikonal_value(conf, kE1, w);
    CHECK(std::abs(vt - expect) < 1e-8);
    CHECK(std::abs(vc - expect) < 1e-8);
    CHECK((eikonal_gradient(tw, kE1, w) - Covec(1.0, -1.0, 0.0)).norm() < 1e-8);
    CHECK((eikonal_gradient(conf, kE1, w) - Covec(1.0, -1.0, 0.0)).norm() < 1e-8);
  }
}

TEST_CASE("invert_phi: conformal bump keeps the flat phase but stretches r") {
  // Null geodesics of κη are straight, so φ = t − x·ω and y, t0 match the
  // straight seed; only the parameter r is stretched to ∫κ dl.
  ConformalBumpModel conf;
  const SpaceVec omega = kE1;
  const Vec w(0.9, 0.35, 0.15);  // interior of the bump (|x| < 0.8)
  const FlowoutInverse inv = invert_phi(conf, omega, w);
  CHECK(inv.status == InvertStatus::Converged);
  CHECK(inv.residual <= 1e-9);

  const double s_w = w[1] * omega[0] + w[2] * omega[1] + 1.0;  // geometric length
  CHECK(std::abs(inv.q.y - (-w[1] * omega[1] + w[2] * omega[0])) < 1e-9);
  CHECK(std::abs(inv.q.t0 - (w[0] - s_w)) < 1e-9);
  CHECK(std::abs((inv.q.t0 + 1.0) - (w[0] - w[1])) < 1e-9);
  CHECK((inv.zeta - Covec(1.0, -1.0, 0.0)).norm() < 1e-9);
  CHECK(inv.q.r > s_w);  // the bump slows the parameter down

  // Independent Simpson quadrature of ∫κ along the straight segment.
  const Vec z0 = plane_point(omega, inv.q.t0, inv.q.y);
  const int n = 400;
  double quad = 0.0;
  for (int i = 0; i < n; ++i) {
    const double a = s_w * i / n, b = s_w * (i + 1) / n;
    auto kap = [&](double s) {
      return conf.kappa(z0 + s * Vec(1.0, omega[0], omega[1]));
    };
    quad += (b - a) / 6.0 * (kap(a) + 4.0 * kap(0.5 * (a + b)) + kap(b));
  }
  CHECK(std::abs(inv.q.r - quad) < 1e-8);
}

TEST_CASE("eikonal_field: flat grid is exact outside, machine-accurate inside") {
  MinkowskiModel mink;
  const GridSpec grid{};  // 61³ over [−3,3]×[−3,3]²
  const EikonalField f = eikonal_field(mink, kE1, grid);
  REQUIRE(f.phi.size() == grid.size());
  CHECK(f.n_failed() == 0);
  CHECK(f.max_residual() < 1e-12);
  // Exterior nodes go through the identity path and are exact; interior nodes
  // carry the inversion threshold (plus seed-extrapolation noise ~15x that,
  // since the chord march extrapolates from previously accepted coordinates).
  double max_phi_err = 0.0, max_grad_err = 0.0;
  for (int i = 0; i < grid.nt; ++i)
    for (int j = 0; j < grid.nx; ++j)
      for (int k = 0; k < grid.nx; ++k) {
        const Vec w = grid.node(i, j, k);
        const std::size_t id = grid.idx(i, j, k);
        const double phi_err = std::abs(f.phi[id] - (w[0] - w[1]));
        if (std::hypot(w[1], w[2]) >= 1.0) {
          // φ is stored as q.t0 + 1 (chart-consistent), so the identity
          // path agrees with t − x·ω up to one rounding of the roundtrip.
          CHECK(f.status[id] == InvertStatus::Seeded);
          CHECK(phi_err < 1e-14);
        }
        max_phi_err = std::max(max_phi_err, phi_err);
        max_grad_err = std::max(
            max_grad_err, (f.dphi[id] - Covec(1.0, -1.0, 0.0)).cwiseAbs().maxCoeff());
      }
  MESSAGE("flat field: max |phi err| = ", max_phi_err,
          ", max |dphi err| = ", max_grad_err,
          ", seeded = ", f.count(InvertStatus::Seeded), "/", grid.size());
  CHECK(max_phi_err < 1e-10);
  CHECK(max_grad_err < 1e-13);

  // Properness probe: per-slice range over |x| ≤ 1 is [c−1, c+1] for ω = e₁.
  const PropernessReport rep = properness_probe(f);
  CHECK(rep.monotone);
  CHECK(rep.violations.empty());
  for (std::size_t i = 0; i < rep.t.size(); ++i) {
    CHECK(std::abs(rep.phi_min[i] - (rep.t[i] - 1.0)) < 1e-10);
    CHECK(std::abs(rep.phi_max[i] - (rep.t[i] + 1.0)) < 1e-10);
  }
}

TEST_CASE("eikonal_field: twirl certified profile meets the residual and oracle bounds") {
  TwirlPullbackModel tw;
  GridSpec grid;
  grid.t_min = -1.0;
  grid.t_max = 1.0;
  grid.nt = 11;
  grid.x_min = -1.1;
  grid.x_max = 1.1;
  grid.nx = 23;
  const auto tick = std::chrono::steady_clock::now();
  const EikonalField f = eikonal_field(tw, kE1, grid);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - tick).count();
  MESSAGE("certified 11x23x23 twirl field: ", secs, " s, ",
          f.count(InvertStatus::Converged), " converged / ",
          f.count(InvertStatus::Seeded), " seeded");

  CHECK(f.n_failed() == 0);
  CHECK(f.max_residual() <= 1e-8);

  double max_phi_err = 0.0, max_grad_err = 0.0, max_r_err = 0.0, max_cond = 0.0;
  double min_grad_inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid.nt; ++i)
    for (int j = 0; j < grid.nx; ++j)
      for (int k = 0; k < grid.nx; ++k) {
        const Vec w = grid.node(i, j, k);
        const std::size_t id = grid.idx(i, j, k);
        max_phi_err = std::max(max_phi_err, std::abs(f.phi[id] - tw.phase(w, kE1)));
        const Covec dphi_o =
            tw.map_jet(w, 1).DF.transpose() * Covec(1.0, -1.0, 0.0);
        max_grad_err =
            std::max(max_grad_err, (f.dphi[id] - dphi_o).cwiseAbs().maxCoeff());
        const FlowoutCoords qo = twirl_oracle_coords(tw, kE1, w);
        max_r_err = std::max(max_r_err, std::abs(f.coords[id].r - qo.r));
        min_grad_inf = std::min(min_grad_inf, f.dphi[id].cwiseAbs().maxCoeff());
        if (std::isfinite(f.condition[id])) max_cond = std::max(max_cond, f.condition[id]);
        if (std::hypot(w[1], w[2]) >= 1.0) CHECK(f.status[id] == InvertStatus::Seeded);
      }
  MESSAGE("max |phi - oracle| = ", max_phi_err, ", max cond = ", max_cond);
  CHECK(max_phi_err < 1e-7);
  CHECK(max_grad_err < 1e-6);
  CHECK(max_r_err < 1e-6);
  CHECK(min_grad_inf >= 0.1);  // gradient nonvanishing proxy

  CHECK(properness_probe(f).monotone);
}

TEST_CASE("eikonal_field: survey profile matches the closed form; separation") {
  TwirlPullbackModel tw;
  GridSpec grid;
  grid.t_min = -1.5;
  grid.t_max = 1.5;
  grid.nt = 31;
  grid.x_min = -1.5;
  grid.x_max = 1.5;
  grid.nx = 31;  // Δx = Δt = 0.1
  const auto tick = std::chrono::steady_clock::now();
  const EikonalField f1 = eikonal_field(tw, kE1, grid, survey_field_options());
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - tick).count();
  const EikonalField f2 = eikonal_field(tw, kDiag, grid, survey_field_options());
  MESSAGE("survey 31^3 twirl field: ", secs, " s per direction");

  CHECK(f1.n_failed() == 0);
  CHECK(f2.n_failed() == 0);
  CHECK(f1.max_residual() < 5e-6);

  // Every node against the closed form of the pullback phase. Covers the
  // interior marching and the exterior identity path in one sweep.
  auto field_vs_closed_form = [&](const EikonalField& f, const SpaceVec& om) {
    const Covec flat(1.0, -om[0], -om[1]);
    double max_phi = 0.0, max_grad = 0.0;
    for (int i = 0; i < grid.nt; ++i)
      for (int j = 0; j < grid.nx; ++j)
        for (int k = 0; k < grid.nx; ++k) {
          const std::size_t id = grid.idx(i, j, k);
          const Vec w = grid.node(i, j, k);
          const Covec dstar = tw.map_jet(w, 1).DF.transpose() * flat;
          max_phi = std::max(max_phi, std::abs(f.phi[id] - tw.phase(w, om)));
          max_grad =
              std::max(max_grad, (f.dphi[id] - dstar).cwiseAbs().maxCoeff());
        }
    MESSAGE("survey vs closed form: |dphi| err = ", max_grad,
            ", |phi| err = ", max_phi);
    CHECK(max_phi < 1e-5);
    CHECK(max_grad < 1e-4);
  };
  field_vs_closed_form(f1, kE1);
  field_vs_closed_form(f2, kDiag);

  // Directions never become positive multiples of each other. The flat π/4
  // separation does not survive the strong default twist (cond DF ≈ 28
  // compresses angles by roughly its reciprocal), so the bound is the
  // measured floor, cross-checked against the closed form at every node.
  double min_angle = std::numeric_limits<double>::infinity();
  double min_angle_star = min_angle;
  auto angle_of = [](const SpaceVec& s1, const SpaceVec& s2) {
    const double cross = s1[0] * s2[1] - s1[1] * s2[0];
    return std::atan2(std::abs(cross), s1.dot(s2));
  };
  for (int i = 0; i < grid.nt; ++i)
    for (int j = 0; j < grid.nx; ++j)
      for (int k = 0; k < grid.nx; ++k) {
        const std::size_t id = grid.idx(i, j, k);
        min_angle = std::min(
            min_angle, angle_of(SpaceVec(f1.dphi[id][1], f1.dphi[id][2]),
                                SpaceVec(f2.dphi[id][1], f2.dphi[id][2])));
        const Mat dft = tw.map_jet(grid.node(i, j, k), 1).DF.transpose();
        const Covec d1 = dft * Covec(1.0, -kE1[0], -kE1[1]);
        const Covec d2 = dft * Covec(1.0, -kDiag[0], -kDiag[1]);
        min_angle_star = std::min(
            min_angle_star,
            angle_of(SpaceVec(d1[1], d1[2]), SpaceVec(d2[1], d2[2])));
      }
  MESSAGE("min spatial-gradient angle = ", min_angle,
          " (closed form ", min_angle_star, ")");
  CHECK(min_angle > 0.01);
  CHECK(std::abs(min_angle - min_angle_star) < 1e-3);

  CHECK(properness_probe(f1).monotone);
}

TEST_CASE("phase is constant along 100 random rays over r in [0,4]") {
  TwirlPullbackModel tw;
  const SpaceVec omega = kE1;
  std::mt19937_64 rng(20260813ull);
  std::uniform_real_distribution<double> ut(-1.5, 1.5), uy(-1.5, 1.5);
  // Far targets (r up to 4) sit near the ODE evaluation noise floor
  // (~3e-11), so the inversion runs at 1e-10 — still two orders tighter
  // than the property asserted below.
  InvertOptions iopt;
  iopt.inv_tol = 1e-10;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const double t0 = ut(rng), y = uy(rng);
    const Vec z0 = plane_point(omega, t0, y);
    std::optional<FlowoutCoords> seed;
    for (double r : {0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0}) {
      const PhasePoint p = flow_to(tw, z0, Covec(1.0, -1.0, 0.0), r);
      const FlowoutInverse inv = invert_phi(tw, omega, p.z, seed, iopt);
      seed = inv.q;
      worst = std::max(worst, std::abs((inv.q.t0 + 1.0) - (t0 + 1.0)));
    }
  }
  MESSAGE("max |phi(gamma(r)) - phi(gamma(0))| = ", worst);
  CHECK(worst <= 1e-8);
}

TEST_CASE("negative control: strip field construction reports trouble") {
  // The lens focuses rays inside the cylinder (folds near x = (−0.1, 0) and
  // (0.27, ±0.17)), so the inversion cannot define a single-valued field.
  SphereStripModel ss;
  GridSpec grid;
  grid.t_min = -0.5;
  grid.t_max = 0.5;
  grid.nt = 5;
  grid.x_min = -0.6;
  grid.x_max = 0.6;
  grid.nx = 13;
  bool threw = false;
  std::string what;
  std::size_t failed = 0;
  bool monotone = true;
  try {
    const EikonalField f = eikonal_field(ss, kE1, grid);
    failed = f.n_failed();
    monotone = properness_probe(f).monotone;
  } catch (const Error& e) {
    threw = true;
    what = e.what();
  }
  MESSAGE("strip field: threw=", threw, " what=", what, " failed=", failed,
          " monotone=", monotone);
  CHECK((threw || failed > 0 || !monotone));
}

TEST_CASE("error paths: NewtonDiverged throw and Failed try-status") {
  TwirlPullbackModel tw;
  const Vec w(0.3, 0.2, -0.1);  // interior: the straight seed is inexact
  InvertOptions opt;
  opt.max_iter = 0;
  opt.multistart = 0;
  const FlowoutInverse inv = invert_phi_try(tw, kE1, w, {}, opt);
  CHECK(inv.status == InvertStatus::Failed);
  CHECK(inv.residual > 1e-9);  // best-seen diagnostics survive
  CHECK_THROWS_AS((void)invert_phi(tw, kE1, w, {}, opt), const Error&);
  try {
    (void)invert_phi(tw, kE1, w, {}, opt);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NewtonDiverged);
    CHECK(std::string(e.what()).find("NewtonDiverged") != std::string::npos);
  }
}

TEST_CASE("field serialization: header, node table, contour, determinism") {
  MinkowskiModel mink;
  GridSpec grid;
  grid.nt = 5;
  grid.nx = 7;
  const EikonalField f = eikonal_field(mink, kDiag, grid);
  const auto dir = std::filesystem::temp_directory_path() / "wavetrace_test_eik";
  std::filesystem::remove_all(dir);
  write_eikonal_field(f, dir, "field");

  const json h = read_json(dir / "field.json");
  CHECK(h["kind"] == "eikonal_field");
  CHECK(h["grid"]["nt"] == 5);
  CHECK(h["counts"]["failed"] == 0);
  CHECK(h["model_hash"].is_string());

  std::ifstream table(dir / "field.csv");
  std::string line;
  std::getline(table, line);
  CHECK(line ==
        "t,x1,x2,phi,dphi_t,dphi_x1,dphi_x2,residual,t0,y,r,status");
  int rows = 0;
  bool found_seeded = false;
  while (std::getline(table, line)) {
    ++rows;
    if (line.find("Seeded") != std::string::npos) found_seeded = true;
  }
  CHECK(rows == int(grid.size()));
  CHECK(found_seeded);

  std::ifstream contour(dir / "field_contour.csv");
  std::getline(contour, line);
  CHECK(line == "t,x1,x2,phi");

  // Byte determinism of repeated writes.
  const std::string first = slurp(dir / "field.csv");
  write_eikonal_field(f, dir, "field");
  CHECK(first == slurp(dir / "field.csv"));
  CHECK(first.size() > 0);
}
