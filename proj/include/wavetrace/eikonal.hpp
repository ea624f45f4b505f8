#pragma once

// Flowout-map inversion and grid-sampled eikonal phase fields.
//
// The flowout Φ(t0, y, r) follows the null bicharacteristic that starts on
// the incoming plane {x·ω = −1} at z(t0, y) = (t0, −ω + y ω⊥) with covector
// (1, −ω) and runs to parameter r. Inverting Φ at a target point w yields the
// phase φ(w) = t0 + 1 (the plane value of t − x·ω transported along the ray)
// and its gradient dφ(w) = ζ(r).

#include "wavetrace/core.hpp"
#include "wavetrace/errors.hpp"
#include "wavetrace/flow.hpp"
#include "wavetrace/grid.hpp"
#include "wavetrace/io.hpp"
#include "wavetrace/models.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace wavetrace {

enum class InvertStatus : std::uint8_t { Converged = 0, Seeded = 1, Failed = 2 };

inline const char* invert_status_name(InvertStatus s) {
  switch (s) {
    case InvertStatus::Converged: return "Converged";
    case InvertStatus::Seeded: return "Seeded";
    case InvertStatus::Failed: return "Failed";
  }
  return "Unknown";
}

/// @brief Coordinates of a point in flowout parameter space: (t0, y) chart
/// the incoming plane, r is the flow parameter.
struct FlowoutCoords {
  double t0 = 0.0, y = 0.0, r = 0.0;
};

inline Vec plane_point(const SpaceVec& omega, double t0, double y) {
  const SpaceVec perp(-omega[1], omega[0]);
  return Vec(t0, -omega[0] + y * perp[0], -omega[1] + y * perp[1]);
}

/// @brief Straight-line (flat-metric) preimage of w; exact wherever the
/// segment from the plane to w is unbent.
inline FlowoutCoords straight_seed(const SpaceVec& omega, const Vec& w) {
  FlowoutCoords q;
  q.r = w[1] * omega[0] + w[2] * omega[1] + 1.0;
  q.y = -w[1] * omega[1] + w[2] * omega[0];
  q.t0 = w[0] - q.r;
  return q;
}

struct InvertOptions {
  // Converged when |Φ(q) − w| ≤ inv_tol. The default is tight because the
  // eikonal residual picks up |∂_z H| (≈ 40 at strongly twisted points) times
  // the position mismatch; 1e-11 keeps |g(dφ,dφ)| comfortably under 1e-8.
  double inv_tol = 1e-11;
  int max_iter = 25;       // Newton iterations per start
  int multistart = 5;      // perturbed fallback seeds after the default one
  double seed_jitter = 0.2;
  OdeTol tol{};            // ODE tolerances for flow evaluations
  double q_cap = 30.0;     // divergence guard on |t0|, |y|, |r|
};

struct FlowoutInverse {
  Vec w = Vec::Zero();          // target point
  FlowoutCoords q{};            // solution chart coordinates
  Vec z0 = Vec::Zero();         // plane point of q
  Covec zeta = Covec::Zero();   // ζ(r) at the endpoint: the phase gradient
  int iterations = 0;           // Newton iterations taken by the winning start
  double residual = std::numeric_limits<double>::infinity();  // |Φ(q) − w|
  InvertStatus status = InvertStatus::Failed;
  double det = std::numeric_limits<double>::quiet_NaN();        // det DΦ at q
  double condition = std::numeric_limits<double>::quiet_NaN();  // cond₂ DΦ at q
};

namespace detail {

inline double cond2(const Mat& a) {
  Eigen::JacobiSVD<Mat> svd(a);
  const auto& s = svd.singularValues();
  return s[2] > 0.0 ? s[0] / s[2] : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// @brief Newton inversion of the flowout map at w; returns status Failed
/// instead of throwing when every start diverges.
template <class M>
FlowoutInverse invert_phi_try(const M& m, const SpaceVec& omega, const Vec& w,
                              std::optional<FlowoutCoords> seed = {},
                              const InvertOptions& opt = {}) {
  FlowoutInverse best;
  best.w = w;
  const FlowoutCoords q0 = seed ? *seed : straight_seed(omega, w);

  auto attempt = [&](FlowoutCoords q) -> bool {
    for (int iter = 0; iter <= opt.max_iter; ++iter) {
      if (std::abs(q.t0) > opt.q_cap || std::abs(q.y) > opt.q_cap ||
          std::abs(q.r) > opt.q_cap)
        return false;
      const Vec z0 = plane_point(omega, q.t0, q.y);
      const FlowoutJet jet = variational_to(m, omega, z0, q.r, opt.tol);
      const Vec res = jet.end.z - w;
      const double rn = res.norm();
      const bool done = rn <= opt.inv_tol;
      if (done || rn < best.residual) {
        best.q = q;
        best.z0 = z0;
        best.zeta = jet.end.zeta;
        best.iterations = iter;
        best.residual = rn;
        best.det = jet.det;
        best.condition = detail::cond2(jet.dPhi);
      }
      if (done) {
        best.status = (iter == 0) ? InvertStatus::Seeded : InvertStatus::Converged;
        return true;
      }
      const Vec dq = jet.dPhi.partialPivLu().solve(-res);
      if (!dq.allFinite()) return false;
      // Damped update: halve the step until the residual decreases, so
      // overshoot cannot lock the iteration into a cycle between two points.
      const Covec zeta0(1.0, -omega[0], -omega[1]);
      bool accepted = false;
      for (double lambda = 1.0; lambda >= 1.0 / 16.0; lambda /= 2) {
        FlowoutCoords qt{q.t0 + lambda * dq[0], q.y + lambda * dq[1],
                         q.r + lambda * dq[2]};
        if (std::abs(qt.t0) > opt.q_cap || std::abs(qt.y) > opt.q_cap ||
            std::abs(qt.r) > opt.q_cap)
          continue;
        const PhasePoint trial = flow_to(
            m, plane_point(omega, qt.t0, qt.y), zeta0, qt.r, opt.tol);
        if ((trial.z - w).norm() < rn) {
          q = qt;
          accepted = true;
          break;
        }
      }
      if (!accepted) return false;  // stalled; let the next start take over
    }
    return false;
  };

  if (attempt(q0)) return best;
  for (int k = 0; k < opt.multistart; ++k) {
    FlowoutCoords qk = q0;
    const double j = opt.seed_jitter * (1 + k / 5);
    switch (k % 5) {
      case 0: qk.t0 += j; break;
      case 1: qk.t0 -= j; break;
      case 2: qk.y += j; break;
      case 3: qk.y -= j; break;
      case 4: qk.r += j; break;
    }
    if (attempt(qk)) return best;
  }
  best.status = InvertStatus::Failed;
  return best;
}

/// @brief Newton inversion of the flowout map at w. Seed defaults to the
/// straight-line preimage; throws NewtonDiverged after multistart exhaustion.
template <class M>
FlowoutInverse invert_phi(const M& m, const SpaceVec& omega, const Vec& w,
                          std::optional<FlowoutCoords> seed = {},
                          const InvertOptions& opt = {}) {
  FlowoutInverse inv = invert_phi_try(m, omega, w, seed, opt);
  if (inv.status == InvertStatus::Failed)
    fail(ErrorCode::NewtonDiverged,
         "at w = (" + fmt17(w[0]) + ", " + fmt17(w[1]) + ", " + fmt17(w[2]) +
             "), best residual " + fmt17(inv.residual) + " after " +
             std::to_string(1 + opt.multistart) + " starts");
  return inv;
}

/// @brief Phase value φ_ω(w) = t0 + 1 via flowout inversion.
template <class M>
double eikonal_value(const M& m, const SpaceVec& omega, const Vec& w,
                     const InvertOptions& opt = {}) {
  return invert_phi(m, omega, w, {}, opt).q.t0 + 1.0;
}

/// @brief Phase gradient dφ_ω(w) = ζ(r) via flowout inversion.
template <class M>
Covec eikonal_gradient(const M& m, const SpaceVec& omega, const Vec& w,
                       const InvertOptions& opt = {}) {
  return invert_phi(m, omega, w, {}, opt).zeta;
}

// ---------------------------------------------------------------------------
// Grid-sampled field
// ---------------------------------------------------------------------------

struct FieldOptions {
  InvertOptions invert{};      // per-node Newton settings
  int refresh_every = 8;       // chord-Jacobian refresh cadence along a column
  int refresh_iters = 3;       // refresh when the previous node needed ≥ this
  double focal_det_tol = 1e-6; // |det DΦ| below this aborts with FocalPoint
  double fail_fraction = 1e-3; // FieldIncomplete threshold (share of all nodes)
  bool exterior_identity = true;  // closed-form fill where |x| ≥ 1
};

/// @brief Survey-accuracy preset for large reconstruction grids: the phase is
/// accurate to ~1e-7, an order below the reconstruction tolerances, at a
/// fraction of the certified-profile cost.
inline FieldOptions survey_field_options() {
  FieldOptions o;
  o.invert.inv_tol = 1e-7;
  o.invert.tol = OdeTol{1e-9, 1e-9};
  return o;
}

struct EikonalField {
  SpaceVec omega = SpaceVec(1.0, 0.0);
  GridSpec grid{};
  nlohmann::json model{};      // descriptor of the generating model
  std::string model_hash;
  double inv_tol = 1e-11;

  // Per-node samples (flat storage in GridSpec::idx order).
  std::vector<double> phi;
  std::vector<Covec> dphi;
  std::vector<double> residual;       // |g(dφ, dφ)| at the node
  std::vector<InvertStatus> status;
  std::vector<FlowoutCoords> coords;  // flowout preimage per node
  std::vector<double> condition;      // Newton conditioning (NaN where exact)

  std::size_t count(InvertStatus s) const {
    return std::size_t(std::count(status.begin(), status.end(), s));
  }
  std::size_t n_failed() const { return count(InvertStatus::Failed); }

  /// @brief Largest eikonal residual over non-Failed nodes.
  double max_residual() const {
    double out = 0.0;
    for (std::size_t i = 0; i < residual.size(); ++i)
      if (status[i] != InvertStatus::Failed)
        out = std::max(out, std::abs(residual[i]));
    return out;
  }
};

namespace detail {

/// @brief Extrapolate the next column node from up to four previous solutions.
inline FlowoutCoords predict_coords(const std::vector<FlowoutCoords>& hist, double dt) {
  const std::size_t n = hist.size();
  auto lc = [&](double a, double b, double c, double d) {
    FlowoutCoords q;
    const auto& q1 = hist[n - 1];
    const auto& q2 = hist[n >= 2 ? n - 2 : n - 1];
    const auto& q3 = hist[n >= 3 ? n - 3 : n - 1];
    const auto& q4 = hist[n >= 4 ? n - 4 : n - 1];
    q.t0 = a * q1.t0 + b * q2.t0 + c * q3.t0 + d * q4.t0;
    q.y = a * q1.y + b * q2.y + c * q3.y + d * q4.y;
    q.r = a * q1.r + b * q2.r + c * q3.r + d * q4.r;
    return q;
  };
  if (n >= 4) return lc(4, -6, 4, -1);
  if (n == 3) return lc(3, -3, 1, 0);
  if (n == 2) return lc(2, -1, 0, 0);
  FlowoutCoords q = hist[0];
  q.t0 += dt;  // the phase advances ~1:1 with node time
  return q;
}

}  // namespace detail

/// @brief Build the grid-sampled phase field for direction ω by per-node
/// flowout inversion. Nodes with |x| ≥ 1 use the exterior identity
/// φ = t − x·ω (exact for metrics that are flat outside the unit cylinder);
/// interior nodes march each spatial column in t with extrapolated seeds and
/// a chord Newton that refreshes its variational Jacobian on demand.
template <class M>
EikonalField eikonal_field(const M& m, const SpaceVec& omega, const GridSpec& grid,
                           const FieldOptions& opt = {}) {
  if (grid.nt < 2 || grid.nx < 2)
    fail(ErrorCode::ConfigError, "grid must have at least 2 nodes per axis");
  if (!(grid.t_max > grid.t_min) || !(grid.x_max > grid.x_min))
    fail(ErrorCode::ConfigError, "grid ranges must be increasing");

  EikonalField f;
  f.omega = omega;
  f.grid = grid;
  f.model = m.descriptor();
  f.model_hash = hex64(fnv1a(f.model.dump()));
  f.inv_tol = opt.invert.inv_tol;
  const std::size_t nn = grid.size();
  const double nanv = std::numeric_limits<double>::quiet_NaN();
  f.phi.assign(nn, nanv);
  f.dphi.assign(nn, Covec::Constant(nanv));
  f.residual.assign(nn, nanv);
  f.status.assign(nn, InvertStatus::Failed);
  f.coords.assign(nn, FlowoutCoords{nanv, nanv, nanv});
  f.condition.assign(nn, nanv);

  const bool identity_ok = opt.exterior_identity && m.support_radius() <= 1.0;
  const Covec grad_ext(1.0, -omega[0], -omega[1]);

  auto fill_node = [&](std::size_t id, const Vec& w, const FlowoutCoords& q,
                       const Covec& zeta, InvertStatus st, double cond) {
    f.phi[id] = q.t0 + 1.0;
    f.dphi[id] = zeta;
    f.residual[id] = 2.0 * std::abs(hamiltonian(m, w, zeta));
    f.status[id] = st;
    f.coords[id] = q;
    f.condition[id] = cond;
  };

  std::exception_ptr first_error;
  const int ncol = grid.nx * grid.nx;
#pragma omp parallel for schedule(dynamic, 4)
  for (int jk = 0; jk < ncol; ++jk) {
    try {
      const int j = jk / grid.nx, k = jk % grid.nx;
      const Vec base = grid.node(0, j, k);
      const double xr = std::hypot(base[1], base[2]);

      if (identity_ok && xr >= 1.0 - 1e-12) {
        // Exterior column: the phase equals the incoming plane wave.
        for (int i = 0; i < grid.nt; ++i) {
          const std::size_t id = grid.idx(i, j, k);
          const Vec w = grid.node(i, j, k);
          fill_node(id, w, straight_seed(omega, w), grad_ext, InvertStatus::Seeded,
                    std::numeric_limits<double>::quiet_NaN());
        }
      } else {
        // Interior column: chord Newton marching in t.
        std::vector<FlowoutCoords> hist;
        Mat J = Mat::Zero();
        Eigen::PartialPivLU<Mat> lu;
        bool j_valid = false;
        double j_det = 0.0, j_cond = nanv, det_sign = 0.0;
        int since_refresh = 0, last_iters = 0;

        auto refresh = [&](const FlowoutCoords& q, const Vec& w) {
          const FlowoutJet jet = variational_to(
              m, omega, plane_point(omega, q.t0, q.y), q.r, opt.invert.tol);
          J = jet.dPhi;
          lu.compute(J);
          j_valid = true;
          j_det = jet.det;
          j_cond = detail::cond2(J);
          since_refresh = 0;
          if (std::abs(j_det) < opt.focal_det_tol ||
              (det_sign != 0.0 && j_det * det_sign < 0))
            fail(ErrorCode::FocalPoint,
                 "det DΦ = " + fmt17(j_det) + " near w = (" + fmt17(w[0]) + ", " +
                     fmt17(w[1]) + ", " + fmt17(w[2]) + ")");
          det_sign = (j_det > 0) ? 1.0 : -1.0;
          return jet;
        };

        for (int i = 0; i < grid.nt; ++i) {
          const std::size_t id = grid.idx(i, j, k);
          const Vec w = grid.node(i, j, k);
          const FlowoutCoords q_pred = hist.empty()
                                           ? straight_seed(omega, w)
                                           : detail::predict_coords(hist, grid.dt());
          FlowoutCoords q = q_pred;

          bool ok = false;
          int iter = 0;
          PhasePoint end{};
          for (; iter <= opt.invert.max_iter; ++iter) {
            if (std::abs(q.t0) > opt.invert.q_cap ||
                std::abs(q.y) > opt.invert.q_cap || std::abs(q.r) > opt.invert.q_cap)
              break;
            const bool want_fresh = !j_valid || since_refresh >= opt.refresh_every ||
                                    last_iters >= opt.refresh_iters ||
                                    iter >= opt.refresh_iters;
            if (want_fresh) {
              const FlowoutJet jet = refresh(q, w);
              end = jet.end;
            } else {
              end = flow_to(m, plane_point(omega, q.t0, q.y),
                            Covec(1.0, -omega[0], -omega[1]), q.r, opt.invert.tol);
            }
            const Vec res = end.z - w;
            if (res.norm() <= opt.invert.inv_tol) {
              ok = true;
              break;
            }
            const Vec dq = lu.solve(-res);
            if (!dq.allFinite()) break;
            q.t0 += dq[0];
            q.y += dq[1];
            q.r += dq[2];
          }

          if (ok) {
            fill_node(id, w, q, end.zeta,
                      iter == 0 ? InvertStatus::Seeded : InvertStatus::Converged,
                      j_cond);
            hist.push_back(q);
            if (hist.size() > 4) hist.erase(hist.begin());
            last_iters = iter;
            ++since_refresh;
            continue;
          }
          // Robust fallback: full Newton with fresh Jacobians and multistart.
          const FlowoutInverse inv = invert_phi_try(m, omega, w, q_pred, opt.invert);
          if (inv.status != InvertStatus::Failed) {
            fill_node(id, w, inv.q, inv.zeta, inv.status, inv.condition);
            hist.push_back(inv.q);
            if (hist.size() > 4) hist.erase(hist.begin());
            refresh(inv.q, w);
            last_iters = inv.iterations;
          } else {
            // Node stays Failed; restart the continuation above it.
            hist.clear();
            j_valid = false;
            last_iters = 0;
          }
        }
      }
    } catch (...) {
#pragma omp critical
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (first_error) std::rethrow_exception(first_error);

  const double frac = double(f.n_failed()) / double(nn);
  if (frac > opt.fail_fraction)
    fail(ErrorCode::FieldIncomplete,
         std::to_string(f.n_failed()) + " of " + std::to_string(nn) +
             " nodes failed (" + fmt17(100.0 * frac) + "%)");
  return f;
}

// ---------------------------------------------------------------------------
// Properness probe
// ---------------------------------------------------------------------------

struct PropernessReport {
  std::vector<double> t;                 // slice times
  std::vector<double> phi_min, phi_max;  // over |x| ≤ 1, non-Failed nodes
  std::vector<int> violations;           // slice indices breaking monotonicity
  bool monotone = true;
};

/// @brief Check that the per-slice min/max of φ over the unit cylinder are
/// monotone in t — the grid proxy for properness of φ on ℝ × B̄.
inline PropernessReport properness_probe(const EikonalField& f) {
  PropernessReport rep;
  const auto& g = f.grid;
  for (int i = 0; i < g.nt; ++i) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int j = 0; j < g.nx; ++j)
      for (int k = 0; k < g.nx; ++k) {
        const Vec w = g.node(i, j, k);
        if (std::hypot(w[1], w[2]) > 1.0 + 1e-12) continue;
        const std::size_t id = g.idx(i, j, k);
        if (f.status[id] == InvertStatus::Failed) continue;
        lo = std::min(lo, f.phi[id]);
        hi = std::max(hi, f.phi[id]);
      }
    rep.t.push_back(g.t_min + i * g.dt());
    const bool have = std::isfinite(lo);
    rep.phi_min.push_back(have ? lo : std::numeric_limits<double>::quiet_NaN());
    rep.phi_max.push_back(have ? hi : std::numeric_limits<double>::quiet_NaN());
  }
  for (std::size_t i = 1; i < rep.t.size(); ++i) {
    const double slack = 1e-9;
    if (std::isnan(rep.phi_min[i]) || std::isnan(rep.phi_min[i - 1])) continue;
    if (rep.phi_min[i] <= rep.phi_min[i - 1] + slack ||
        rep.phi_max[i] <= rep.phi_max[i - 1] + slack) {
      rep.violations.push_back(int(i));
      rep.monotone = false;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline json eikonal_header_json(const EikonalField& f) {
  json h;
  h["kind"] = "eikonal_field";
  h["omega"] = {json_num(f.omega[0]), json_num(f.omega[1])};
  h["grid"] = {{"t_min", json_num(f.grid.t_min)}, {"t_max", json_num(f.grid.t_max)},
               {"x_min", json_num(f.grid.x_min)}, {"x_max", json_num(f.grid.x_max)},
               {"nt", f.grid.nt},                 {"nx", f.grid.nx}};
  h["model"] = f.model;
  h["model_hash"] = f.model_hash;
  h["inv_tol"] = json_num(f.inv_tol);
  h["counts"] = {{"converged", f.count(InvertStatus::Converged)},
                 {"seeded", f.count(InvertStatus::Seeded)},
                 {"failed", f.count(InvertStatus::Failed)}};
  h["max_residual"] = json_num(f.max_residual());
  return h;
}

/// @brief Write <stem>.json (header), <stem>.csv (node table) and
/// <stem>_contour.csv (t, x1, x2, phi) under dir.
inline void write_eikonal_field(const EikonalField& f,
                                const std::filesystem::path& dir,
                                const std::string& stem) {
  std::filesystem::create_directories(dir);
  write_json(dir / (stem + ".json"), eikonal_header_json(f));

  CsvWriter table(dir / (stem + ".csv"),
                  {"t", "x1", "x2", "phi", "dphi_t", "dphi_x1", "dphi_x2",
                   "residual", "t0", "y", "r", "status"});
  CsvWriter contour(dir / (stem + "_contour.csv"), {"t", "x1", "x2", "phi"});
  const auto& g = f.grid;
  for (int i = 0; i < g.nt; ++i)
    for (int j = 0; j < g.nx; ++j)
      for (int k = 0; k < g.nx; ++k) {
        const std::size_t id = g.idx(i, j, k);
        const Vec w = g.node(i, j, k);
        table.row_mixed({fmt17(w[0]), fmt17(w[1]), fmt17(w[2]), fmt17(f.phi[id]),
                         fmt17(f.dphi[id][0]), fmt17(f.dphi[id][1]),
                         fmt17(f.dphi[id][2]), fmt17(f.residual[id]),
                         fmt17(f.coords[id].t0), fmt17(f.coords[id].y),
                         fmt17(f.coords[id].r), invert_status_name(f.status[id])});
        contour.row({w[0], w[1], w[2], f.phi[id]});
      }
}

}  // namespace wavetrace
