#pragma once

// Single-plane-wave scattering relation: exit records over transverse grids on
// the incoming plane, comparison against the flat relation, and the backward
// return map with injectivity/surjectivity diagnostics.

#include "wavetrace/core.hpp"
#include "wavetrace/errors.hpp"
#include "wavetrace/flow.hpp"
#include "wavetrace/io.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace wavetrace {

struct ScatteringRecord {
  Vec z0;            // start on the incoming plane x·ω = -1
  double y = 0.0;    // transverse coordinate of z0
  Vec w;             // exit point on x·ω = 1 (valid when exited)
  Vec v_plus;        // exit velocity γ̇(r₊)
  double lambda_est = std::numeric_limits<double>::quiet_NaN();
  double r_plus = std::numeric_limits<double>::quiet_NaN();
  double ham_drift = 0.0;
  bool exited = false;
  bool not_exited_by_cap = false;
  bool grazing = false;
  bool direction_mismatch = false;
};

struct CompareTol {
  double t_tol = 1e-6;
  double dir_tol = 1e-6;
};

/// @brief Verdict of one (ω, σ) comparison against the flat relation. The κ
/// diagnostics are NaN unless filled in by the pipeline runner.
struct RelationVerdict {
  SpaceVec omega;
  double sigma = 0.0;
  int n_records = 0;
  double fraction_exited = 0.0;
  double max_exit_t_err = 0.0;
  double max_dir_mismatch = 0.0;
  double max_lambda_jump = 0.0;  // neighbor smoothness of λ samples
  std::vector<double> lambda;    // per-node λ estimate (NaN where unavailable)
  bool pass = false;
  std::string first_violation;  // empty on PASS
  double kappa_injectivity_margin = std::numeric_limits<double>::quiet_NaN();
  double kappa_coverage = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline SpaceVec perp_of(const SpaceVec& omega) { return SpaceVec(-omega[1], omega[0]); }

inline double transverse_coord(const Vec& z, const SpaceVec& omega) {
  return z[1] * detail::perp_of(omega)[0] + z[2] * detail::perp_of(omega)[1];
}

}  // namespace detail

/// @brief Trace one ray from z0 on the incoming plane and classify its exit:
/// λ is read off the first component of γ̇(r₊) after confirming
/// proportionality to (1, ω) in the relative ∞-norm.
template <class M>
ScatteringRecord spw_record(const M& m, const SpaceVec& omega, const Vec& z0,
                            double r_cap = 100.0, const OdeTol& tol = {},
                            double dir_tol = 1e-6) {
  ScatteringRecord rec;
  rec.z0 = z0;
  rec.y = detail::transverse_coord(z0, omega);
  const RayRecord ray = geodesic_from_sigma_minus(m, omega, z0, r_cap, tol);
  rec.ham_drift = ray.ham_drift;
  rec.not_exited_by_cap = ray.not_exited_by_cap;
  rec.grazing = ray.grazing;
  if (!ray.r_plus) return rec;
  rec.exited = true;
  rec.r_plus = *ray.r_plus;
  rec.w = ray.exit.z;
  rec.v_plus = hamiltonian_gradients(m, ray.exit.z, ray.exit.zeta).dp_dzeta;
  const double lam = rec.v_plus[0];
  const Vec ideal(1.0, omega[0], omega[1]);
  const double dev = (rec.v_plus - lam * ideal).cwiseAbs().maxCoeff();
  if (lam > 0 && dev <= dir_tol * lam) {
    rec.lambda_est = lam;
  } else {
    rec.direction_mismatch = true;
  }
  return rec;
}

/// @brief One record per node of the transverse grid y ∈ [-Y, Y] on the
/// incoming plane at time σ; parallel, deterministic ordering.
template <class M>
std::vector<ScatteringRecord> spw_relation(const M& m, const SpaceVec& omega,
                                           double sigma, int n_nodes, double Y = 2.5,
                                           double r_cap = 100.0, const OdeTol& tol = {},
                                           double dir_tol = 1e-6) {
  if (n_nodes < 2) fail(ErrorCode::EmptyInput, "transverse grid needs >= 2 nodes");
  const SpaceVec perp = detail::perp_of(omega);
  std::vector<ScatteringRecord> out(n_nodes);
  std::exception_ptr first_error;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n_nodes; ++i) {
    try {
      const double y = -Y + 2.0 * Y * i / (n_nodes - 1);
      const Vec z0(sigma, -omega[0] + y * perp[0], -omega[1] + y * perp[1]);
      out[i] = spw_record(m, omega, z0, r_cap, tol, dir_tol);
    } catch (...) {
#pragma omp critical
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

/// @brief PASS iff every record exits at t = σ+2 within t_tol with velocity
/// λ(1,ω) within dir_tol; the first violation is named.
inline RelationVerdict compare_to_minkowski(const std::vector<ScatteringRecord>& records,
                                            const SpaceVec& omega, double sigma,
                                            const CompareTol& tol = {}) {
  if (records.empty()) fail(ErrorCode::EmptyInput, "no scattering records");
  RelationVerdict v;
  v.omega = omega;
  v.sigma = sigma;
  v.n_records = int(records.size());
  v.lambda.reserve(records.size());
  int exited = 0;
  auto violate = [&](const std::string& what) {
    if (v.first_violation.empty()) v.first_violation = what;
  };
  const Vec ideal(1.0, omega[0], omega[1]);
  for (const auto& r : records) {
    v.lambda.push_back(r.lambda_est);
    if (!r.exited) {
      violate("NotExitedByCap at y = " + fmt17(r.y));
      continue;
    }
    ++exited;
    const double t_err = std::abs(r.w[0] - (sigma + 2.0));
    v.max_exit_t_err = std::max(v.max_exit_t_err, t_err);
    if (t_err > tol.t_tol)
      violate("exit t - (sigma+2) = " + fmt17(r.w[0] - (sigma + 2.0)) +
              " at y = " + fmt17(r.y));
    if (r.direction_mismatch) {
      violate("DirectionMismatch at y = " + fmt17(r.y));
      continue;
    }
    const double dev =
        (r.v_plus - r.lambda_est * ideal).cwiseAbs().maxCoeff() / r.lambda_est;
    v.max_dir_mismatch = std::max(v.max_dir_mismatch, dev);
  }
  v.fraction_exited = double(exited) / double(records.size());
  for (std::size_t i = 0; i + 1 < v.lambda.size(); ++i)
    if (std::isfinite(v.lambda[i]) && std::isfinite(v.lambda[i + 1]))
      v.max_lambda_jump =
          std::max(v.max_lambda_jump, std::abs(v.lambda[i + 1] - v.lambda[i]));
  v.pass = v.first_violation.empty();
  return v;
}

// ---------------------------------------------------------------------------
// Backward return map
// ---------------------------------------------------------------------------

struct KappaRecord {
  Vec w;         // sample on the outgoing plane x·ω = 1
  Vec z_return;  // first return on x·ω = -1
  double r;      // backward parameter span (positive)
};

struct KappaResult {
  SpaceVec omega;
  std::vector<KappaRecord> records;
  double injectivity_margin = std::numeric_limits<double>::infinity();
};

/// @brief Integrate backward from (w, ζ = (1,-ω)) to the incoming plane.
/// Margin = min pairwise return separation / max domain spacing.
template <class M>
KappaResult kappa_map(const M& m, const SpaceVec& omega, const std::vector<Vec>& samples,
                      double r_cap = 100.0, const OdeTol& tol = {}) {
  if (samples.empty()) fail(ErrorCode::EmptyInput, "no return-map samples");
  for (const Vec& w : samples) {
    const double off = w[1] * omega[0] + w[2] * omega[1] - 1.0;
    if (std::abs(off) > 1e-12)
      fail(ErrorCode::BadInitialPoint, "x·ω - 1 = " + fmt17(off) +
                                           " (return-map sample must lie on the "
                                           "outgoing plane)");
  }
  KappaResult out;
  out.omega = omega;
  out.records.resize(samples.size());
  std::exception_ptr first_error;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < int(samples.size()); ++i) {
    try {
      TraceOptions opt;
      opt.r_cap = r_cap;
      opt.tol = tol;
      opt.direction = -1.0;
      opt.plane_c = -1.0;
      const RayRecord ray =
          trace_ray(m, samples[i], Covec(1.0, -omega[0], -omega[1]), omega, opt);
      if (!ray.r_plus)
        fail(ErrorCode::NoReturn,
             "backward ray from t = " + fmt17(samples[i][0]) + ", y = " +
                 fmt17(detail::transverse_coord(samples[i], omega)) +
                 " missed the incoming plane within the cap");
      out.records[i] = {samples[i], ray.exit.z, std::abs(*ray.r_plus)};
    } catch (...) {
#pragma omp critical
      if (!first_error) first_error = std::current_exception();
    }
  }
  if (first_error) std::rethrow_exception(first_error);

  double max_spacing = 0.0;
  for (std::size_t i = 0; i + 1 < samples.size(); ++i)
    max_spacing = std::max(max_spacing, (samples[i + 1] - samples[i]).norm());
  double min_sep = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < out.records.size(); ++i)
    for (std::size_t j = i + 1; j < out.records.size(); ++j)
      min_sep = std::min(min_sep,
                         (out.records[i].z_return - out.records[j].z_return).norm());
  if (max_spacing > 0 && std::isfinite(min_sep))
    out.injectivity_margin = min_sep / max_spacing;
  return out;
}

struct CoverageReport {
  double fraction = 0.0;
  bool suspect = false;
};

/// @brief Bin the transverse coordinates of the return points over [-Y, Y];
/// sparse coverage marks the surjectivity evidence SUSPECT.
inline CoverageReport kappa_coverage(const KappaResult& k, double Y, int bins,
                                     double threshold = 0.9) {
  if (bins < 1 || k.records.empty()) fail(ErrorCode::EmptyInput, "empty coverage bins");
  std::vector<int> hit(bins, 0);
  for (const auto& rec : k.records) {
    const double y = detail::transverse_coord(rec.z_return, k.omega);
    if (y < -Y || y > Y) continue;  // off-window returns carry no coverage
    const int b = std::min(bins - 1, int(std::floor((y + Y) / (2.0 * Y) * bins)));
    hit[b] = 1;
  }
  CoverageReport rep;
  int n = 0;
  for (int h : hit) n += h;
  rep.fraction = double(n) / bins;
  rep.suspect = rep.fraction < threshold;
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline std::string record_flags(const ScatteringRecord& r) {
  std::string s;
  auto add = [&](const char* f) {
    if (!s.empty()) s += ';';
    s += f;
  };
  if (r.not_exited_by_cap) add("NotExitedByCap");
  if (r.grazing) add("GrazingExit");
  if (r.direction_mismatch) add("DirectionMismatch");
  return s;
}

inline void records_to_csv(const std::vector<ScatteringRecord>& records,
                           const SpaceVec& omega, const std::filesystem::path& path) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CsvWriter csv(path, {"sigma", "y", "exit_t", "exit_y", "lambda", "r_plus", "flags"});
  for (const auto& r : records) {
    const double exit_t = r.exited ? r.w[0] : nan;
    const double exit_y = r.exited ? detail::transverse_coord(r.w, omega) : nan;
    csv.row_mixed({fmt17(r.z0[0]), fmt17(r.y), fmt17(exit_t), fmt17(exit_y),
                   fmt17(r.lambda_est), fmt17(r.r_plus), record_flags(r)});
  }
}

inline json verdict_to_json(const RelationVerdict& v) {
  json j;
  j["omega"] = {json_num(v.omega[0]), json_num(v.omega[1])};
  j["sigma"] = json_num(v.sigma);
  j["n_records"] = v.n_records;
  j["fraction_exited"] = json_num(v.fraction_exited);
  j["max_exit_t_err"] = json_num(v.max_exit_t_err);
  j["max_dir_mismatch"] = json_num(v.max_dir_mismatch);
  j["max_lambda_jump"] = json_num(v.max_lambda_jump);
  j["pass"] = v.pass;
  j["first_violation"] = v.first_violation;
  json lam = json::array();
  for (double l : v.lambda) lam.push_back(json_num(l));
  j["lambda"] = lam;
  if (std::isfinite(v.kappa_injectivity_margin))
    j["kappa_injectivity_margin"] = json_num(v.kappa_injectivity_margin);
  if (std::isfinite(v.kappa_coverage))
    j["kappa_coverage"] = json_num(v.kappa_coverage);
  return j;
}

}  // namespace wavetrace
