#pragma once

// Finite-difference simulation of the wave equation for the model metrics
// with smoothed plane-wave data. The scheme is leapfrog in time and centered
// second order in space on the nondivergence expansion
//   g^{00} u_tt + 2 g^{0j} u_tj + g^{jk} u_jk + b^mu d_mu u = 0,
// kept explicit by backward-differencing the mixed t-x derivatives with the
// previous time level and dividing by the g^{00} coefficient. Produces probe
// traces on the unit circle |x| = 1 and compares forward data between models.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "wavetrace/eikonal.hpp"
#include "wavetrace/grid.hpp"
#include "wavetrace/io.hpp"
#include "wavetrace/models.hpp"

namespace wavetrace {

/// @brief C2 smoothed Heaviside: 0 for v <= -eps, 1 for v >= eps, the unique
/// degree-5 polynomial blend between.
inline double smooth_heaviside(double v, double eps) {
  const double u = std::clamp((v + eps) / (2.0 * eps), 0.0, 1.0);
  return u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
}

/// @brief Derivative of smooth_heaviside in its first argument.
inline double smooth_heaviside_prime(double v, double eps) {
  const double u = (v + eps) / (2.0 * eps);
  if (u <= 0.0 || u >= 1.0) return 0.0;
  return 30.0 * u * u * (1.0 - u) * (1.0 - u) / (2.0 * eps);
}

struct SimConfig {
  SpaceVec omega = SpaceVec(1.0, 0.0);
  double s = 0.0;           // front time delay: data H_eps(t - x.omega - s)
  double half_width = 0.0;  // box half-width L; 0 derives 1 + window + 0.5
  double h = 0.025;         // spatial step
  double dt = 0.0;          // time step; 0 derives cfl*h / char speed bound
  double cfl = 0.3;
  double eps = 0.1;  // front smoothing width
  double t_start = -1.25;
  double t_end = 1.75;
  int n_probes = 16;      // equally spaced on the unit circle
  int sample_every = 1;   // probe sampling stride (sampling step = dt*k)
  int snapshot_every = 0; // 0 = keep only the final time level
};

/// @brief Per-probe time series on |x| = 1 with first front arrivals.
struct BoundaryTrace {
  double sample_step = 0.0;
  std::vector<double> times;
  std::vector<SpaceVec> probes;
  std::vector<std::vector<double>> u;  // [probe][sample]
  std::vector<double> arrival;         // first 1/2 crossing; NaN if never

  std::size_t n_probes() const { return probes.size(); }
};

struct SimResult {
  SimConfig cfg;  // with derived half_width / dt filled in
  nlohmann::json model;
  std::string model_hash;
  double char_speed = 1.0;  // measured coordinate speed bound behind the CFL
  int steps = 0;
  int n = 0;  // nodes per axis; node (i,j) sits at (-L + i h, -L + j h)
  BoundaryTrace trace;
  Eigen::ArrayXXd u_final;       // at t_end
  Eigen::ArrayXXd u_penultimate; // at t_end - dt (for energy forms)
  std::vector<std::pair<double, Eigen::ArrayXXd>> snapshots;
  double peak = 0.0;  // infinity-norm watermark over the run
};

/// @brief Called after every completed step with the two newest time levels.
using StepObserver =
    std::function<void(int step, double t, const Eigen::ArrayXXd& u_old,
                       const Eigen::ArrayXXd& u_new)>;

namespace detail {

/// @brief Coordinate characteristic speed bound for the CFL guard: per axis
/// (|g^{0k}| + sqrt(g^{0k}^2 - g^{00} g^{kk})) / |g^{00}|, maximized over the
/// non-flat nodes and times sampled across the window, floored at the
/// exterior speed 1.
template <class M>
double char_speed_bound(const M& m, const SimConfig& cfg, double half_width) {
  const double rad = m.support_radius();
  if (rad <= 0.0) return 1.0;
  double t_lo = cfg.t_start, t_hi = cfg.t_end;
  const double t_sup = m.support_time();
  if (std::isfinite(t_sup)) {
    t_lo = std::max(t_lo, -t_sup);
    t_hi = std::min(t_hi, t_sup);
  }
  if (t_lo > t_hi) return 1.0;  // metric is flat over the whole window
  const int n = int(std::lround(2.0 * half_width / cfg.h)) + 1;
  const int n_times = 12;
  double cmax = 1.0;
#pragma omp parallel for reduction(max : cmax) schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const double x1 = -half_width + i * cfg.h;
    if (std::abs(x1) >= rad) continue;
    for (int j = 0; j < n; ++j) {
      const double x2 = -half_width + j * cfg.h;
      if (std::hypot(x1, x2) >= rad) continue;
      for (int q = 0; q < n_times; ++q) {
        const double t =
            (n_times == 1) ? t_lo : t_lo + q * (t_hi - t_lo) / (n_times - 1);
        const Mat G = inverse_metric_at(m, Vec(t, x1, x2));
        for (int k = 1; k <= 2; ++k) {
          const double disc =
              std::sqrt(std::max(G(0, k) * G(0, k) - G(0, 0) * G(k, k), 0.0));
          cmax = std::max(cmax, (std::abs(G(0, k)) + disc) / std::abs(G(0, 0)));
        }
      }
    }
  }
  return cmax;
}

}  // namespace detail

/// @brief Integrate the plane-wave Cauchy problem over the window and record
/// probe traces. Initial data is the smoothed plane wave at the two leading
/// time levels (the front is still in the flat exterior, where that is the
/// exact solution); Dirichlet data on the box faces comes from the same
/// exterior plane wave, valid because the box outruns interior scattering.
template <class M>
SimResult simulate_plane_wave(const M& m, SimConfig cfg,
                              const StepObserver& observer = {}) {
  // --- validate and derive the configuration ---
  const double window = cfg.t_end - cfg.t_start;
  if (!(window > 0.0))
    fail(ErrorCode::ConfigError, "t_end must exceed t_start");
  if (cfg.h <= 0.0) fail(ErrorCode::ConfigError, "h must be positive");
  if (cfg.eps < 4.0 * cfg.h)
    fail(ErrorCode::ConfigError,
         "eps must be at least 4h for the front to be resolved (eps = " +
             fmt17(cfg.eps) + ", h = " + fmt17(cfg.h) + ")");
  if (cfg.t_start > cfg.s - 1.0 - 2.0 * cfg.eps)
    fail(ErrorCode::ConfigError,
         "t_start must be at most s - 1 - 2 eps so the front starts outside "
         "the unit ball (t_start = " +
             fmt17(cfg.t_start) + ", bound = " +
             fmt17(cfg.s - 1.0 - 2.0 * cfg.eps) + ")");
  const double l_needed = 1.0 + window + 0.5;
  if (cfg.half_width == 0.0) cfg.half_width = l_needed;
  if (cfg.half_width < l_needed - 1e-12)
    fail(ErrorCode::ConfigError,
         "half_width must be at least 1 + (t_end - t_start) + 0.5 = " +
             fmt17(l_needed) + " to keep the box faces causally clean");
  if (cfg.n_probes < 1) fail(ErrorCode::ConfigError, "n_probes must be >= 1");
  if (cfg.sample_every < 1)
    fail(ErrorCode::ConfigError, "sample_every must be >= 1");

  const double L = cfg.half_width;
  const double cmax = detail::char_speed_bound(m, cfg, L);
  if (cfg.dt == 0.0) cfg.dt = cfg.cfl * cfg.h / cmax;
  if (cfg.dt * cmax > cfg.cfl * cfg.h * (1.0 + 1e-9))
    fail(ErrorCode::CFLViolation,
         "dt = " + fmt17(cfg.dt) + " exceeds cfl*h/char_speed = " +
             fmt17(cfg.cfl * cfg.h / cmax));
  const int steps = int(std::ceil(window / cfg.dt - 1e-12));
  const double dt = window / steps;
  cfg.dt = dt;

  const int n = int(std::lround(2.0 * L / cfg.h)) + 1;
  const double h = cfg.h;
  const double sw = cfg.s;

  SimResult out;
  out.cfg = cfg;
  out.model = m.descriptor();
  out.model_hash = hex64(fnv1a(out.model.dump()));
  out.char_speed = cmax;
  out.steps = steps;
  out.n = n;

  // --- node coordinates and exterior-flat classification ---
  const double rad = m.support_radius();
  Eigen::ArrayXd xs(n);
  for (int i = 0; i < n; ++i) xs[i] = -L + i * h;
  std::vector<char> flat(std::size_t(n) * n, 1);
  if (rad > 0.0)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (std::hypot(xs[i], xs[j]) < rad) flat[std::size_t(i) * n + j] = 0;

  auto plane = [&](double t, double x1, double x2) {
    return smooth_heaviside(t - (x1 * cfg.omega[0] + x2 * cfg.omega[1]) - sw,
                            cfg.eps);
  };

  Eigen::ArrayXXd u_prev(n, n), u_cur(n, n), u_new(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      u_prev(i, j) = plane(cfg.t_start, xs[i], xs[j]);
      u_cur(i, j) = plane(cfg.t_start + dt, xs[i], xs[j]);
    }
  out.peak = std::max(u_prev.abs().maxCoeff(), u_cur.abs().maxCoeff());
  const double growth_cap = 10.0 * std::max(1.0, out.peak);

  // --- probes on the unit circle, bilinear sampling ---
  BoundaryTrace& tr = out.trace;
  tr.sample_step = dt * cfg.sample_every;
  tr.probes.resize(cfg.n_probes);
  tr.u.assign(cfg.n_probes, {});
  for (int p = 0; p < cfg.n_probes; ++p) {
    const double a = 2.0 * M_PI * p / cfg.n_probes;
    tr.probes[p] = SpaceVec(std::cos(a), std::sin(a));
  }
  auto sample_probes = [&](const Eigen::ArrayXXd& u, double t) {
    tr.times.push_back(t);
    for (int p = 0; p < cfg.n_probes; ++p) {
      const double fx = (tr.probes[p][0] + L) / h;
      const double fy = (tr.probes[p][1] + L) / h;
      const int ix = std::clamp(int(fx), 0, n - 2);
      const int iy = std::clamp(int(fy), 0, n - 2);
      const double ax = fx - ix, ay = fy - iy;
      tr.u[p].push_back(u(ix, iy) * (1 - ax) * (1 - ay) +
                        u(ix + 1, iy) * ax * (1 - ay) +
                        u(ix, iy + 1) * (1 - ax) * ay +
                        u(ix + 1, iy + 1) * ax * ay);
    }
  };
  sample_probes(u_cur, cfg.t_start + dt);

  // --- time stepping ---
  const double dt2 = dt * dt, h2 = h * h;
  for (int k = 1; k <= steps; ++k) {
    const double tn = cfg.t_start + k * dt;  // time level of u_cur
    const double tb = tn + dt;               // time level being produced
    double step_peak = 0.0;
#pragma omp parallel for reduction(max : step_peak) schedule(dynamic, 8)
    for (int i = 1; i < n - 1; ++i) {
      for (int j = 1; j < n - 1; ++j) {
        const double uc = u_cur(i, j);
        double unew;
        if (flat[std::size_t(i) * n + j]) {
          const double lap = (u_cur(i + 1, j) + u_cur(i - 1, j) +
                              u_cur(i, j + 1) + u_cur(i, j - 1) - 4.0 * uc) /
                             h2;
          unew = 2.0 * uc - u_prev(i, j) + dt2 * lap;
        } else {
          const WaveCoeffs w = wave_coeffs(m, Vec(tn, xs[i], xs[j]));
          const Mat& G = w.ginv;
          const double uxx =
              (u_cur(i + 1, j) - 2.0 * uc + u_cur(i - 1, j)) / h2;
          const double uyy =
              (u_cur(i, j + 1) - 2.0 * uc + u_cur(i, j - 1)) / h2;
          const double uxy = (u_cur(i + 1, j + 1) - u_cur(i + 1, j - 1) -
                              u_cur(i - 1, j + 1) + u_cur(i - 1, j - 1)) /
                             (4.0 * h2);
          const double ux = (u_cur(i + 1, j) - u_cur(i - 1, j)) / (2.0 * h);
          const double uy = (u_cur(i, j + 1) - u_cur(i, j - 1)) / (2.0 * h);
          const double uxp =
              (u_prev(i + 1, j) - u_prev(i - 1, j)) / (2.0 * h);
          const double uyp =
              (u_prev(i, j + 1) - u_prev(i, j - 1)) / (2.0 * h);
          const double ut = (uc - u_prev(i, j)) / dt;
          const double utx = (ux - uxp) / dt;  // previous-level backward
          const double uty = (uy - uyp) / dt;  // difference keeps it explicit
          const double spat = G(1, 1) * uxx + 2.0 * G(1, 2) * uxy +
                              G(2, 2) * uyy + 2.0 * G(0, 1) * utx +
                              2.0 * G(0, 2) * uty + w.b[0] * ut +
                              w.b[1] * ux + w.b[2] * uy;
          unew = 2.0 * uc - u_prev(i, j) - dt2 * spat / G(0, 0);
        }
        u_new(i, j) = unew;
        step_peak = std::max(step_peak, std::abs(unew));
      }
    }
    for (int i = 0; i < n; ++i) {
      u_new(i, 0) = plane(tb, xs[i], xs[0]);
      u_new(i, n - 1) = plane(tb, xs[i], xs[n - 1]);
      u_new(0, i) = plane(tb, xs[0], xs[i]);
      u_new(n - 1, i) = plane(tb, xs[n - 1], xs[i]);
    }
    out.peak = std::max(out.peak, step_peak);
    if (step_peak > growth_cap)
      fail(ErrorCode::UnstableGrowth,
           "infinity norm " + fmt17(step_peak) + " at t = " + fmt17(tb) +
               " exceeds 10x the initial bound");
    u_prev.swap(u_cur);
    u_cur.swap(u_new);
    if (k % cfg.sample_every == 0) sample_probes(u_cur, tb);
    if (cfg.snapshot_every > 0 && k % cfg.snapshot_every == 0)
      out.snapshots.emplace_back(tb, u_cur);
    if (observer) observer(k, tb, u_prev, u_cur);
  }

  // --- first front arrival per probe (linear interpolation in time) ---
  tr.arrival.assign(cfg.n_probes, std::numeric_limits<double>::quiet_NaN());
  for (int p = 0; p < cfg.n_probes; ++p) {
    const auto& v = tr.u[p];
    for (std::size_t q = 1; q < v.size(); ++q) {
      if (v[q] >= 0.5 && v[q - 1] < 0.5) {
        tr.arrival[p] = tr.times[q - 1] + (0.5 - v[q - 1]) / (v[q] - v[q - 1]) *
                                              (tr.times[q] - tr.times[q - 1]);
        break;
      }
    }
  }

  out.u_final = std::move(u_cur);
  out.u_penultimate = std::move(u_prev);
  return out;
}

// ---------------------------------------------------------------------------
// Forward data comparison
// ---------------------------------------------------------------------------

/// @brief Max |trace_A - trace_B| over probes and times, per front delay s
/// and overall, with an EQUAL verdict against data_tol.
struct ForwardComparison {
  std::vector<double> s_values;
  std::vector<double> max_per_s;
  double max_discrepancy = 0.0;
  double data_tol = 0.0;
  bool equal = false;
};

/// @brief Run both models on the identical grid, probe set, and time step
/// (the shared step is derived from the larger of the two characteristic
/// speed bounds) and compare traces.
template <class MA, class MB>
ForwardComparison forward_data(const MA& a, const MB& b, const SpaceVec& omega,
                               const std::vector<double>& s_list,
                               SimConfig cfg, double data_tol) {
  if (s_list.empty()) fail(ErrorCode::EmptyInput, "s_list is empty");
  cfg.omega = omega;
  if (cfg.half_width == 0.0)
    cfg.half_width = 1.0 + (cfg.t_end - cfg.t_start) + 0.5;
  if (cfg.dt == 0.0) {
    const double ca = detail::char_speed_bound(a, cfg, cfg.half_width);
    const double cb = detail::char_speed_bound(b, cfg, cfg.half_width);
    cfg.dt = cfg.cfl * cfg.h / std::max(ca, cb);
  }
  ForwardComparison out;
  out.data_tol = data_tol;
  for (double s : s_list) {
    SimConfig c = cfg;
    c.s = s;
    const SimResult ra = simulate_plane_wave(a, c);
    const SimResult rb = simulate_plane_wave(b, c);
    double dev = 0.0;
    for (std::size_t p = 0; p < ra.trace.n_probes(); ++p)
      for (std::size_t q = 0; q < ra.trace.u[p].size(); ++q)
        dev = std::max(dev, std::abs(ra.trace.u[p][q] - rb.trace.u[p][q]));
    out.s_values.push_back(s);
    out.max_per_s.push_back(dev);
    out.max_discrepancy = std::max(out.max_discrepancy, dev);
  }
  out.equal = out.max_discrepancy < data_tol;
  return out;
}

// ---------------------------------------------------------------------------
// Front arrival against the eikonal prediction
// ---------------------------------------------------------------------------

struct ArrivalRow {
  int probe = 0;
  double measured = 0.0;
  double predicted = 0.0;
  double diff = 0.0;
};

/// @brief Compare measured front arrivals with the time where the eikonal
/// phase crosses the front delay s on each probe worldline, found by a scan
/// of the field's time grid with linear interpolation.
inline std::vector<ArrivalRow> front_arrival_check(const SimResult& sim,
                                                   const EikonalField& f) {
  GridField phi(f.grid);
  phi.v = f.phi;
  const double s = sim.cfg.s;
  std::vector<ArrivalRow> rows;
  for (std::size_t p = 0; p < sim.trace.n_probes(); ++p) {
    ArrivalRow row;
    row.probe = int(p);
    row.measured = sim.trace.arrival[p];
    if (!std::isfinite(row.measured))
      fail(ErrorCode::NoCrossing,
           "probe " + std::to_string(p) + " never reaches 1/2");
    const SpaceVec& x = sim.trace.probes[p];
    double prev_t = f.grid.t_min;
    double prev_v = phi.interp(Vec(prev_t, x[0], x[1])) - s;
    bool found = false;
    for (int i = 1; i < f.grid.nt; ++i) {
      const double t = f.grid.t_min + i * f.grid.dt();
      const double v = phi.interp(Vec(t, x[0], x[1])) - s;
      if (prev_v < 0.0 && v >= 0.0) {
        row.predicted = prev_t + prev_v / (prev_v - v) * (t - prev_t);
        found = true;
        break;
      }
      prev_t = t;
      prev_v = v;
    }
    if (!found)
      fail(ErrorCode::NoCrossing,
           "phase never crosses s on the worldline of probe " +
               std::to_string(p));
    row.diff = row.measured - row.predicted;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline json trace_header_json(const SimResult& r) {
  json h;
  h["kind"] = "boundary_trace";
  h["omega"] = {json_num(r.cfg.omega[0]), json_num(r.cfg.omega[1])};
  h["s"] = json_num(r.cfg.s);
  h["h"] = json_num(r.cfg.h);
  h["dt"] = json_num(r.cfg.dt);
  h["cfl"] = json_num(r.cfg.cfl);
  h["eps"] = json_num(r.cfg.eps);
  h["half_width"] = json_num(r.cfg.half_width);
  h["t_start"] = json_num(r.cfg.t_start);
  h["t_end"] = json_num(r.cfg.t_end);
  h["n_probes"] = r.cfg.n_probes;
  h["sample_step"] = json_num(r.trace.sample_step);
  h["char_speed"] = json_num(r.char_speed);
  h["steps"] = r.steps;
  h["peak"] = json_num(r.peak);
  h["model"] = r.model;
  h["model_hash"] = r.model_hash;
  json arr = json::array();
  for (double a : r.trace.arrival) arr.push_back(json_num(a));
  h["arrival"] = arr;
  return h;
}

/// @brief stem.json header plus stem.csv rows (t, probe_id, u).
inline void write_trace(const SimResult& r, const std::filesystem::path& dir,
                        const std::string& stem) {
  std::filesystem::create_directories(dir);
  write_json(dir / (stem + ".json"), trace_header_json(r));
  CsvWriter table(dir / (stem + ".csv"), {"t", "probe_id", "u"});
  for (std::size_t q = 0; q < r.trace.times.size(); ++q)
    for (std::size_t p = 0; p < r.trace.n_probes(); ++p)
      table.row_mixed({fmt17(r.trace.times[q]), std::to_string(p),
                       fmt17(r.trace.u[p][q])});
}

/// @brief One CSV grid (x1, x2, u) per stored snapshot, suffixed by step.
inline void write_snapshots(const SimResult& r,
                            const std::filesystem::path& dir,
                            const std::string& stem) {
  std::filesystem::create_directories(dir);
  const double L = r.cfg.half_width;
  for (std::size_t q = 0; q < r.snapshots.size(); ++q) {
    const auto& [t, u] = r.snapshots[q];
    CsvWriter table(dir / (stem + "_" + std::to_string(q) + ".csv"),
                    {"t", "x1", "x2", "u"});
    for (int i = 0; i < r.n; ++i)
      for (int j = 0; j < r.n; ++j)
        table.row({t, -L + i * r.cfg.h, -L + j * r.cfg.h, u(i, j)});
  }
}

}  // namespace wavetrace
