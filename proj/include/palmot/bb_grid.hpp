#pragma once

// Quadratic Benamou-Brenier on a periodic staggered space-time grid, solved
// with primal-dual (Chambolle-Pock) iterations. The continuity-equation
// projection is spectral in space and tridiagonal in time.

#include <fftw3.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "palmot/core.hpp"
#include "palmot/torus.hpp"
#include "palmot/transport.hpp"

namespace palmot {

struct StaggeredGrid {
  TorusGeometry geometry;
  int m = 32;    // cells per axis
  int n_t = 16;  // time steps

  void validate() const {
    require(geometry.dimension == 1 || geometry.dimension == 2, "grid solver supports dimension 1 or 2");
    require(m >= 8, "grid resolution m must be >= 8");
    require(n_t >= 8, "time steps n_t must be >= 8");
  }
  std::size_t cells() const { return geometry.dimension == 1 ? m : static_cast<std::size_t>(m) * m; }
  double h() const { return geometry.period / m; }
  double dt() const { return 1.0 / n_t; }
  double cell_volume() const { return std::pow(h(), geometry.dimension); }
};

struct BBParams {
  double tol = 1e-6;
  int max_iters = 200000;
  double sigma = 0.0;  // initial dual step; 0 means 1
  double tau = 0.0;    // initial primal step; 0 means 0.99 / sigma
  double floor = 1e-8;  // relative to the mean
  int patience = 10;
  int trace_every = 1;
};

struct TraceEntry {
  int iteration = 0;
  double residual = 0.0;
  double objective = 0.0;
};

/// rho[k] for k = 0..n_t at cell centers; momentum[a][k] for k = 0..n_t-1 at
/// faces i + e_a / 2 between the two time levels.
struct SpaceTimeSolution {
  StaggeredGrid grid;
  std::vector<Vec> rho;
  std::vector<std::vector<Vec>> momentum;
  double objective = 0.0;  // int int |m|^2 / rho
  double cost = 0.0;       // objective per unit cell volume, comparable with c_2
  std::vector<TraceEntry> trace;
  int iterations = 0;
  bool converged = false;
  double wall_seconds = 0.0;
};

class GridConvergenceError : public ConvergenceError {
 public:
  GridConvergenceError(const std::string& what, double residual, std::vector<TraceEntry> trace)
      : ConvergenceError(what, residual), trace_(std::move(trace)) {}
  const std::vector<TraceEntry>& trace() const noexcept { return trace_; }

 private:
  std::vector<TraceEntry> trace_;
};

namespace detail {

/// Cell index shifted by `step` along `axis` with periodic wrap.
inline std::size_t neighbor(std::size_t i, int axis, int step, int m, int d) {
  if (d == 1) return static_cast<std::size_t>((static_cast<int>(i) + step + m) % m);
  const int r = static_cast<int>(i) / m, c = static_cast<int>(i) % m;
  if (axis == 0) return static_cast<std::size_t>(((r + step + m) % m) * m + c);
  return static_cast<std::size_t>(r * m + (c + step + m) % m);
}

/// Projection onto {(a, b) : a + |b|^2 / 2 <= 0}.
inline void project_parabola(double& a, double* b, int d) {
  double b2 = 0.0;
  for (int k = 0; k < d; ++k) b2 += b[k] * b[k];
  if (a + 0.5 * b2 <= 0.0) return;
  // s = 1 + lambda solves s^3 - (a+1) s^2 - |b|^2/2 = 0; Newton from the right.
  const double c = a + 1.0;
  double s = std::max(c, 0.0) + std::cbrt(0.5 * b2) + 1.0;
  for (int it = 0; it < 100; ++it) {
    const double f = s * s * s - c * s * s - 0.5 * b2;
    const double fp = 3.0 * s * s - 2.0 * c * s;
    const double next = s - f / fp;
    if (!(next < s)) break;
    s = next;
    if (f <= 1e-16 * std::max(1.0, s * s * s)) break;
  }
  a -= s - 1.0;
  for (int k = 0; k < d; ++k) b[k] /= s;
}

/// Euclidean projection onto the discrete continuity equation with fixed endpoints.
class CEProjector {
 public:
  explicit CEProjector(const StaggeredGrid& g) : g_(g), n_(g.cells()) {
    const int d = g.geometry.dimension;
    buf_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n_ * g.n_t));
    int dims[2] = {g.m, g.m};
    fwd_ = fftw_plan_many_dft(d, dims, g.n_t, buf_, nullptr, 1, static_cast<int>(n_), buf_, nullptr, 1,
                              static_cast<int>(n_), FFTW_FORWARD, FFTW_ESTIMATE);
    bwd_ = fftw_plan_many_dft(d, dims, g.n_t, buf_, nullptr, 1, static_cast<int>(n_), buf_, nullptr, 1,
                              static_cast<int>(n_), FFTW_BACKWARD, FFTW_ESTIMATE);
    const double h = g.h();
    mu_.assign(n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      const int j0 = d == 1 ? static_cast<int>(i) : static_cast<int>(i) / g.m;
      double mu = 4.0 / (h * h) * std::pow(std::sin(std::numbers::pi * j0 / g.m), 2);
      if (d == 2) mu += 4.0 / (h * h) * std::pow(std::sin(std::numbers::pi * (static_cast<int>(i) % g.m) / g.m), 2);
      mu_[i] = mu;
    }
  }
  ~CEProjector() {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
    fftw_free(buf_);
  }
  CEProjector(const CEProjector&) = delete;
  CEProjector& operator=(const CEProjector&) = delete;

  /// Divergence residual r_k = (rho_{k+1} - rho_k)/dt + div m_k.
  std::vector<Vec> residual(const std::vector<Vec>& rho, const std::vector<std::vector<Vec>>& mom) const {
    const int d = g_.geometry.dimension;
    const double dt = g_.dt(), h = g_.h();
    std::vector<Vec> r(g_.n_t, Vec(n_));
    for (int k = 0; k < g_.n_t; ++k)
      for (std::size_t i = 0; i < n_; ++i) {
        double v = (rho[k + 1][i] - rho[k][i]) / dt;
        for (int a = 0; a < d; ++a) v += (mom[a][k][i] - mom[a][k][neighbor(i, a, -1, g_.m, d)]) / h;
        r[k][i] = v;
      }
    return r;
  }

  void project(std::vector<Vec>& rho, std::vector<std::vector<Vec>>& mom) {
    const int d = g_.geometry.dimension;
    const int nt = g_.n_t;
    const double dt = g_.dt(), h = g_.h();
    const auto r = residual(rho, mom);
    for (int k = 0; k < nt; ++k)
      for (std::size_t i = 0; i < n_; ++i) {
        buf_[k * n_ + i][0] = r[k][i];
        buf_[k * n_ + i][1] = 0.0;
      }
    fftw_execute(fwd_);
    // Per mode: (T / dt^2 + mu) x = r with T the Neumann second difference in time.
    const double inv = 1.0 / (dt * dt);
    std::vector<std::complex<double>> rhs(nt), x(nt);
    Vec cprime(nt);
    for (std::size_t j = 0; j < n_; ++j) {
      for (int k = 0; k < nt; ++k) rhs[k] = {buf_[k * n_ + j][0], buf_[k * n_ + j][1]};
      if (mu_[j] == 0.0) {
        // Singular mode: any solution works since constants lie in the kernel of the adjoint.
        std::complex<double> diff = -dt * dt * rhs[0];
        x[0] = 0.0;
        for (int k = 1; k < nt; ++k) {
          x[k] = x[k - 1] + diff;
          diff -= dt * dt * rhs[k];
        }
      } else {
        auto diag = [&](int k) { return (k == 0 || k == nt - 1 ? inv : 2.0 * inv) + mu_[j]; };
        const double off = -inv;
        if (nt == 1) {
          x[0] = rhs[0] / mu_[j];
        } else {
          cprime[0] = off / diag(0);
          x[0] = rhs[0] / diag(0);
          for (int k = 1; k < nt; ++k) {
            const double den = diag(k) - off * cprime[k - 1];
            cprime[k] = off / den;
            x[k] = (rhs[k] - off * x[k - 1]) / den;
          }
          for (int k = nt - 2; k >= 0; --k) x[k] -= cprime[k] * x[k + 1];
        }
      }
      for (int k = 0; k < nt; ++k) {
        buf_[k * n_ + j][0] = x[k].real();
        buf_[k * n_ + j][1] = x[k].imag();
      }
    }
    fftw_execute(bwd_);
    std::vector<Vec> lam(nt, Vec(n_));
    const double scale_back = 1.0 / static_cast<double>(n_);
    for (int k = 0; k < nt; ++k)
      for (std::size_t i = 0; i < n_; ++i) lam[k][i] = buf_[k * n_ + i][0] * scale_back;
    // U -= A^T lambda.
    for (int k = 1; k < nt; ++k)
      for (std::size_t i = 0; i < n_; ++i) rho[k][i] -= (lam[k - 1][i] - lam[k][i]) / dt;
    for (int a = 0; a < d; ++a)
      for (int k = 0; k < nt; ++k)
        for (std::size_t i = 0; i < n_; ++i)
          mom[a][k][i] -= (lam[k][i] - lam[k][neighbor(i, a, 1, g_.m, d)]) / h;
  }

 private:
  StaggeredGrid g_;
  std::size_t n_;
  fftw_complex* buf_ = nullptr;
  fftw_plan fwd_ = nullptr;
  fftw_plan bwd_ = nullptr;
  Vec mu_;
};

/// Floors a density at floor * mean and restores its total mass.
inline Vec floored_values(const PeriodicDensity& rho, double floor) {
  Vec v = rho.values();
  const double mean = rho.mean();
  bool changed = false;
  for (auto& x : v)
    if (x < floor * mean) {
      x = floor * mean;
      changed = true;
    }
  if (changed) {
    const double s = mean / (sum(v) / static_cast<double>(v.size()));
    for (auto& x : v) x *= s;
  }
  return v;
}

/// Sum over midpoint cells of |b|^2 / a, where a is the time average of rho and
/// |b|^2 averages the squared momenta on the two faces of the cell along each axis.
inline double grid_energy(const StaggeredGrid& g, const std::vector<Vec>& rho,
                          const std::vector<std::vector<Vec>>& mom) {
  const int d = g.geometry.dimension;
  const std::size_t n = g.cells();
  double e = 0.0;
  for (int k = 0; k < g.n_t; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      const double a = 0.5 * (rho[k][i] + rho[k + 1][i]);
      double b2 = 0.0;
      for (int ax = 0; ax < d; ++ax) {
        const double lo = mom[ax][k][neighbor(i, ax, -1, g.m, d)], hi = mom[ax][k][i];
        b2 += 0.5 * (lo * lo + hi * hi);
      }
      if (b2 == 0.0) continue;
      e += a > 0.0 ? b2 / a : std::numeric_limits<double>::infinity();
    }
  return e * g.dt() * g.cell_volume();
}

}  // namespace detail

inline void validate_densities(const PeriodicDensity& rho0, const PeriodicDensity& rho1, const StaggeredGrid& grid) {
  grid.validate();
  require_same_geometry(rho0.geometry(), rho1.geometry());
  require_same_geometry(rho0.geometry(), grid.geometry);
  require(rho0.resolution() == grid.m && rho1.resolution() == grid.m, "density resolution must equal grid resolution m");
  const double a = rho0.mean(), b = rho1.mean();
  require(std::abs(a - b) <= 1e-10 * std::max(a, b), "densities must have equal means");
}

inline SpaceTimeSolution bb_solve(const PeriodicDensity& rho0, const PeriodicDensity& rho1, const StaggeredGrid& grid,
                                  const BBParams& params = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  validate_densities(rho0, rho1, grid);
  require(params.tol > 0.0 && params.max_iters >= 1 && params.patience >= 1, "invalid solver parameters");
  const int d = grid.geometry.dimension;
  const int nt = grid.n_t;
  const std::size_t n = grid.cells();

  SpaceTimeSolution sol{grid, {}, {}, 0.0, 0.0, {}, 0, false, 0.0};
  const Vec a0 = detail::floored_values(rho0, params.floor);
  const Vec a1 = detail::floored_values(rho1, params.floor);
  sol.rho.assign(nt + 1, Vec(n));
  for (int k = 0; k <= nt; ++k) {
    const double t = static_cast<double>(k) / nt;
    for (std::size_t i = 0; i < n; ++i) sol.rho[k][i] = (1.0 - t) * a0[i] + t * a1[i];
  }
  sol.rho[0] = a0;
  sol.rho[nt] = a1;
  sol.momentum.assign(d, std::vector<Vec>(nt, Vec(n, 0.0)));

  detail::CEProjector proj(grid);
  proj.project(sol.rho, sol.momentum);

  // Dual variables live on midpoint cells: alpha and one beta per cell face
  // (2 * ax for the lower face along ax, 2 * ax + 1 for the upper one).
  using Field = std::vector<Vec>;
  using Flux = std::vector<Field>;
  const int nb = 2 * d;
  Field alpha(nt, Vec(n, 0.0));
  Flux beta(nb, Field(nt, Vec(n, 0.0)));

  // I maps rho to time averages and copies each face momentum into both adjacent
  // cells with weight 1/sqrt(2); endpoint densities carry no unknowns.
  const double w = std::sqrt(0.5);
  auto interp = [&](const Field& r, const Flux& mo, Field& A, Flux& B) {
    A.assign(nt, Vec(n));
    B.assign(nb, Field(nt, Vec(n)));
    for (int k = 0; k < nt; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        A[k][i] = 0.5 * (r[k][i] + r[k + 1][i]);
        for (int ax = 0; ax < d; ++ax) {
          B[2 * ax][k][i] = w * mo[ax][k][detail::neighbor(i, ax, -1, grid.m, d)];
          B[2 * ax + 1][k][i] = w * mo[ax][k][i];
        }
      }
  };
  auto interp_adjoint = [&](const Field& A, const Flux& B, Field& r, Flux& mo) {
    r.assign(nt + 1, Vec(n, 0.0));
    mo.assign(d, Field(nt, Vec(n)));
    for (int k = 1; k < nt; ++k)
      for (std::size_t i = 0; i < n; ++i) r[k][i] = 0.5 * (A[k - 1][i] + A[k][i]);
    for (int ax = 0; ax < d; ++ax)
      for (int k = 0; k < nt; ++k)
        for (std::size_t i = 0; i < n; ++i)
          mo[ax][k][i] = w * (B[2 * ax + 1][k][i] + B[2 * ax][k][detail::neighbor(i, ax, 1, grid.m, d)]);
  };

  // ||I|| <= 1, so sigma * tau < 1 suffices; adaptation keeps the product fixed.
  double sigma = params.sigma > 0.0 ? params.sigma : 1.0;
  double tau = params.tau > 0.0 ? params.tau : 0.99 / sigma;
  require(sigma * tau < 1.0, "primal-dual steps must satisfy sigma * tau < 1");
  double adapt = 0.5;

  double prev_obj = detail::grid_energy(grid, sol.rho, sol.momentum);
  int quiet = 0;
  double resid = 0.0;
  std::vector<double> bv(nb);
  Field gr, A, dA;
  Flux gm, B, dB;
  for (int it = 1; it <= params.max_iters; ++it) {
    // Primal descent along -I^T y, then projection onto the continuity equation.
    interp_adjoint(alpha, beta, gr, gm);
    auto rho_new = sol.rho;
    auto mom_new = sol.momentum;
    for (int k = 1; k < nt; ++k)
      for (std::size_t i = 0; i < n; ++i) rho_new[k][i] -= tau * gr[k][i];
    for (int ax = 0; ax < d; ++ax)
      for (int k = 0; k < nt; ++k)
        for (std::size_t i = 0; i < n; ++i) mom_new[ax][k][i] -= tau * gm[ax][k][i];
    proj.project(rho_new, mom_new);

    // Dual ascent at the extrapolated point, projected onto the parabola.
    Field rho_diff(nt + 1, Vec(n)), rho_bar(nt + 1, Vec(n));
    Flux mom_diff(d, Field(nt, Vec(n))), mom_bar(d, Field(nt, Vec(n)));
    for (int k = 0; k <= nt; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        rho_diff[k][i] = sol.rho[k][i] - rho_new[k][i];
        rho_bar[k][i] = rho_new[k][i] - rho_diff[k][i];
      }
    for (int ax = 0; ax < d; ++ax)
      for (int k = 0; k < nt; ++k)
        for (std::size_t i = 0; i < n; ++i) {
          mom_diff[ax][k][i] = sol.momentum[ax][k][i] - mom_new[ax][k][i];
          mom_bar[ax][k][i] = mom_new[ax][k][i] - mom_diff[ax][k][i];
        }
    interp(rho_bar, mom_bar, A, B);
    Field alpha_diff(nt, Vec(n));
    Flux beta_diff(nb, Field(nt, Vec(n)));
    for (int k = 0; k < nt; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        double a = alpha[k][i] + sigma * A[k][i];
        for (int c = 0; c < nb; ++c) bv[c] = beta[c][k][i] + sigma * B[c][k][i];
        detail::project_parabola(a, bv.data(), nb);
        alpha_diff[k][i] = alpha[k][i] - a;
        alpha[k][i] = a;
        for (int c = 0; c < nb; ++c) {
          beta_diff[c][k][i] = beta[c][k][i] - bv[c];
          beta[c][k][i] = bv[c];
        }
      }

    // Primal residual dU/tau - I^T dy and dual residual dy/sigma - I dU.
    interp_adjoint(alpha_diff, beta_diff, gr, gm);
    interp(rho_diff, mom_diff, dA, dB);
    double pres = 0.0, dres = 0.0;
    for (int k = 1; k < nt; ++k)
      for (std::size_t i = 0; i < n; ++i) pres = std::max(pres, std::abs(rho_diff[k][i] / tau - gr[k][i]));
    for (int ax = 0; ax < d; ++ax)
      for (int k = 0; k < nt; ++k)
        for (std::size_t i = 0; i < n; ++i)
          pres = std::max(pres, std::abs(mom_diff[ax][k][i] / tau - gm[ax][k][i]));
    for (int k = 0; k < nt; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        dres = std::max(dres, std::abs(alpha_diff[k][i] / sigma - dA[k][i]));
        for (int c = 0; c < nb; ++c) dres = std::max(dres, std::abs(beta_diff[c][k][i] / sigma - dB[c][k][i]));
      }
    resid = std::max(pres, dres);
    if (pres > 1.5 * dres) {
      tau /= 1.0 - adapt;
      sigma *= 1.0 - adapt;
      adapt *= 0.95;
    } else if (dres > 1.5 * pres) {
      tau *= 1.0 - adapt;
      sigma /= 1.0 - adapt;
      adapt *= 0.95;
    }

    sol.rho = std::move(rho_new);
    sol.momentum = std::move(mom_new);
    const double obj = detail::grid_energy(grid, sol.rho, sol.momentum);
    const double rel = std::abs(obj - prev_obj) / std::max(std::abs(obj), 1e-14);
    prev_obj = obj;
    if (it % params.trace_every == 0) sol.trace.push_back({it, resid, obj});
    sol.iterations = it;
    quiet = (resid <= params.tol && (rel <= params.tol || obj == 0.0)) ? quiet + 1 : 0;
    if (quiet >= params.patience) {
      sol.converged = true;
      break;
    }
  }
  sol.objective = prev_obj;
  sol.cost = sol.objective / grid.geometry.volume();
  sol.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!sol.converged)
    throw GridConvergenceError("grid solver did not converge within " + std::to_string(params.max_iters) +
                                   " iterations",
                               resid, sol.trace);
  return sol;
}

/// Max-norm of (rho_{k+1} - rho_k)/dt + div m_k over all space-time cells.
inline double ce_residual_grid(const SpaceTimeSolution& sol) {
  detail::CEProjector proj(sol.grid);
  double worst = 0.0;
  for (const auto& row : proj.residual(sol.rho, sol.momentum))
    for (double v : row) worst = std::max(worst, std::abs(v));
  return worst;
}

/// Exact discrete OT between the cell-center atoms of both densities, per unit cell volume.
inline double static_grid_reference(const PeriodicDensity& rho0, const PeriodicDensity& rho1,
                                    const StaggeredGrid& grid, double p = 2.0) {
  validate_densities(rho0, rho1, grid);
  require(grid.cells() <= 4096, "static grid reference is capped at m^d <= 4096 cells; use a coarser grid");
  return cost_cp(StationaryModel(rho0), StationaryModel(rho1), p).cost;
}

}  // namespace palmot
