#pragma once

// Static cost c_p between stationarized periodic measures. Equivariant
// couplings of L-periodic measures reduce to transport plans on the
// fundamental cell with per-pair optimal lattice lifts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "palmot/core.hpp"
#include "palmot/torus.hpp"

namespace palmot {

// ---------------------------------------------------------------------------
// Quotient cost

struct QuotientCostMatrix {
  TorusGeometry geometry;
  double p = 2.0;
  std::vector<TorusPoint> sources;
  std::vector<TorusPoint> targets;
  Matrix cost;            // c_ij = |y_j - x_i + k_ij L|^p
  std::vector<int> lifts;  // k_ij, row-major (i, j, axis)

  std::size_t rows() const { return cost.rows(); }
  std::size_t cols() const { return cost.cols(); }

  std::span<const int> lift(std::size_t i, std::size_t j) const {
    const auto d = static_cast<std::size_t>(geometry.dimension);
    return {lifts.data() + (i * cols() + j) * d, d};
  }

  /// z_ij = y_j - x_i + k_ij L, the displacement realizing c_ij.
  Vec displacement(std::size_t i, std::size_t j) const {
    Vec z = sub(targets[j].coords, sources[i].coords);
    auto k = lift(i, j);
    for (std::size_t a = 0; a < z.size(); ++a) z[a] += k[a] * geometry.period;
    return z;
  }
};

namespace detail {

/// All k in {-r..r}^d, lexicographic with axis 0 most significant.
inline std::vector<std::vector<int>> lift_candidates(int d, int r) {
  std::vector<std::vector<int>> out;
  std::vector<int> k(d, -r);
  while (true) {
    out.push_back(k);
    int a = d - 1;
    while (a >= 0 && k[a] == r) {
      k[a] = -r;
      --a;
    }
    if (a < 0) break;
    ++k[a];
  }
  return out;
}

}  // namespace detail

inline QuotientCostMatrix quotient_cost_matrix(const TorusGeometry& g, std::span<const TorusPoint> sources,
                                               std::span<const TorusPoint> targets, double p) {
  require(std::isfinite(p) && p > 1.0, "exponent p must be > 1");
  for (const auto& x : sources) require(static_cast<int>(x.coords.size()) == g.dimension, "geometry mismatch");
  for (const auto& y : targets) require(static_cast<int>(y.coords.size()) == g.dimension, "geometry mismatch");
  QuotientCostMatrix q;
  q.geometry = g;
  q.p = p;
  q.sources.assign(sources.begin(), sources.end());
  q.targets.assign(targets.begin(), targets.end());
  q.cost = Matrix(sources.size(), targets.size());
  const auto d = static_cast<std::size_t>(g.dimension);
  q.lifts.assign(sources.size() * targets.size() * d, 0);
  const auto candidates = detail::lift_candidates(g.dimension, 1);
  Vec z(d);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const Vec base = sub(targets[j].coords, sources[i].coords);
      double best = std::numeric_limits<double>::infinity();
      const std::vector<int>* best_k = nullptr;
      for (const auto& k : candidates) {
        for (std::size_t a = 0; a < d; ++a) z[a] = base[a] + k[a] * g.period;
        const double n2 = norm2(z);
        if (n2 < best) {
          best = n2;
          best_k = &k;
        }
      }
      std::copy(best_k->begin(), best_k->end(), q.lifts.begin() + static_cast<long>((i * targets.size() + j) * d));
      q.cost(i, j) = best == 0.0 ? 0.0 : std::pow(best, 0.5 * p);
    }
  }
  return q;
}

// ---------------------------------------------------------------------------
// Transport plans

struct TransportPlan {
  Matrix plan;
  Vec source;
  Vec target;

  double cost(const Matrix& c) const {
    double s = 0.0;
    for (std::size_t i = 0; i < plan.rows(); ++i)
      for (std::size_t j = 0; j < plan.cols(); ++j) s += plan(i, j) * c(i, j);
    return s;
  }

  /// max over rows and columns of |marginal - prescribed|.
  double marginal_violation() const {
    double worst = 0.0;
    for (std::size_t i = 0; i < plan.rows(); ++i) worst = std::max(worst, std::abs(sum(plan.row(i)) - source[i]));
    for (std::size_t j = 0; j < plan.cols(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < plan.rows(); ++i) s += plan(i, j);
      worst = std::max(worst, std::abs(s - target[j]));
    }
    return worst;
  }
};

namespace detail {

inline void check_marginals(const Matrix& cost, std::span<const double> a, std::span<const double> b) {
  require(cost.rows() == a.size() && cost.cols() == b.size(), "marginal sizes do not match cost matrix");
  require(!a.empty() && !b.empty(), "empty marginals");
  for (double x : a) require(std::isfinite(x) && x >= 0.0, "source weights must be finite and >= 0");
  for (double x : b) require(std::isfinite(x) && x >= 0.0, "target weights must be finite and >= 0");
  const double sa = sum(a), sb = sum(b);
  require(std::abs(sa - sb) <= 1e-12 * std::max(1.0, std::max(sa, sb)), "unbalanced marginals");
  for (double c : cost.data()) require(std::isfinite(c), "non-finite cost entry");
}

}  // namespace detail

/// Exact balanced transport by successive shortest augmenting paths with
/// Johnson potentials on the complete bipartite graph. Ties resolve to the
/// lowest index, so the output is deterministic. Equal weights give a permutation.
inline TransportPlan solve_transport_exact(const Matrix& cost, std::span<const double> a, std::span<const double> b) {
  detail::check_marginals(cost, a, b);
  const std::size_t n = a.size(), m = b.size();
  const double total = sum(a);
  const double eps = 1e-14 * std::max(1.0, total);
  const double inf = std::numeric_limits<double>::infinity();

  TransportPlan out{Matrix(n, m), Vec(a.begin(), a.end()), Vec(b.begin(), b.end())};
  Matrix& flow = out.plan;
  Vec supply(a.begin(), a.end()), demand(b.begin(), b.end());
  Vec phi_s(n, 0.0), phi_t(m, inf);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < n; ++i) phi_t[j] = std::min(phi_t[j], cost(i, j));

  Vec dist_s(n), dist_t(m);
  std::vector<long> pred_t(m);  // source index reaching target j
  std::vector<long> pred_s(n);  // target index reaching source i via a reverse edge, -1 at path start
  std::vector<char> done_s(n), done_t(m);

  double remaining = total;
  for (std::size_t j = 0; j < m; ++j)
    if (demand[j] <= eps) demand[j] = 0.0;
  while (remaining > eps) {
    std::fill(dist_s.begin(), dist_s.end(), inf);
    std::fill(dist_t.begin(), dist_t.end(), inf);
    std::fill(done_s.begin(), done_s.end(), 0);
    std::fill(done_t.begin(), done_t.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      pred_s[i] = -1;
      if (supply[i] > eps) dist_s[i] = 0.0;
    }
    long sink = -1;
    double sink_dist = inf;
    while (true) {
      // Dense Dijkstra: pick the closest unsettled node, sources before targets on ties.
      double best = inf;
      long best_node = -1;
      bool is_source = true;
      for (std::size_t i = 0; i < n; ++i)
        if (!done_s[i] && dist_s[i] < best) {
          best = dist_s[i];
          best_node = static_cast<long>(i);
          is_source = true;
        }
      for (std::size_t j = 0; j < m; ++j)
        if (!done_t[j] && dist_t[j] < best) {
          best = dist_t[j];
          best_node = static_cast<long>(j);
          is_source = false;
        }
      if (best_node < 0) break;
      if (is_source) {
        const auto i = static_cast<std::size_t>(best_node);
        done_s[i] = 1;
        for (std::size_t j = 0; j < m; ++j) {
          if (done_t[j]) continue;
          const double rc = std::max(0.0, cost(i, j) + phi_s[i] - phi_t[j]);
          if (best + rc < dist_t[j]) {
            dist_t[j] = best + rc;
            pred_t[j] = static_cast<long>(i);
          }
        }
      } else {
        const auto j = static_cast<std::size_t>(best_node);
        done_t[j] = 1;
        if (demand[j] > 0.0) {
          sink = best_node;
          sink_dist = best;
          break;
        }
        for (std::size_t i = 0; i < n; ++i) {
          if (done_s[i] || flow(i, j) <= 0.0) continue;
          const double rc = std::max(0.0, -cost(i, j) + phi_t[j] - phi_s[i]);
          if (best + rc < dist_s[i]) {
            dist_s[i] = best + rc;
            pred_s[i] = best_node;
          }
        }
      }
    }
    if (sink < 0) throw Error("solve_transport_exact: infeasible residual network");

    for (std::size_t i = 0; i < n; ++i) phi_s[i] += std::min(dist_s[i], sink_dist);
    for (std::size_t j = 0; j < m; ++j) phi_t[j] += std::min(dist_t[j], sink_dist);

    // Bottleneck along the path sink <- source <- target <- ... <- start source.
    double delta = demand[static_cast<std::size_t>(sink)];
    auto j = static_cast<std::size_t>(sink);
    std::size_t start = 0;
    while (true) {
      const auto i = static_cast<std::size_t>(pred_t[j]);
      if (pred_s[i] < 0) {
        start = i;
        break;
      }
      const auto prev = static_cast<std::size_t>(pred_s[i]);
      delta = std::min(delta, flow(i, prev));
      j = prev;
    }
    delta = std::min(delta, supply[start]);

    j = static_cast<std::size_t>(sink);
    while (true) {
      const auto i = static_cast<std::size_t>(pred_t[j]);
      flow(i, j) += delta;
      if (pred_s[i] < 0) break;
      const auto prev = static_cast<std::size_t>(pred_s[i]);
      flow(i, prev) -= delta;
      if (flow(i, prev) <= eps) flow(i, prev) = 0.0;
      j = prev;
    }
    supply[start] -= delta;
    if (supply[start] <= eps) supply[start] = 0.0;
    demand[static_cast<std::size_t>(sink)] -= delta;
    if (demand[static_cast<std::size_t>(sink)] <= eps) demand[static_cast<std::size_t>(sink)] = 0.0;
    remaining = sum(demand);
  }
  return out;
}

inline TransportPlan solve_assignment_exact(const QuotientCostMatrix& c, std::span<const double> a,
                                            std::span<const double> b) {
  return solve_transport_exact(c.cost, a, b);
}

struct SinkhornResult {
  TransportPlan plan;
  int iterations = 0;
  double residual = 0.0;
};

/// Log-domain Sinkhorn. Column marginals are exact after each sweep; the
/// loop stops once the row violation drops below tol.
inline SinkhornResult solve_sinkhorn(const Matrix& cost, std::span<const double> a, std::span<const double> b,
                                     double eps, int max_iters, double tol = 1e-9) {
  detail::check_marginals(cost, a, b);
  require(std::isfinite(eps) && eps > 0.0, "sinkhorn: epsilon must be > 0");
  require(max_iters >= 1, "sinkhorn: max_iters must be >= 1");
  const std::size_t n = a.size(), m = b.size();
  const double ninf = -std::numeric_limits<double>::infinity();
  Vec f(n, 0.0), g(m, 0.0), log_a(n), log_b(m);
  for (std::size_t i = 0; i < n; ++i) log_a[i] = a[i] > 0.0 ? std::log(a[i]) : ninf;
  for (std::size_t j = 0; j < m; ++j) log_b[j] = b[j] > 0.0 ? std::log(b[j]) : ninf;

  auto lse = [ninf](std::span<const double> v) {
    double mx = ninf;
    for (double x : v) mx = std::max(mx, x);
    if (mx == ninf) return ninf;
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
  };

  Vec buf(std::max(n, m));
  SinkhornResult res;
  res.residual = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) buf[j] = (g[j] - cost(i, j)) / eps;
      f[i] = a[i] > 0.0 ? eps * (log_a[i] - lse({buf.data(), m})) : ninf;
    }
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i) buf[i] = (f[i] - cost(i, j)) / eps;
      g[j] = b[j] > 0.0 ? eps * (log_b[j] - lse({buf.data(), n})) : ninf;
    }
    double viol = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += std::exp((f[i] + g[j] - cost(i, j)) / eps);
      viol = std::max(viol, std::abs(s - a[i]));
    }
    res.iterations = it;
    res.residual = viol;
    if (viol <= tol) break;
  }
  if (res.residual > tol)
    throw ConvergenceError("sinkhorn: no convergence within max_iters (residual " + std::to_string(res.residual) + ")",
                           res.residual);
  res.plan = TransportPlan{Matrix(n, m), Vec(a.begin(), a.end()), Vec(b.begin(), b.end())};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) res.plan.plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / eps);
  return res;
}

/// Exhaustive minimum over all n! permutations; equal weights, n <= 8.
inline TransportPlan brute_force_oracle(const Matrix& cost, double weight) {
  const std::size_t n = cost.rows();
  require(n == cost.cols(), "brute_force_oracle: square cost matrix required");
  require(n >= 1 && n <= 8, "brute_force_oracle: n must be in [1, 8]");
  require(std::isfinite(weight) && weight > 0.0, "brute_force_oracle: weight must be > 0");
  std::vector<std::size_t> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost(i, perm[i]);
    if (s < best_cost) {
      best_cost = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  TransportPlan out{Matrix(n, n), Vec(n, weight), Vec(n, weight)};
  for (std::size_t i = 0; i < n; ++i) out.plan(i, best[i]) = weight;
  return out;
}

// ---------------------------------------------------------------------------
// Balancing kernels

struct KernelEntry {
  Vec z;
  double mass = 0.0;
};

/// T(omega_i, dz) for each Palm atom omega_i; entry masses of a row sum to one.
struct KernelRow {
  TorusPoint origin;
  double palm_mass = 0.0;
  std::vector<KernelEntry> entries;
};

struct BalancingKernel {
  TorusGeometry geometry;
  std::vector<KernelRow> rows;

  /// E_{Q_xi}[ int |z|^p T(dz) ].
  double cost(double p) const {
    double s = 0.0;
    for (const auto& r : rows) {
      double inner = 0.0;
      for (const auto& e : r.entries) inner += e.mass * pow_norm(e.z, p);
      s += r.palm_mass * inner;
    }
    return s;
  }
};

/// Palm mass of each row must be the row sum over L^d, and row points must match palm_xi.
inline BalancingKernel plan_to_balancing_kernel(const TransportPlan& plan, const QuotientCostMatrix& cost,
                                                const PalmMeasure& palm_xi) {
  require_same_geometry(cost.geometry, palm_xi.geometry);
  require(plan.plan.rows() == cost.rows() && plan.plan.cols() == cost.cols(), "plan/cost shape mismatch");
  require(palm_xi.atoms.size() == plan.plan.rows(), "plan/palm inconsistency: row count");
  const double vol = cost.geometry.volume();
  BalancingKernel k{cost.geometry, {}};
  for (std::size_t i = 0; i < plan.plan.rows(); ++i) {
    const double w = sum(plan.plan.row(i));
    require(palm_xi.atoms[i].point == cost.sources[i], "plan/palm inconsistency: atom location");
    require(std::abs(w / vol - palm_xi.atoms[i].mass) <= 1e-9 * std::max(1.0, palm_xi.atoms[i].mass),
            "plan/palm inconsistency: row mass");
    KernelRow row{palm_xi.atoms[i].point, palm_xi.atoms[i].mass, {}};
    for (std::size_t j = 0; j < plan.plan.cols(); ++j) {
      const double pij = plan.plan(i, j);
      if (pij <= 0.0) continue;
      row.entries.push_back({cost.displacement(i, j), pij / w});
    }
    k.rows.push_back(std::move(row));
  }
  return k;
}

using OmegaFunction = std::function<double(const TorusPoint&)>;

/// One indicator per target Palm atom (torus ball of radius tol) plus the constant 1.
inline std::vector<OmegaFunction> indicator_basis(const PalmMeasure& palm_eta, double tol = 1e-9) {
  std::vector<OmegaFunction> out;
  const auto g = palm_eta.geometry;
  for (const auto& atom : palm_eta.atoms) {
    const TorusPoint y = atom.point;
    out.push_back([g, y, tol](const TorusPoint& w) { return torus_distance(g, w, y) <= tol ? 1.0 : 0.0; });
  }
  out.push_back([](const TorusPoint&) { return 1.0; });
  return out;
}

/// max_f | E_{Q_xi}[ int f(theta_z w) T(w, dz) ] - E_{Q_eta}[f] |, exact finite sums.
inline double verify_balancing(const BalancingKernel& kernel, const PalmMeasure& palm_xi, const PalmMeasure& palm_eta,
                               std::span<const OmegaFunction> tests) {
  require_same_geometry(kernel.geometry, palm_xi.geometry);
  require_same_geometry(kernel.geometry, palm_eta.geometry);
  require(kernel.rows.size() == palm_xi.atoms.size(), "kernel rows do not match source Palm atoms");
  double worst = 0.0;
  for (const auto& f : tests) {
    double lhs = 0.0;
    for (std::size_t i = 0; i < kernel.rows.size(); ++i) {
      const auto& row = kernel.rows[i];
      require(row.origin == palm_xi.atoms[i].point, "kernel row origin does not match source Palm atom");
      double inner = 0.0;
      for (const auto& e : row.entries) inner += e.mass * f(shift(kernel.geometry, row.origin, e.z));
      lhs += palm_xi.atoms[i].mass * inner;
    }
    double rhs = 0.0;
    for (const auto& atom : palm_eta.atoms) rhs += atom.mass * f(atom.point);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// c_p between models

enum class StaticMethod { exact_lp, sinkhorn };

inline std::string to_string(StaticMethod m) { return m == StaticMethod::exact_lp ? "lp" : "sinkhorn"; }

struct StaticOptions {
  StaticMethod method = StaticMethod::exact_lp;
  double sinkhorn_eps = 1e-3;
  int sinkhorn_max_iters = 100000;
};

struct StaticSolveReport {
  double cost = 0.0;  // c_p per unit volume: plan cost / L^d
  QuotientCostMatrix cost_matrix;
  TransportPlan plan;
  BalancingKernel kernel;
  StaticMethod method = StaticMethod::exact_lp;
  int iterations = 0;
  double wall_seconds = 0.0;
  double exponent = 2.0;
};

/// Atom locations and masses per fundamental cell; densities become cell centers.
inline std::pair<std::vector<TorusPoint>, Vec> cell_atoms(const StationaryModel& model) {
  if (const auto* c = std::get_if<PeriodicPointConfiguration>(&model)) return {c->atoms(), c->weights()};
  const auto& d = std::get<PeriodicDensity>(model);
  std::vector<TorusPoint> pts;
  Vec w;
  for (std::size_t i = 0; i < d.cells(); ++i) {
    if (d.values()[i] <= 0.0) continue;
    pts.push_back(make_point(d.geometry(), d.cell_center(i)));
    w.push_back(d.values()[i] * d.cell_volume());
  }
  return {pts, w};
}

inline void require_equal_intensity(const StationaryModel& xi, const StationaryModel& eta) {
  const double a = intensity(xi), b = intensity(eta);
  require(std::abs(a - b) <= 1e-12 * std::max(1.0, std::max(a, b)),
          "intensity mismatch: c_p is only defined for random measures with the same finite intensity (" +
              std::to_string(a) + " vs " + std::to_string(b) + ")");
}

inline StaticSolveReport cost_cp(const StationaryModel& xi, const StationaryModel& eta, double p,
                                 const StaticOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  require_same_geometry(geometry_of(xi), geometry_of(eta));
  require(std::isfinite(p) && p > 1.0, "exponent p must be > 1");
  require_equal_intensity(xi, eta);
  const auto& g = geometry_of(xi);
  auto [xs, wx] = cell_atoms(xi);
  auto [ys, wy] = cell_atoms(eta);

  StaticSolveReport r;
  r.exponent = p;
  r.method = opt.method;
  r.cost_matrix = quotient_cost_matrix(g, xs, ys, p);
  if (opt.method == StaticMethod::exact_lp) {
    r.plan = solve_assignment_exact(r.cost_matrix, wx, wy);
  } else {
    auto s = solve_sinkhorn(r.cost_matrix.cost, wx, wy, opt.sinkhorn_eps, opt.sinkhorn_max_iters);
    r.plan = std::move(s.plan);
    r.iterations = s.iterations;
  }
  r.cost = r.plan.cost(r.cost_matrix.cost) / g.volume();
  PalmMeasure src{g, {}, std::nullopt, 0};
  for (std::size_t i = 0; i < xs.size(); ++i) src.atoms.push_back({xs[i], wx[i] / g.volume()});
  r.kernel = plan_to_balancing_kernel(r.plan, r.cost_matrix, src);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Relative-shift search (the restricted outer infimum)

/// Translates every atom (or grid cell, by whole cells) by u.
inline StationaryModel shifted(const StationaryModel& model, std::span<const double> u) {
  const auto& g = geometry_of(model);
  require(static_cast<int>(u.size()) == g.dimension, "shift dimension mismatch");
  if (const auto* c = std::get_if<PeriodicPointConfiguration>(&model)) {
    std::vector<Vec> atoms;
    for (const auto& a : c->atoms()) atoms.push_back(add(a.coords, u));
    return PeriodicPointConfiguration(g, atoms, c->weights());
  }
  const auto& d = std::get<PeriodicDensity>(model);
  const int m = d.resolution();
  std::vector<long> cells(g.dimension);
  for (int a = 0; a < g.dimension; ++a) {
    const double s = u[a] / d.cell_width();
    require(std::abs(s - std::round(s)) <= 1e-9, "density shifts must be whole cells");
    cells[a] = static_cast<long>(std::round(s));
  }
  Vec out(d.cells());
  for (std::size_t idx = 0; idx < d.cells(); ++idx) {
    std::size_t rem = idx, target = 0, stride = 1;
    std::vector<long> multi(g.dimension);
    for (int a = g.dimension - 1; a >= 0; --a) {
      multi[a] = static_cast<long>(rem % m);
      rem /= m;
    }
    for (int a = g.dimension - 1; a >= 0; --a) {
      const long t = ((multi[a] + cells[a]) % m + m) % m;
      target += static_cast<std::size_t>(t) * stride;
      stride *= m;
    }
    out[target] = d.values()[idx];
  }
  return PeriodicDensity(g, m, out);
}

struct ShiftSearch {
  int grid_per_axis = 16;
  int refine_iters = 50;
  int refine_starts = 3;
};

struct ShiftResult {
  Vec shift;
  double cost = 0.0;
  double cost_at_zero = 0.0;
  int evaluations = 0;
};

namespace detail {

/// argmin_u sum m_k |a_k + u|^p by damped Newton; convex in u.
inline Vec minimize_shift_energy(const std::vector<Vec>& a, const Vec& m, double p, Vec u) {
  const std::size_t d = u.size();
  auto energy = [&](const Vec& v) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += m[k] * pow_norm(add(a[k], v), p);
    return s;
  };
  double e = energy(u);
  for (int it = 0; it < 100; ++it) {
    Vec grad(d, 0.0);
    Matrix hess(d, d, 0.0);
    for (std::size_t k = 0; k < a.size(); ++k) {
      const Vec r = add(a[k], u);
      const double n = norm(r);
      if (n == 0.0) continue;
      const double s = p * std::pow(n, p - 2.0);
      for (std::size_t i = 0; i < d; ++i) {
        grad[i] += m[k] * s * r[i];
        for (std::size_t j = 0; j < d; ++j)
          hess(i, j) += m[k] * s * ((i == j ? 1.0 : 0.0) + (p - 2.0) * r[i] * r[j] / (n * n));
      }
    }
    if (norm(grad) == 0.0) break;
    // Solve hess * step = grad by Gaussian elimination with partial pivoting.
    Matrix A = hess;
    Vec rhs = grad;
    bool singular = false;
    for (std::size_t c = 0; c < d; ++c) {
      std::size_t piv = c;
      for (std::size_t r = c + 1; r < d; ++r)
        if (std::abs(A(r, c)) > std::abs(A(piv, c))) piv = r;
      if (std::abs(A(piv, c)) < 1e-300) {
        singular = true;
        break;
      }
      if (piv != c) {
        for (std::size_t j = 0; j < d; ++j) std::swap(A(c, j), A(piv, j));
        std::swap(rhs[c], rhs[piv]);
      }
      for (std::size_t r = c + 1; r < d; ++r) {
        const double f = A(r, c) / A(c, c);
        for (std::size_t j = c; j < d; ++j) A(r, j) -= f * A(c, j);
        rhs[r] -= f * rhs[c];
      }
    }
    Vec step(d, 0.0);
    if (singular) {
      step = grad;
    } else {
      for (std::size_t c = d; c-- > 0;) {
        double s = rhs[c];
        for (std::size_t j = c + 1; j < d; ++j) s -= A(c, j) * step[j];
        step[c] = s / A(c, c);
      }
    }
    double t = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 60; ++ls) {
      Vec cand = sub(u, scale(step, t));
      const double ec = energy(cand);
      if (ec < e) {
        u = std::move(cand);
        improved = e - ec > 1e-16 * std::max(1.0, e);
        e = ec;
        break;
      }
      t *= 0.5;
    }
    if (!improved) break;
  }
  return u;
}

}  // namespace detail

/// Minimizes u -> c_p(xi, eta shifted by u) over a grid followed by
/// alternating plan / shift refinement. u = 0 is always a candidate.
inline ShiftResult optimize_relative_shift(const StationaryModel& xi, const StationaryModel& eta, double p,
                                           const ShiftSearch& search = {}) {
  require_same_geometry(geometry_of(xi), geometry_of(eta));
  require_equal_intensity(xi, eta);
  require(search.grid_per_axis >= 1, "shift grid must have >= 1 node per axis");
  const auto& g = geometry_of(xi);
  const int d = g.dimension;
  const bool is_density = std::holds_alternative<PeriodicDensity>(eta);
  int per_axis = search.grid_per_axis;
  double step = g.period / per_axis;
  if (is_density) {
    const auto& dens = std::get<PeriodicDensity>(eta);
    per_axis = dens.resolution();
    step = dens.cell_width();
  }

  ShiftResult res;
  auto eval = [&](const Vec& u) {
    ++res.evaluations;
    return cost_cp(xi, shifted(eta, u), p).cost;
  };

  std::vector<std::pair<double, Vec>> candidates;
  std::vector<int> idx(d, 0);
  while (true) {
    Vec u(d);
    for (int a = 0; a < d; ++a) u[a] = idx[a] * step;
    candidates.emplace_back(eval(u), canonical_rep(u, g.period));
    int a = d - 1;
    while (a >= 0 && idx[a] == per_axis - 1) {
      idx[a] = 0;
      --a;
    }
    if (a < 0) break;
    ++idx[a];
  }
  res.cost_at_zero = candidates.front().first;
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const auto& x, const auto& y) { return x.first < y.first; });
  res.cost = candidates.front().first;
  res.shift = candidates.front().second;

  if (!is_density) {
    const int starts = std::min<int>(search.refine_starts, static_cast<int>(candidates.size()));
    for (int s = 0; s < starts; ++s) {
      Vec u = candidates[s].second;
      double c = candidates[s].first;
      for (int it = 0; it < search.refine_iters; ++it) {
        const auto rep = cost_cp(xi, shifted(eta, u), p);
        ++res.evaluations;
        std::vector<Vec> a;
        Vec m;
        for (std::size_t i = 0; i < rep.plan.plan.rows(); ++i)
          for (std::size_t j = 0; j < rep.plan.plan.cols(); ++j)
            if (rep.plan.plan(i, j) > 0.0) {
              a.push_back(sub(rep.cost_matrix.displacement(i, j), u));
              m.push_back(rep.plan.plan(i, j));
            }
        Vec next = detail::minimize_shift_energy(a, m, p, u);
        next = canonical_rep(next, g.period);
        const double cn = eval(next);
        if (!(cn < c)) break;
        const bool small = c - cn <= 1e-15 * std::max(1.0, c);
        u = std::move(next);
        c = cn;
        if (small) break;
      }
      if (c < res.cost) {
        res.cost = c;
        res.shift = u;
      }
    }
  }
  return res;
}

}  // namespace palmot
