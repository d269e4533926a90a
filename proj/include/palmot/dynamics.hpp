#pragma once

// Continuity equation on Omega x R^d: flow gradients, mollified test
// functions, characteristics, superposition, and the displacement geodesic
// V_t(w, x) = (x, 0) together with its kinetic action.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "palmot/core.hpp"
#include "palmot/palm_wasserstein.hpp"
#include "palmot/torus.hpp"
#include "palmot/transport.hpp"

namespace palmot {

// ---------------------------------------------------------------------------
// Gauss-Hermite rule

struct GaussHermiteRule {
  Vec nodes;    // for weight exp(-x^2)
  Vec weights;  // sum to sqrt(pi)
};

/// Newton iteration on the orthonormal Hermite recurrence.
inline GaussHermiteRule gauss_hermite(int n) {
  require(n >= 1 && n <= 200, "gauss_hermite: 1 <= n <= 200");
  GaussHermiteRule r{Vec(n), Vec(n)};
  const double pim4 = std::pow(std::numbers::pi, -0.25);
  const int half = (n + 1) / 2;
  double z = 0.0;
  for (int i = 0; i < half; ++i) {
    if (i == 0)
      z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -0.16667);
    else if (i == 1)
      z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
    else if (i == 2)
      z = 1.86 * z - 0.86 * r.nodes[0];
    else if (i == 3)
      z = 1.91 * z - 0.91 * r.nodes[1];
    else
      z = 2.0 * z - r.nodes[i - 2];
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p1 = pim4, p2 = 0.0;
      for (int j = 1; j <= n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / j) * p2 - std::sqrt((j - 1.0) / j) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      const double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) <= 1e-15) break;
    }
    r.nodes[i] = z;
    r.nodes[n - 1 - i] = -z;
    r.weights[i] = 2.0 / (pp * pp);
    r.weights[n - 1 - i] = r.weights[i];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Smooth compact bumps

/// Scaled exp(-1/(1-s^2)) supported on the open interval (lo, hi).
struct TimeBump {
  double lo = 0.2;
  double hi = 0.8;
  double amplitude = 1.0;

  double value(double t) const {
    const double s = (2.0 * t - lo - hi) / (hi - lo);
    if (std::abs(s) >= 1.0) return 0.0;
    return amplitude * std::exp(-1.0 / (1.0 - s * s));
  }
  double derivative(double t) const {
    const double s = (2.0 * t - lo - hi) / (hi - lo);
    if (std::abs(s) >= 1.0) return 0.0;
    const double q = 1.0 - s * s;
    return value(t) * (-2.0 * s / (q * q)) * (2.0 / (hi - lo));
  }
};

/// Radial bump exp(-1/(1-|y-c|^2/R^2)) on the open ball B_R(c).
struct SpaceBump {
  Vec center;
  double radius = 1.0;
  double amplitude = 1.0;

  double value(std::span<const double> y) const {
    const double q = norm2(sub(y, center)) / (radius * radius);
    if (q >= 1.0) return 0.0;
    return amplitude * std::exp(-1.0 / (1.0 - q));
  }
  Vec gradient(std::span<const double> y) const {
    const Vec r = sub(y, center);
    const double q = norm2(r) / (radius * radius);
    if (q >= 1.0) return Vec(y.size(), 0.0);
    const double v = amplitude * std::exp(-1.0 / (1.0 - q));
    return scale(r, -2.0 * v / (radius * radius * (1.0 - q) * (1.0 - q)));
  }
};

// ---------------------------------------------------------------------------
// Mollification on Omega x R^d

struct MollifiedValue {
  double value = 0.0;
  Vec grad_omega;
  Vec grad_y;
};

/// f_eps(w, x) = int int rho_eps(z, u) f(theta_z w, x - u) dz du with rho_eps
/// the centered Gaussian of covariance eps I on R^{2d}. Derivatives come from
/// differentiating the kernel: grad_w = E[Z_z f]/sqrt(eps), grad_x = -E[Z_u f]/sqrt(eps).
class Mollifier {
 public:
  Mollifier(TorusGeometry g, OmegaSpaceFunction f, double eps, int nodes_per_axis = 0)
      : geometry_(g), f_(std::move(f)), eps_(eps) {
    require(std::isfinite(eps) && eps > 0.0, "mollifier width eps must be > 0");
    if (nodes_per_axis <= 0) nodes_per_axis = g.dimension == 1 ? 24 : (g.dimension == 2 ? 8 : 4);
    rule_ = gauss_hermite(nodes_per_axis);
  }

  double eps() const noexcept { return eps_; }
  int nodes_per_axis() const noexcept { return static_cast<int>(rule_.nodes.size()); }
  const TorusGeometry& geometry() const noexcept { return geometry_; }

  MollifiedValue operator()(const TorusPoint& omega, std::span<const double> x) const {
    return evaluate(rule_, omega, x);
  }

  /// Max gap between this rule and one with twice the nodes, over probe points.
  double estimate_error(std::span<const TorusPoint> omegas, std::span<const Vec> ys) const {
    const auto fine = gauss_hermite(2 * nodes_per_axis());
    double worst = 0.0;
    for (const auto& w : omegas)
      for (const auto& y : ys) {
        const auto a = evaluate(rule_, w, y);
        const auto b = evaluate(fine, w, y);
        worst = std::max(worst, std::abs(a.value - b.value));
        worst = std::max(worst, norm(sub(a.grad_omega, b.grad_omega)));
        worst = std::max(worst, norm(sub(a.grad_y, b.grad_y)));
      }
    return worst;
  }

 private:
  MollifiedValue evaluate(const GaussHermiteRule& rule, const TorusPoint& omega, std::span<const double> x) const {
    const int d = geometry_.dimension;
    const int dims = 2 * d;
    const int n = static_cast<int>(rule.nodes.size());
    const double sq = std::sqrt(eps_);
    const double norm_w = std::pow(std::numbers::pi, -0.5 * dims);
    MollifiedValue out{0.0, Vec(d, 0.0), Vec(d, 0.0)};
    std::vector<int> idx(dims, 0);
    Vec z(d), xu(d), gauss(dims);
    while (true) {
      double w = norm_w;
      for (int a = 0; a < dims; ++a) {
        w *= rule.weights[idx[a]];
        gauss[a] = std::numbers::sqrt2 * rule.nodes[idx[a]];  // standard normal sample
      }
      for (int a = 0; a < d; ++a) {
        z[a] = sq * gauss[a];
        xu[a] = x[a] - sq * gauss[d + a];
      }
      const double fv = f_(shift(geometry_, omega, z), xu);
      out.value += w * fv;
      for (int a = 0; a < d; ++a) {
        out.grad_omega[a] += w * gauss[a] * fv;
        out.grad_y[a] -= w * gauss[d + a] * fv;
      }
      int a = dims - 1;
      while (a >= 0 && idx[a] == n - 1) {
        idx[a] = 0;
        --a;
      }
      if (a < 0) break;
      ++idx[a];
    }
    for (auto& v : out.grad_omega) v /= sq;
    for (auto& v : out.grad_y) v /= sq;
    return out;
  }

  TorusGeometry geometry_;
  OmegaSpaceFunction f_;
  double eps_;
  GaussHermiteRule rule_;
};

// ---------------------------------------------------------------------------
// Test functions

struct TestFunctionValue {
  double phi = 0.0;
  double dt = 0.0;
  Vec grad_omega;
  Vec grad_y;
};

/// Phi_t(w, y) = h(t) g(y) f_eps(w, y) with analytic derivatives.
class TestFunction {
 public:
  TestFunction(TorusGeometry geometry, SpaceBump g, TimeBump h, OmegaSpaceFunction f, double f_bound, double eps,
               int nodes_per_axis = 0)
      : geometry_(geometry),
        g_(std::move(g)),
        h_(h),
        mollifier_(geometry, std::move(f), eps, nodes_per_axis),
        f_bound_(f_bound) {
    require(static_cast<int>(g_.center.size()) == geometry.dimension, "space bump dimension mismatch");
    require(g_.radius > 0.0, "space bump radius must be > 0");
    require(h_.lo > 0.0 && h_.hi < 1.0 && h_.lo < h_.hi, "time support must be a compact subset of (0, 1)");
    require(std::isfinite(f_bound) && f_bound >= 0.0, "f bound must be finite");
    // Sup of |h'| on a fine grid; the bump is smooth so the grid max is sharp.
    double hmax = 0.0;
    for (int k = 0; k <= 100000; ++k) {
      const double t = h_.lo + (h_.hi - h_.lo) * k / 100000.0;
      dh_sup_ = std::max(dh_sup_, std::abs(h_.derivative(t)));
      hmax = std::max(hmax, h_.value(t));
    }
    h_sup_ = hmax;
    double gmax = 0.0, dgmax = 0.0;
    for (int k = 0; k <= 100000; ++k) {
      const double r = g_.radius * k / 100000.0;
      Vec y = g_.center;
      y[0] += r;
      gmax = std::max(gmax, g_.value(y));
      dgmax = std::max(dgmax, norm(g_.gradient(y)));
    }
    const double d = geometry.dimension;
    const double slack = 1.01;
    const double grad_f = f_bound_ * std::sqrt(d) / std::sqrt(eps);
    derivative_bound_ =
        slack * (dh_sup_ * gmax * f_bound_ + h_sup_ * gmax * grad_f + h_sup_ * (dgmax * f_bound_ + gmax * grad_f));
  }

  const TorusGeometry& geometry() const noexcept { return geometry_; }
  const TimeBump& time_bump() const noexcept { return h_; }
  const SpaceBump& space_bump() const noexcept { return g_; }
  const Mollifier& mollifier() const noexcept { return mollifier_; }

  /// Dominates |d_t Phi| + |grad_Omega Phi| + |grad_y Phi| everywhere.
  double derivative_bound() const noexcept { return derivative_bound_; }

  TestFunctionValue operator()(double t, const TorusPoint& omega, std::span<const double> y) const {
    const int d = geometry_.dimension;
    TestFunctionValue v{0.0, 0.0, Vec(d, 0.0), Vec(d, 0.0)};
    const double h = h_.value(t);
    const double dh = h_.derivative(t);
    if (h == 0.0 && dh == 0.0) return v;
    const double g = g_.value(y);
    if (g == 0.0) return v;
    const Vec dg = g_.gradient(y);
    const auto m = mollifier_(omega, y);
    v.phi = h * g * m.value;
    v.dt = dh * g * m.value;
    for (int a = 0; a < d; ++a) {
      v.grad_omega[a] = h * g * m.grad_omega[a];
      v.grad_y[a] = h * (dg[a] * m.value + g * m.grad_y[a]);
    }
    return v;
  }

 private:
  TorusGeometry geometry_;
  SpaceBump g_;
  TimeBump h_;
  Mollifier mollifier_;
  double f_bound_;
  double h_sup_ = 0.0;
  double dh_sup_ = 0.0;
  double derivative_bound_ = 0.0;
};

inline TestFunction make_test_function(const TorusGeometry& geometry, SpaceBump g, TimeBump h, OmegaSpaceFunction f,
                                       double f_bound, double eps, int nodes_per_axis = 0) {
  return TestFunction(geometry, std::move(g), h, std::move(f), f_bound, eps, nodes_per_axis);
}

enum class GradientMode { analytic, numeric };

/// grad_Omega Phi_t(w, y). Numeric mode differentiates s -> Phi_t(theta_{s e_i} w, y) centrally.
inline Vec grad_omega(const TestFunction& phi, const TorusPoint& omega, std::span<const double> y, double t,
                      GradientMode mode = GradientMode::analytic, double step = 1e-4) {
  if (mode == GradientMode::analytic) return phi(t, omega, y).grad_omega;
  require(step > 0.0, "finite-difference step must be > 0");
  const auto& g = phi.geometry();
  Vec out(g.dimension);
  Vec e(g.dimension, 0.0);
  for (int a = 0; a < g.dimension; ++a) {
    e[a] = step;
    const double fp = phi(t, shift(g, omega, e), y).phi;
    e[a] = -step;
    const double fm = phi(t, shift(g, omega, e), y).phi;
    e[a] = 0.0;
    out[a] = (fp - fm) / (2.0 * step);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vector fields and curves

using FieldFunction = std::function<Vec(double, const TorusPoint&, std::span<const double>)>;

/// V_t(w, y) in R^{2d}: first d components drive the flow on Omega, the rest y.
/// Bounds are caller-declared as functions of the radius R of the compact B_R(0).
struct VectorField {
  FieldFunction eval;
  std::function<double(double)> sup_bound;
  std::function<double(double)> lipschitz;

  Vec operator()(double t, const TorusPoint& w, std::span<const double> y) const { return eval(t, w, y); }
};

/// V_t(w, x) = (x, 0).
inline VectorField geodesic_field(int d) {
  return {[d](double, const TorusPoint&, std::span<const double> y) {
            Vec v(2 * d, 0.0);
            std::copy(y.begin(), y.end(), v.begin());
            return v;
          },
          [](double R) { return R; }, [](double) { return 1.0; }};
}

struct FieldAudit {
  double max_norm = 0.0;
  double max_lipschitz_ratio = 0.0;
  bool within_bounds = false;
};

/// Spot-checks the declared sup and Lipschitz bounds on B_R(0) by random sampling.
inline FieldAudit audit_vector_field(const VectorField& V, const TorusGeometry& g, double R, int samples,
                                     unsigned long seed = 7) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> cell(0.0, g.period), ball(-R, R), time(0.0, 1.0);
  const double sep = std::min(0.25 * g.period, std::max(R, 1e-3));
  std::uniform_real_distribution<double> small(-0.1 * sep, 0.1 * sep);
  auto random_y = [&]() {
    Vec y(g.dimension);
    do {
      for (auto& v : y) v = ball(rng);
    } while (norm(y) > R);
    return y;
  };
  FieldAudit a;
  for (int s = 0; s < samples; ++s) {
    const double t = time(rng);
    Vec w(g.dimension);
    for (auto& v : w) v = cell(rng);
    const TorusPoint omega = make_point(g, w);
    const Vec y = random_y();
    const Vec v1 = V(t, omega, y);
    a.max_norm = std::max(a.max_norm, norm(v1));
    Vec dz(g.dimension), dy(g.dimension);
    for (auto& v : dz) v = small(rng);
    Vec y2;
    do {
      for (auto& v : dy) v = small(rng);
      y2 = add(y, dy);
    } while (norm(y2) > R);
    const TorusPoint omega2 = shift(g, omega, dz);
    const double dist = dist_product(g, {omega, y}, {omega2, y2});
    if (dist > 0.0) a.max_lipschitz_ratio = std::max(a.max_lipschitz_ratio, norm(sub(V(t, omega2, y2), v1)) / dist);
  }
  a.within_bounds = a.max_norm <= V.sup_bound(R) * (1 + 1e-12) + 1e-15 &&
                    a.max_lipschitz_ratio <= V.lipschitz(R) * (1 + 1e-9) + 1e-12;
  return a;
}

/// Time-indexed product measures on a grid 0 = t_0 < ... < t_K = 1.
struct CurveOfMeasures {
  Vec times;
  std::vector<ProductMeasure> nodes;
  std::string interpolation = "nodal";

  std::size_t node_index(double t, double tol = 1e-12) const {
    for (std::size_t k = 0; k < times.size(); ++k)
      if (std::abs(times[k] - t) <= tol) return k;
    throw InvalidArgument("time " + std::to_string(t) + " is not a node of the curve");
  }

  /// max_k W_p(P_{t_k}, P_{t_{k+1}}), the weak-continuity surrogate.
  double max_adjacent_gap(double p) const {
    double worst = 0.0;
    for (std::size_t k = 0; k + 1 < nodes.size(); ++k)
      worst = std::max(worst, std::pow(wasserstein_product(nodes[k], nodes[k + 1], p).value, 1.0 / p));
    return worst;
  }
};

inline Vec uniform_time_grid(int intervals, double t_end = 1.0) {
  require(intervals >= 1, "time grid needs at least one interval");
  Vec t(intervals + 1);
  for (int k = 0; k <= intervals; ++k) t[k] = t_end * k / intervals;
  t.back() = t_end;
  return t;
}

namespace detail {

inline Vec trapezoid_weights(std::span<const double> t) {
  Vec w(t.size(), 0.0);
  for (std::size_t k = 0; k + 1 < t.size(); ++k) {
    const double h = t[k + 1] - t[k];
    w[k] += 0.5 * h;
    w[k + 1] += 0.5 * h;
  }
  return w;
}

inline void validate_grid(std::span<const double> t) {
  require(t.size() >= 2, "time grid needs at least two nodes");
  for (std::size_t k = 0; k + 1 < t.size(); ++k) require(t[k + 1] > t[k], "time grid must be increasing");
}

}  // namespace detail

/// | int_0^1 int (d_t Phi + <V_t, grad Phi_t>) dP_t dt |, trapezoidal in time,
/// exact finite sums in space.
inline double ce_residual(const CurveOfMeasures& curve, const VectorField& V, const TestFunction& phi) {
  detail::validate_grid(curve.times);
  require(curve.times.size() == curve.nodes.size(), "curve times and nodes differ in length");
  const auto& h = phi.time_bump();
  require(curve.times.front() <= h.lo && curve.times.back() >= h.hi, "curve does not cover the test function's time support");
  int inside = 0;
  double max_step = 0.0;
  for (std::size_t k = 0; k < curve.times.size(); ++k) {
    if (curve.times[k] > h.lo && curve.times[k] < h.hi) ++inside;
    if (k + 1 < curve.times.size()) max_step = std::max(max_step, curve.times[k + 1] - curve.times[k]);
  }
  require(inside >= 2 && max_step <= 0.5 * (h.hi - h.lo), "time grid is coarser than the test function's support");
  const int d = phi.geometry().dimension;
  const auto w = detail::trapezoid_weights(curve.times);
  double total = 0.0;
  for (std::size_t k = 0; k < curve.times.size(); ++k) {
    const double t = curve.times[k];
    double node_sum = 0.0;
    for (const auto& atom : curve.nodes[k].atoms) {
      const auto val = phi(t, atom.omega, atom.y);
      if (val.dt == 0.0 && norm2(val.grad_omega) == 0.0 && norm2(val.grad_y) == 0.0) continue;
      const Vec v = V(t, atom.omega, atom.y);
      double s = val.dt;
      for (int a = 0; a < d; ++a) s += v[a] * val.grad_omega[a] + v[d + a] * val.grad_y[a];
      node_sum += atom.mass * s;
    }
    total += w[k] * node_sum;
  }
  return std::abs(total);
}

// ---------------------------------------------------------------------------
// Characteristics

/// X_t = (U_t, W_t) in R^{2d}, with X_0 = (0, y).
struct CharacteristicPath {
  Vec times;
  std::vector<Vec> states;

  std::span<const double> u(std::size_t k, int d) const { return {states[k].data(), static_cast<std::size_t>(d)}; }
  std::span<const double> w(std::size_t k, int d) const {
    return {states[k].data() + d, static_cast<std::size_t>(d)};
  }
};

struct IntegratorOptions {
  bool adaptive = true;
  double tol = 1e-12;       // local error estimate per grid interval
  int max_depth = 24;       // maximal number of step halvings
};

namespace detail {

inline Vec characteristic_rhs(const VectorField& V, const TorusGeometry& g, const TorusPoint& omega, double t,
                              const Vec& X) {
  const int d = g.dimension;
  return V(t, shift(g, omega, std::span<const double>(X.data(), d)), std::span<const double>(X.data() + d, d));
}

inline Vec rk4_step(const VectorField& V, const TorusGeometry& g, const TorusPoint& omega, double t, double h,
                    const Vec& X) {
  const Vec k1 = characteristic_rhs(V, g, omega, t, X);
  const Vec k2 = characteristic_rhs(V, g, omega, t + 0.5 * h, add(X, scale(k1, 0.5 * h)));
  const Vec k3 = characteristic_rhs(V, g, omega, t + 0.5 * h, add(X, scale(k2, 0.5 * h)));
  const Vec k4 = characteristic_rhs(V, g, omega, t + h, add(X, scale(k3, h)));
  Vec out = X;
  for (std::size_t i = 0; i < X.size(); ++i) out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  return out;
}

inline Vec rk4_adaptive(const VectorField& V, const TorusGeometry& g, const TorusPoint& omega, double t, double h,
                        const Vec& X, const IntegratorOptions& opt, int depth) {
  const Vec full = rk4_step(V, g, omega, t, h, X);
  const Vec mid = rk4_step(V, g, omega, t, 0.5 * h, X);
  const Vec half = rk4_step(V, g, omega, t + 0.5 * h, 0.5 * h, mid);
  const double err = norm(sub(half, full)) / 15.0;
  if (err <= opt.tol) return half;
  if (depth >= opt.max_depth)
    throw ConvergenceError("characteristics: local error estimate exceeds tolerance", err);
  const Vec left = rk4_adaptive(V, g, omega, t, 0.5 * h, X, opt, depth + 1);
  return rk4_adaptive(V, g, omega, t + 0.5 * h, 0.5 * h, left, opt, depth + 1);
}

}  // namespace detail

/// Solves d/dt X = V_t(theta_U w, W), X_0 = (0, y) with classical RK4 on the
/// given grid; adaptive mode halves steps until the local estimate meets tol.
inline CharacteristicPath integrate_characteristics(const VectorField& V, const TorusGeometry& g,
                                                    const TorusPoint& omega, std::span<const double> y,
                                                    std::span<const double> times,
                                                    const IntegratorOptions& opt = {}) {
  detail::validate_grid(times);
  require(static_cast<int>(y.size()) == g.dimension, "initial y has wrong dimension");
  const int d = g.dimension;
  CharacteristicPath path{Vec(times.begin(), times.end()), {}};
  Vec X(2 * d, 0.0);
  std::copy(y.begin(), y.end(), X.begin() + d);
  path.states.push_back(X);
  for (std::size_t k = 0; k + 1 < times.size(); ++k) {
    const double h = times[k + 1] - times[k];
    X = opt.adaptive ? detail::rk4_adaptive(V, g, omega, times[k], h, X, opt, 0)
                     : detail::rk4_step(V, g, omega, times[k], h, X);
    path.states.push_back(X);
  }
  return path;
}

/// Image of P0 under Z_t(w, y) = (theta_{U_t} w, W_t), integrating on `steps` uniform intervals.
inline ProductMeasure pushforward_flow(const VectorField& V, const ProductMeasure& P0, double t, int steps = 64,
                                       const IntegratorOptions& opt = {}) {
  require(t >= 0.0, "pushforward time must be >= 0");
  if (t == 0.0) return P0;
  const auto grid = uniform_time_grid(steps, t);
  const int d = P0.geometry.dimension;
  ProductMeasure out{P0.geometry, {}};
  for (const auto& a : P0.atoms) {
    const auto path = integrate_characteristics(V, P0.geometry, a.omega, a.y, grid, opt);
    const auto& X = path.states.back();
    out.atoms.push_back({shift(P0.geometry, a.omega, std::span<const double>(X.data(), d)),
                         Vec(X.begin() + d, X.end()), a.mass});
  }
  return out;
}

struct SampledPath {
  TorusPoint omega;
  double mass = 0.0;
  CharacteristicPath path;
};

/// Path measure of the superposition principle. Atomic P0 with at most N atoms
/// is enumerated; otherwise N atoms are drawn by mass with a seeded generator.
inline std::vector<SampledPath> superposition_sample(const VectorField& V, const ProductMeasure& P0, std::size_t N,
                                                     std::span<const double> times, unsigned long seed = 0,
                                                     const IntegratorOptions& opt = {}) {
  require(N >= 1, "superposition_sample: N must be >= 1");
  std::vector<SampledPath> out;
  if (P0.atoms.size() <= N) {
    for (const auto& a : P0.atoms)
      out.push_back({a.omega, a.mass, integrate_characteristics(V, P0.geometry, a.omega, a.y, times, opt)});
    return out;
  }
  Vec masses;
  for (const auto& a : P0.atoms) masses.push_back(a.mass);
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(masses.begin(), masses.end());
  const double each = P0.total_mass() / static_cast<double>(N);
  for (std::size_t s = 0; s < N; ++s) {
    const auto& a = P0.atoms[pick(rng)];
    out.push_back({a.omega, each, integrate_characteristics(V, P0.geometry, a.omega, a.y, times, opt)});
  }
  return out;
}

/// F_t-image of the path measure at grid node k: (theta_{u_t} w, w_t).
inline ProductMeasure evaluate_paths(const TorusGeometry& g, std::span<const SampledPath> paths, std::size_t k) {
  ProductMeasure out{g, {}};
  for (const auto& s : paths) {
    const auto u = s.path.u(k, g.dimension);
    const auto w = s.path.w(k, g.dimension);
    out.atoms.push_back({shift(g, s.omega, u), Vec(w.begin(), w.end()), s.mass});
  }
  return out;
}

/// sum_paths m int_0^1 |dX/dt|^p dt with dX/dt = G(X) at the stored states, trapezoidal.
inline double path_action(const VectorField& V, const TorusGeometry& g, std::span<const SampledPath> paths, double p) {
  double total = 0.0;
  for (const auto& s : paths) {
    const auto w = detail::trapezoid_weights(s.path.times);
    double integral = 0.0;
    for (std::size_t k = 0; k < s.path.times.size(); ++k)
      integral += w[k] * pow_norm(detail::characteristic_rhs(V, g, s.omega, s.path.times[k], s.path.states[k]), p);
    total += s.mass * integral;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Geodesic and action

struct Geodesic {
  CurveOfMeasures curve;
  VectorField field;
};

/// P_t = E_{Q_xi}[ int delta_{(theta_{tz} w, z)} T(w, dz) ] on the grid, with V_t(w, x) = (x, 0).
inline Geodesic build_geodesic(const BalancingKernel& T, const PalmMeasure& palm_xi, std::span<const double> times,
                               const std::optional<PalmMeasure>& palm_eta = std::nullopt) {
  detail::validate_grid(times);
  require(std::abs(times.front()) <= 1e-15 && std::abs(times.back() - 1.0) <= 1e-15, "time grid must span [0, 1]");
  require_same_geometry(T.geometry, palm_xi.geometry);
  require(T.rows.size() == palm_xi.atoms.size(), "kernel rows do not match source Palm atoms");
  for (std::size_t i = 0; i < T.rows.size(); ++i) {
    const auto& r = T.rows[i];
    require(r.origin == palm_xi.atoms[i].point, "kernel row origin does not match source Palm atom");
    double s = 0.0;
    for (const auto& e : r.entries) {
      require(e.mass >= 0.0, "negative kernel mass");
      s += e.mass;
    }
    require(std::abs(s - 1.0) <= 1e-9, "kernel row masses must sum to one");
  }
  if (palm_eta) {
    const auto basis = indicator_basis(*palm_eta);
    const double v = verify_balancing(T, palm_xi, *palm_eta, basis);
    require(v <= 1e-9, "build_geodesic: kernel is not balancing (violation " + std::to_string(v) + ")");
  }
  const auto& g = T.geometry;
  Geodesic geo{{Vec(times.begin(), times.end()), {}, "displacement"}, geodesic_field(g.dimension)};
  for (double t : times) {
    ProductMeasure P{g, {}};
    for (std::size_t i = 0; i < T.rows.size(); ++i)
      for (const auto& e : T.rows[i].entries)
        P.atoms.push_back({shift(g, T.rows[i].origin, scale(e.z, t)), e.z, palm_xi.atoms[i].mass * e.mass});
    geo.curve.nodes.push_back(std::move(P));
  }
  return geo;
}

namespace detail {

inline double kinetic_density(const ProductMeasure& P, const VectorField& V, double t, double p) {
  double s = 0.0;
  for (const auto& a : P.atoms) s += a.mass * pow_norm(V(t, a.omega, a.y), p);
  return s;
}

}  // namespace detail

/// int_0^1 |V_t|^p_{L^p(P_t)} dt, trapezoidal on the curve's grid.
inline double action(const CurveOfMeasures& curve, const VectorField& V, double p) {
  require(std::isfinite(p) && p > 1.0, "exponent p must be > 1");
  detail::validate_grid(curve.times);
  require(curve.times.size() == curve.nodes.size(), "curve times and nodes differ in length");
  const auto w = detail::trapezoid_weights(curve.times);
  double total = 0.0;
  for (std::size_t k = 0; k < curve.times.size(); ++k)
    total += w[k] * detail::kinetic_density(curve.nodes[k], V, curve.times[k], p);
  return total;
}

/// The periodic configuration whose Palm measure is the Omega-marginal of P_t.
inline StationaryModel extract_xi_t(const CurveOfMeasures& curve, double t, double merge_tol = 1e-12) {
  const auto k = curve.node_index(t);
  const auto& P = curve.nodes[k];
  require(!P.atoms.empty(), "curve node is empty");
  const auto marginal = omega_marginal(P.geometry, P.atoms, merge_tol);
  const double vol = P.geometry.volume();
  std::vector<Vec> atoms;
  Vec weights;
  for (const auto& a : marginal) {
    if (!(std::isfinite(a.mass) && a.mass > 0.0))
      throw InvalidArgument("Omega-marginal is not realizable as a Palm measure: non-positive mass");
    atoms.push_back(a.point.coords);
    weights.push_back(a.mass * vol);
  }
  return PeriodicPointConfiguration(P.geometry, atoms, weights);
}

struct WeakContinuityBound {
  double measured = 0.0;  // c_p(xi_r, xi_t)
  double bound = 0.0;     // int_r^t |V_s|^p_{L^p(P_s)} ds
  bool holds = false;
};

inline WeakContinuityBound weak_continuity_bound(const CurveOfMeasures& curve, const VectorField& V, double p,
                                                 double r, double t) {
  require(r <= t, "weak_continuity_bound: r must not exceed t");
  WeakContinuityBound out;
  const auto kr = curve.node_index(r);
  const auto kt = curve.node_index(t);
  if (kr == kt) {
    out.holds = true;
    return out;
  }
  out.measured = cost_cp(extract_xi_t(curve, r), extract_xi_t(curve, t), p).cost;
  std::span<const double> sub_times(curve.times.data() + kr, kt - kr + 1);
  const auto w = detail::trapezoid_weights(sub_times);
  for (std::size_t k = kr; k <= kt; ++k)
    out.bound += w[k - kr] * detail::kinetic_density(curve.nodes[k], V, curve.times[k], p);
  out.holds = out.measured <= out.bound + 1e-9;
  return out;
}

}  // namespace palmot
