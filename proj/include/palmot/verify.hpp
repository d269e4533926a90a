#pragma once

// Seeded property suite behind the `verify` command.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "palmot/dynamics.hpp"
#include "palmot/generators.hpp"
#include "palmot/palm_wasserstein.hpp"
#include "palmot/torus.hpp"
#include "palmot/transport.hpp"

namespace palmot::verify {

struct PropertyResult {
  std::string name;
  double measured = 0.0;  // worst case over fixtures
  double tolerance = 0.0;
  bool pass = false;
  int fixtures = 0;
  std::string detail;
};

struct SuiteOptions {
  unsigned long seed = 1;
  int fixtures = 10;
  double p = 2.0;
  bool corrupt = false;  // inject a known defect; the property is then expected to fail
};

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"campbell", "balancing", "equality", "ce_refinement", "triangle"};
  return names;
}

/// A random equal-intensity pair of point configurations with n atoms each.
inline std::pair<PeriodicPointConfiguration, PeriodicPointConfiguration> random_pair(gen::Rng& rng, int d, int n,
                                                                                     bool random_weights = false) {
  std::uniform_real_distribution<double> per(1.0, 3.0);
  const TorusGeometry g(d, per(rng));
  return {gen::random_configuration(g, n, rng, random_weights), gen::random_configuration(g, n, rng, random_weights)};
}

inline PropertyResult campbell(const SuiteOptions& opt, int resolution = 2048) {
  gen::Rng rng(opt.seed);
  PropertyResult r{"campbell", 0.0, 1e-8, true, opt.fixtures, ""};
  for (int f = 0; f < opt.fixtures; ++f) {
    std::uniform_int_distribution<int> nd(1, 5);
    const TorusGeometry g(1, std::uniform_real_distribution<double>(1.0, 3.0)(rng));
    const auto model = gen::random_configuration(g, nd(rng), rng, true);
    const auto integrand = gen::random_integrand(g, rng);
    CampbellQuadrature q{resolution, {}, 5e7};
    q.z_support.lo = sub(integrand.center, Vec(1, integrand.radius));
    q.z_support.hi = add(integrand.center, Vec(1, integrand.radius));
    // Truncating the declared support drops mass from both sides unequally.
    if (opt.corrupt) q.z_support.hi[0] = integrand.center[0];
    const auto c = campbell_check(model, integrand, q);
    r.measured = std::max(r.measured, c.gap);
  }
  r.pass = r.measured <= r.tolerance;
  return r;
}

inline PropertyResult balancing(const SuiteOptions& opt) {
  gen::Rng rng(opt.seed + 1);
  PropertyResult r{"balancing", 0.0, 1e-12, true, opt.fixtures, ""};
  for (int f = 0; f < opt.fixtures; ++f) {
    std::uniform_int_distribution<int> nd(1, 6), dd(1, 2);
    auto [xi, eta] = random_pair(rng, dd(rng), nd(rng), f % 2 == 1);
    const auto s = cost_cp(xi, eta, opt.p);
    auto kernel = s.kernel;
    if (opt.corrupt) {
      auto& row = kernel.rows.front();
      row.entries.front().z = add(row.entries.front().z, Vec(xi.geometry().dimension, 0.1 * xi.geometry().period));
    }
    const auto qx = palm_measure(xi), qe = palm_measure(eta);
    r.measured = std::max(r.measured, verify_balancing(kernel, qx, qe, indicator_basis(qe)));
  }
  r.pass = r.measured <= r.tolerance;
  return r;
}

inline PropertyResult equality(const SuiteOptions& opt) {
  gen::Rng rng(opt.seed + 2);
  PropertyResult r{"equality", 0.0, 1e-9, true, opt.fixtures, ""};
  int inequality_failures = 0;
  for (int f = 0; f < opt.fixtures; ++f) {
    std::uniform_int_distribution<int> nd(1, 5), dd(1, 2);
    auto [xi, eta] = random_pair(rng, dd(rng), nd(rng), f % 2 == 1);
    StationaryModel target = eta;
    if (opt.corrupt) target = shifted(eta, Vec(eta.geometry().dimension, 0.05));
    const auto e = check_equality_cp_inf(xi, eta, opt.p, r.tolerance);
    double gap = e.gap;
    if (opt.corrupt) gap = std::abs(cost_cp(xi, target, opt.p).cost - e.product_wasserstein);
    r.measured = std::max(r.measured, gap);
    if (!(e.kernel_to_coupling_le && e.coupling_to_kernel_le)) ++inequality_failures;
  }
  r.detail = "conversion inequality failures: " + std::to_string(inequality_failures);
  r.pass = r.measured <= r.tolerance && inequality_failures == 0;
  return r;
}

/// Residuals of the geodesic against one mollified test function on K, 2K, 4K intervals.
struct RefinementStudy {
  std::vector<int> intervals;
  Vec residuals;
  Vec orders;         // per doubling
  double order = 0.0;  // least-squares slope over all three levels
};

inline TestFunction random_test_function(const TorusGeometry& g, double reach, gen::Rng& rng, double eps = 0.01) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double lo = 0.05 + 0.2 * u(rng);
  const double hi = 0.75 + 0.2 * u(rng);
  const double a = 0.2 + 0.6 * u(rng), phase = 2.0 * std::numbers::pi * u(rng);
  std::vector<int> k(g.dimension);
  for (auto& v : k) v = 1 + static_cast<int>(2.0 * u(rng));
  Vec c(g.dimension);
  for (auto& v : c) v = u(rng);
  const double L = g.period;
  OmegaSpaceFunction f = [=](const TorusPoint& w, std::span<const double> y) {
    double arg = phase;
    for (std::size_t i = 0; i < k.size(); ++i) arg += 2.0 * std::numbers::pi * k[i] * w.coords[i] / L + c[i] * y[i];
    return 1.0 + a * std::cos(arg);
  };
  SpaceBump gb{Vec(g.dimension, 0.0), reach, 1.0};
  return make_test_function(g, gb, TimeBump{lo, hi, 1.0}, f, 1.0 + a, eps);
}

inline RefinementStudy refinement_study(const BalancingKernel& T, const PalmMeasure& palm_xi, const TestFunction& phi,
                                        int base = 128, bool corrupt = false) {
  RefinementStudy s;
  for (int level = 0; level < 3; ++level) {
    const int K = base << level;
    auto geo = build_geodesic(T, palm_xi, uniform_time_grid(K));
    // A jump at t = 1/2 breaks the continuity equation; a uniform shift would not.
    if (corrupt)
      for (std::size_t k = 0; k < geo.curve.nodes.size(); ++k) {
        if (geo.curve.times[k] <= 0.5) continue;
        auto& node = geo.curve.nodes[k];
        for (auto& a : node.atoms) a.omega = shift(node.geometry, a.omega, Vec(node.geometry.dimension, 0.05));
      }
    s.intervals.push_back(K);
    s.residuals.push_back(ce_residual(geo.curve, geo.field, phi));
  }
  for (int k = 0; k + 1 < 3; ++k) s.orders.push_back(std::log2(s.residuals[k] / s.residuals[k + 1]));
  // Per-doubling ratios oscillate before the decay settles; the fit over three
  // equispaced levels reduces to the end-to-end ratio.
  s.order = 0.5 * std::log2(s.residuals[0] / s.residuals[2]);
  return s;
}

inline PropertyResult ce_refinement(const SuiteOptions& opt) {
  gen::Rng rng(opt.seed + 3);
  PropertyResult r{"ce_refinement", 1e300, 2.0, true, opt.fixtures, ""};
  for (int f = 0; f < opt.fixtures; ++f) {
    std::uniform_int_distribution<int> nd(1, 4);
    auto [xi, eta] = random_pair(rng, 1, nd(rng));
    const auto s = cost_cp(xi, eta, opt.p);
    const auto qx = palm_measure(xi);
    const auto phi = random_test_function(xi.geometry(), xi.geometry().period, rng);
    const auto study = refinement_study(s.kernel, qx, phi, 128, opt.corrupt);
    r.measured = std::min(r.measured, study.order);
  }
  r.detail = "measured is the smallest observed order; pass requires >= tolerance";
  r.pass = r.measured >= r.tolerance;
  return r;
}

inline PropertyResult triangle(const SuiteOptions& opt) {
  gen::Rng rng(opt.seed + 4);
  PropertyResult r{"triangle", 0.0, 1e-9, true, opt.fixtures, ""};
  double asym = 0.0;
  for (int f = 0; f < opt.fixtures; ++f) {
    std::uniform_int_distribution<int> nd(1, 5), dd(1, 2);
    const int d = dd(rng), n = nd(rng);
    const TorusGeometry g(d, std::uniform_real_distribution<double>(1.0, 3.0)(rng));
    const auto a = gen::random_configuration(g, n, rng), b = gen::random_configuration(g, n, rng),
               c = gen::random_configuration(g, n, rng);
    const double root = opt.corrupt ? 1.0 : 1.0 / opt.p;
    auto dist = [&](const PeriodicPointConfiguration& x, const PeriodicPointConfiguration& y) {
      return std::pow(cost_cp(x, y, opt.p).cost, root);
    };
    const double ab = dist(a, b), bc = dist(b, c), ac = dist(a, c);
    asym = std::max(asym, std::abs(ab - dist(b, a)));
    r.measured = std::max(r.measured, ac - ab - bc);
  }
  r.detail = "symmetry gap " + std::to_string(asym);
  r.pass = r.measured <= r.tolerance && asym <= 1e-12;
  return r;
}

inline PropertyResult run(const std::string& name, const SuiteOptions& opt) {
  if (name == "campbell") return campbell(opt);
  if (name == "balancing") return balancing(opt);
  if (name == "equality") return equality(opt);
  if (name == "ce_refinement") return ce_refinement(opt);
  if (name == "triangle") return triangle(opt);
  throw InvalidArgument("unknown property suite '" + name + "'");
}

}  // namespace palmot::verify
