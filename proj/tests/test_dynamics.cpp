#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "oracles.hpp"
#include "palmot/dynamics.hpp"
#include "palmot/generators.hpp"
#include "palmot/verify.hpp"

using namespace palmot;

namespace {

constexpr double kPi = std::numbers::pi;
const TorusGeometry kLine2{1, 2.0};
const PeriodicPointConfiguration kLattice(kLine2, {Vec{0.0}, Vec{1.0}});
const PeriodicPointConfiguration kShifted(kLine2, {Vec{0.25}, Vec{1.25}});

VectorField constant_field(Vec v) {
  return {[v](double, const TorusPoint&, std::span<const double>) { return v; },
          [n = norm(v)](double) { return n; }, [](double) { return 0.0; }};
}

/// V_t(w, y) = (A sin(k w), 0) in d = 1.
VectorField sine_field(double A, double k) {
  return {[A, k](double, const TorusPoint& w, std::span<const double>) { return Vec{A * std::sin(k * w.coords[0]), 0.0}; },
          [A](double) { return std::abs(A); }, [A, k](double) { return std::abs(A * k); }};
}

Geodesic lattice_geodesic(int K) {
  const auto r = cost_cp(kLattice, kShifted, 2.0);
  return build_geodesic(r.kernel, palm_measure(kLattice), uniform_time_grid(K), palm_measure(kShifted));
}

double max_atom_gap(const ProductMeasure& a, const ProductMeasure& b) {
  if (a.atoms.size() != b.atoms.size()) return 1e300;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.atoms.size(); ++i) {
    worst = std::max(worst, torus_distance(a.geometry, a.atoms[i].omega, b.atoms[i].omega));
    worst = std::max(worst, norm(sub(a.atoms[i].y, b.atoms[i].y)));
    worst = std::max(worst, std::abs(a.atoms[i].mass - b.atoms[i].mass));
  }
  return worst;
}

}  // namespace

TEST(GaussHermite, Moments) {
  for (int n : {4, 8, 24, 64}) {
    const auto r = gauss_hermite(n);
    double m0 = 0, m2 = 0, m4 = 0;
    for (std::size_t i = 0; i < r.nodes.size(); ++i) {
      m0 += r.weights[i];
      m2 += r.weights[i] * r.nodes[i] * r.nodes[i];
      m4 += r.weights[i] * std::pow(r.nodes[i], 4);
    }
    EXPECT_NEAR(m0, std::sqrt(kPi), 1e-13);
    EXPECT_NEAR(m2, std::sqrt(kPi) / 2, 1e-13);
    EXPECT_NEAR(m4, 3 * std::sqrt(kPi) / 4, 1e-12);
  }
}

TEST(Mollifier, ConstantFunction) {
  const Mollifier M(kLine2, [](const TorusPoint&, std::span<const double>) { return 1.0; }, 0.01);
  const auto v = M(make_point(kLine2, Vec{0.3}), Vec{0.2});
  EXPECT_NEAR(v.value, 1.0, 1e-14);
  EXPECT_NEAR(v.grad_omega[0], 0.0, 1e-13);
  EXPECT_NEAR(v.grad_y[0], 0.0, 1e-13);
}

TEST(Mollifier, GaussianCosineIdentity) {
  const double L = 1.7, eps = 0.02, a = 2 * kPi / L;
  const TorusGeometry g(1, L);
  const Mollifier M(g, [a](const TorusPoint& w, std::span<const double>) { return std::cos(a * w.coords[0]); }, eps);
  for (double x : {0.0, 0.3, 0.9, 1.6}) {
    const auto v = M(make_point(g, Vec{x}), Vec{0.0});
    EXPECT_NEAR(v.value, oracle::gaussian_cosine(a, x, eps), 1e-13);
    EXPECT_NEAR(v.grad_omega[0], -a * std::exp(-0.5 * a * a * eps) * std::sin(a * x), 1e-12);
    EXPECT_NEAR(v.grad_y[0], 0.0, 1e-13);
  }
}

TEST(Mollifier, GaussianCosineInY) {
  const double eps = 0.05, b = 3.0;
  const Mollifier M(kLine2, [b](const TorusPoint&, std::span<const double> y) { return std::cos(b * y[0]); }, eps);
  const auto v = M(make_point(kLine2, Vec{0.0}), Vec{0.4});
  EXPECT_NEAR(v.value, oracle::gaussian_cosine(b, 0.4, eps), 1e-13);
  EXPECT_NEAR(v.grad_y[0], -b * std::exp(-0.5 * b * b * eps) * std::sin(b * 0.4), 1e-12);
}

TEST(Mollifier, TwoDimensionalProductIdentity) {
  const TorusGeometry g(2, 1.0);
  const double eps = 0.01, a = 2 * kPi, b = 4 * kPi;
  const Mollifier M(
      g, [&](const TorusPoint& w, std::span<const double>) { return std::cos(a * w.coords[0]) * std::cos(b * w.coords[1]); },
      eps, 16);
  const auto v = M(make_point(g, Vec{0.1, 0.35}), Vec{0.0, 0.0});
  EXPECT_NEAR(v.value, oracle::gaussian_cosine(a, 0.1, eps) * oracle::gaussian_cosine(b, 0.35, eps), 1e-12);
  EXPECT_LT(M.estimate_error(std::vector<TorusPoint>{make_point(g, Vec{0.1, 0.35})}, std::vector<Vec>{Vec{0, 0}}), 1e-10);
}

TEST(Mollifier, RejectsNonPositiveEps) {
  auto one = [](const TorusPoint&, std::span<const double>) { return 1.0; };
  EXPECT_THROW(Mollifier(kLine2, one, 0.0), InvalidArgument);
  EXPECT_THROW(make_test_function(kLine2, SpaceBump{Vec{0.0}, 1.0}, TimeBump{}, one, 1.0, -1.0), InvalidArgument);
}

TEST(TestFunction, SupportAndBounds) {
  gen::Rng rng(1);
  const auto phi = verify::random_test_function(kLine2, 1.0, rng);
  const auto& h = phi.time_bump();
  EXPECT_EQ(phi(0.5 * h.lo, make_point(kLine2, Vec{0.3}), Vec{0.0}).phi, 0.0);
  EXPECT_EQ(phi(0.5, make_point(kLine2, Vec{0.3}), Vec{1.5}).phi, 0.0);
  std::uniform_real_distribution<double> t(0.0, 1.0), w(0.0, 2.0), y(-1.2, 1.2);
  for (int s = 0; s < 500; ++s) {
    const auto v = phi(t(rng), make_point(kLine2, Vec{w(rng)}), Vec{y(rng)});
    EXPECT_LE(std::abs(v.dt), phi.derivative_bound());
    EXPECT_LE(norm(v.grad_omega), phi.derivative_bound());
    EXPECT_LE(norm(v.grad_y), phi.derivative_bound());
  }
}

TEST(TestFunction, TimeSupportMustBeInterior) {
  auto one = [](const TorusPoint&, std::span<const double>) { return 1.0; };
  EXPECT_THROW(make_test_function(kLine2, SpaceBump{Vec{0.0}, 1.0}, TimeBump{0.0, 0.5}, one, 1.0, 0.01), InvalidArgument);
  EXPECT_THROW(make_test_function(kLine2, SpaceBump{Vec{0.0}, 1.0}, TimeBump{0.5, 1.0}, one, 1.0, 0.01), InvalidArgument);
}

TEST(GradOmega, ConstantIsZero) {
  auto one = [](const TorusPoint&, std::span<const double>) { return 1.0; };
  const auto phi = make_test_function(kLine2, SpaceBump{Vec{0.0}, 1.0}, TimeBump{}, one, 1.0, 0.01);
  EXPECT_NEAR(grad_omega(phi, make_point(kLine2, Vec{0.7}), Vec{0.1}, 0.5)[0], 0.0, 1e-13);
  EXPECT_NEAR(grad_omega(phi, make_point(kLine2, Vec{0.7}), Vec{0.1}, 0.5, GradientMode::numeric)[0], 0.0, 1e-10);
}

TEST(GradOmega, LinearLocallyGivesSlope) {
  // sin is linear to first order at 0: the gradient there is the slope times the mollifier damping.
  const double a = 2 * kPi / 2.0, eps = 1e-4;
  auto f = [a](const TorusPoint& w, std::span<const double>) { return std::sin(a * w.coords[0]) / a; };
  const Mollifier M(kLine2, f, eps);
  EXPECT_NEAR(M(make_point(kLine2, Vec{0.0}), Vec{0.0}).grad_omega[0], std::exp(-0.5 * a * a * eps), 1e-12);
}

TEST(GradOmega, AnalyticMatchesFiniteDifferences) {
  gen::Rng rng(2);
  double worst = 0.0;
  for (int d = 1; d <= 2; ++d) {
    const TorusGeometry g(d, 1.5);
    const auto phi = verify::random_test_function(g, 1.0, rng);
    std::uniform_real_distribution<double> t(phi.time_bump().lo, phi.time_bump().hi), w(0.0, 1.5), y(-0.7, 0.7);
    for (int s = 0; s < 50; ++s) {
      Vec wc(d), yc(d);
      for (auto& v : wc) v = w(rng);
      for (auto& v : yc) v = y(rng);
      const double tt = t(rng);
      const auto an = grad_omega(phi, make_point(g, wc), yc, tt);
      const auto nu = grad_omega(phi, make_point(g, wc), yc, tt, GradientMode::numeric, 1e-4);
      worst = std::max(worst, norm(sub(an, nu)));
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(VectorFieldAudit, DeclaredBoundsHold) {
  EXPECT_TRUE(audit_vector_field(geodesic_field(2), TorusGeometry(2, 1.0), 2.0, 500).within_bounds);
  EXPECT_TRUE(audit_vector_field(sine_field(0.5, kPi), kLine2, 1.0, 500).within_bounds);
  auto lying = sine_field(0.5, kPi);
  lying.lipschitz = [](double) { return 0.1; };
  EXPECT_FALSE(audit_vector_field(lying, kLine2, 1.0, 500).within_bounds);
}

TEST(Characteristics, ConstantFieldIsExact) {
  const TorusGeometry g(2, 1.0);
  const auto path = integrate_characteristics(constant_field({0.3, -0.2, 0.0, 0.0}), g, make_point(g, Vec{0.1, 0.2}),
                                              Vec{0.5, 0.6}, uniform_time_grid(8));
  for (std::size_t k = 0; k < path.times.size(); ++k) {
    EXPECT_NEAR(path.u(k, 2)[0], 0.3 * path.times[k], 1e-15);
    EXPECT_NEAR(path.u(k, 2)[1], -0.2 * path.times[k], 1e-15);
    EXPECT_EQ(path.w(k, 2)[0], 0.5);
    EXPECT_EQ(path.w(k, 2)[1], 0.6);
  }
}

TEST(Characteristics, ZeroFieldStaysPut) {
  const auto path = integrate_characteristics(constant_field({0.0, 0.0}), kLine2, make_point(kLine2, Vec{0.4}), Vec{0.7},
                                              uniform_time_grid(4));
  for (const auto& X : path.states) {
    EXPECT_EQ(X[0], 0.0);
    EXPECT_EQ(X[1], 0.7);
  }
}

TEST(Characteristics, SineFlowMatchesClosedForm) {
  const double A = 0.8, k = kPi;
  const auto V = sine_field(A, k);
  for (double w0 : {0.1, 0.4, 0.77, 1.3}) {
    const auto path = integrate_characteristics(V, kLine2, make_point(kLine2, Vec{w0}), Vec{0.0}, uniform_time_grid(16));
    for (std::size_t s = 0; s < path.times.size(); ++s)
      EXPECT_NEAR(path.u(s, 1)[0], oracle::sine_flow(A, k, w0, path.times[s]), 1e-8);
  }
}

TEST(Characteristics, FourthOrderConvergence) {
  const double A = 0.8, k = kPi, w0 = 0.4;
  const auto V = sine_field(A, k);
  IntegratorOptions fixed;
  fixed.adaptive = false;
  std::vector<double> err;
  for (int K : {4, 8, 16}) {
    const auto path = integrate_characteristics(V, kLine2, make_point(kLine2, Vec{w0}), Vec{0.0}, uniform_time_grid(K), fixed);
    err.push_back(std::abs(path.u(K, 1)[0] - oracle::sine_flow(A, k, w0, 1.0)));
  }
  for (std::size_t i = 0; i + 1 < err.size(); ++i) {
    const double ratio = err[i] / err[i + 1];
    EXPECT_GE(ratio, 8.0);
    EXPECT_LE(ratio, 32.0);
  }
}

TEST(Characteristics, StepRejectionWhenToleranceUnreachable) {
  IntegratorOptions opt;
  opt.tol = 1e-30;
  opt.max_depth = 3;
  EXPECT_THROW(integrate_characteristics(sine_field(0.8, kPi), kLine2, make_point(kLine2, Vec{0.4}), Vec{0.0},
                                         uniform_time_grid(2), opt),
               ConvergenceError);
}

TEST(Pushforward, TimeZeroIsIdentity) {
  std::mt19937_64 rng(3);
  const auto P = lattice_geodesic(4).curve.nodes[0];
  const auto Q = pushforward_flow(sine_field(0.8, kPi), P, 0.0);
  ASSERT_EQ(Q.atoms.size(), P.atoms.size());
  for (std::size_t i = 0; i < P.atoms.size(); ++i) {
    EXPECT_EQ(Q.atoms[i].omega, P.atoms[i].omega);
    EXPECT_EQ(Q.atoms[i].y, P.atoms[i].y);
    EXPECT_EQ(Q.atoms[i].mass, P.atoms[i].mass);
  }
}

TEST(Pushforward, ConstantFieldPreservesUniformGridMarginal) {
  const TorusGeometry g(1, 1.0);
  const int n = 16;
  const auto P0 = palm_product(palm_measure(gen::lattice(g, n)));
  const auto P1 = pushforward_flow(constant_field({3.0 / n, 0.0}), P0, 1.0);
  const auto m0 = omega_marginal(g, P0.atoms, 1e-12), m1 = omega_marginal(g, P1.atoms, 1e-12);
  ASSERT_EQ(m0.size(), m1.size());
  for (const auto& a : m0) {
    double mass = 0.0;
    for (const auto& b : m1)
      if (torus_distance(g, a.point, b.point) <= 1e-12) mass += b.mass;
    EXPECT_NEAR(mass, a.mass, 1e-15);
  }
}

TEST(Pushforward, GeodesicFieldReproducesCurve) {
  const auto geo = lattice_geodesic(8);
  for (std::size_t k = 0; k < geo.curve.times.size(); ++k) {
    const auto Pt = pushforward_flow(geo.field, geo.curve.nodes[0], geo.curve.times[k]);
    EXPECT_LE(max_atom_gap(Pt, geo.curve.nodes[k]), 1e-9) << "t = " << geo.curve.times[k];
  }
  const auto P1 = pushforward_flow(geo.field, geo.curve.nodes[0], 1.0);
  for (std::size_t i = 0; i < P1.atoms.size(); ++i)
    EXPECT_LE(torus_distance(kLine2, P1.atoms[i].omega, kShifted.atoms()[i]), 1e-9);
}

TEST(Pushforward, NonlinearFieldReproducesIndependentOracle) {
  const TorusGeometry g(1, 2.0);
  const auto P0 = palm_product(palm_measure(gen::random_configuration(g, 5, *std::make_unique<gen::Rng>(4))));
  const auto P1 = pushforward_flow(sine_field(0.8, kPi), P0, 0.7);
  for (std::size_t i = 0; i < P0.atoms.size(); ++i) {
    const double w0 = P0.atoms[i].omega.coords[0];
    const auto expect = make_point(g, Vec{w0 + oracle::sine_flow(0.8, kPi, w0, 0.7)});
    EXPECT_LE(torus_distance(g, P1.atoms[i].omega, expect), 1e-9);
  }
}

TEST(Superposition, EnumerationMatchesPushforwardExactly) {
  const auto geo = lattice_geodesic(4);
  const auto V = sine_field(0.6, kPi);
  const auto times = uniform_time_grid(64);
  const auto paths = superposition_sample(V, geo.curve.nodes[0], 10, times);
  ASSERT_EQ(paths.size(), geo.curve.nodes[0].atoms.size());
  const auto image = evaluate_paths(kLine2, paths, 64);
  const auto flow = pushforward_flow(V, geo.curve.nodes[0], 1.0, 64);
  for (std::size_t i = 0; i < image.atoms.size(); ++i) {
    EXPECT_EQ(image.atoms[i].omega, flow.atoms[i].omega);
    EXPECT_EQ(image.atoms[i].y, flow.atoms[i].y);
    EXPECT_EQ(image.atoms[i].mass, flow.atoms[i].mass);
  }
}

TEST(Superposition, ZeroFieldGivesConstantPaths) {
  const auto P0 = lattice_geodesic(4).curve.nodes[0];
  for (const auto& s : superposition_sample(constant_field({0.0, 0.0}), P0, 2, uniform_time_grid(5)))
    for (const auto& X : s.path.states) EXPECT_EQ(X, s.path.states.front());
}

TEST(Superposition, PathActionEqualsFieldAction) {
  const auto geo = lattice_geodesic(8);
  const auto paths = superposition_sample(geo.field, geo.curve.nodes[0], 100, geo.curve.times);
  EXPECT_NEAR(path_action(geo.field, kLine2, paths, 2.0), action(geo.curve, geo.field, 2.0), 1e-9);
}

TEST(Superposition, SamplingIsSeededAndMassPreserving) {
  const TorusGeometry g(1, 1.0);
  const auto P0 = palm_product(palm_measure(gen::lattice(g, 20)));
  const auto a = superposition_sample(constant_field({0.1, 0.0}), P0, 7, uniform_time_grid(2), 5);
  const auto b = superposition_sample(constant_field({0.1, 0.0}), P0, 7, uniform_time_grid(2), 5);
  ASSERT_EQ(a.size(), 7u);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].omega, b[i].omega);
    total += a[i].mass;
  }
  EXPECT_NEAR(total, P0.total_mass(), 1e-14);
}

TEST(Geodesic, DiracKernelIsStatic) {
  const auto q = palm_measure(kLattice);
  BalancingKernel T{kLine2, {}};
  for (const auto& a : q.atoms) T.rows.push_back({a.point, a.mass, {{Vec{0.0}, 1.0}}});
  const auto geo = build_geodesic(T, q, uniform_time_grid(4), q);
  for (const auto& node : geo.curve.nodes) EXPECT_EQ(max_atom_gap(node, geo.curve.nodes[0]), 0.0);
  EXPECT_EQ(action(geo.curve, geo.field, 2.0), 0.0);
}

TEST(Geodesic, ShiftedLatticeActionAndEndpoints) {
  const auto geo = lattice_geodesic(8);
  EXPECT_NEAR(action(geo.curve, geo.field, 2.0), 0.0625, 1e-15);
  const auto m1 = omega_marginal(kLine2, geo.curve.nodes.back().atoms);
  const auto qe = palm_measure(kShifted);
  ASSERT_EQ(m1.size(), qe.atoms.size());
  for (std::size_t i = 0; i < m1.size(); ++i) {
    EXPECT_LE(torus_distance(kLine2, m1[i].point, qe.atoms[i].point), 1e-15);
    EXPECT_EQ(m1[i].mass, qe.atoms[i].mass);
  }
  for (const auto& node : geo.curve.nodes) EXPECT_NEAR(node.total_mass(), intensity(kLattice), 1e-15);
}

TEST(Geodesic, NonBalancingKernelRejected) {
  auto r = cost_cp(kLattice, kShifted, 2.0);
  r.kernel.rows[1].entries[0].z[0] = 0.5;
  EXPECT_THROW(build_geodesic(r.kernel, palm_measure(kLattice), uniform_time_grid(4), palm_measure(kShifted)),
               InvalidArgument);
}

TEST(Geodesic, AdjacentGapsVanishUnderRefinement) {
  double prev = 1e300;
  for (int K : {4, 8, 16, 32}) {
    const double gap = lattice_geodesic(K).curve.max_adjacent_gap(2.0);
    EXPECT_LT(gap, prev);
    prev = gap;
  }
  EXPECT_LT(prev, 0.01);
}

TEST(Action, ZeroField) {
  const auto geo = lattice_geodesic(4);
  EXPECT_EQ(action(geo.curve, constant_field({0.0, 0.0}), 2.0), 0.0);
}

TEST(Action, TimeRescaledCurveCostsMore) {
  // Same path traversed as s(t) = t^2: speed 2t instead of 1.
  const auto r = cost_cp(kLattice, kShifted, 2.0);
  const auto qx = palm_measure(kLattice);
  const auto times = uniform_time_grid(256);
  CurveOfMeasures curve{times, {}, "rescaled"};
  for (double t : times) {
    ProductMeasure P{kLine2, {}};
    for (std::size_t i = 0; i < r.kernel.rows.size(); ++i)
      for (const auto& e : r.kernel.rows[i].entries)
        P.atoms.push_back({shift(kLine2, r.kernel.rows[i].origin, scale(e.z, t * t)), e.z, qx.atoms[i].mass * e.mass});
    curve.nodes.push_back(P);
  }
  const VectorField V{[](double t, const TorusPoint&, std::span<const double> y) { return Vec{2.0 * t * y[0], 0.0}; },
                      [](double R) { return 2 * R; }, [](double) { return 2.0; }};
  gen::Rng rng(12);
  const auto phi = verify::random_test_function(kLine2, 1.0, rng);
  EXPECT_LE(ce_residual(curve, V, phi), 1e-4);
  const double rescaled = action(curve, V, 2.0);
  // Trapezoid error is h^2/12 * (f'(1) - f'(0)) with f = 0.25 t^2.
  EXPECT_NEAR(rescaled, 0.0625 * 4.0 / 3.0, 1e-5);
  EXPECT_GT(rescaled, action(lattice_geodesic(256).curve, geodesic_field(1), 2.0) + 0.02);
}

TEST(Action, FeasibleKernelsNeverBeatStaticCost) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 30; ++t) {
    const TorusGeometry g(1 + t % 2, 1.2);
    const auto xi = gen::random_configuration(g, 4, rng), eta = gen::random_configuration(g, 4, rng);
    const auto opt = cost_cp(xi, eta, 2.0);
    const auto qx = palm_measure(xi), qe = palm_measure(eta);
    EXPECT_NEAR(action(build_geodesic(opt.kernel, qx, uniform_time_grid(4), qe).curve, geodesic_field(g.dimension), 2.0),
                opt.cost, 1e-12);
    // A fixed permutation is feasible but generally not optimal.
    std::vector<std::size_t> perm{1, 2, 3, 0};
    TransportPlan plan{Matrix(4, 4), xi.weights(), eta.weights()};
    for (std::size_t i = 0; i < 4; ++i) plan.plan(i, perm[i]) = 1.0;
    const auto T = plan_to_balancing_kernel(plan, opt.cost_matrix, qx);
    const auto geo = build_geodesic(T, qx, uniform_time_grid(4), qe);
    EXPECT_GE(action(geo.curve, geo.field, 2.0), opt.cost - 1e-9);
  }
}

TEST(CeResidual, StaticCurveZeroField) {
  gen::Rng rng(7);
  const auto phi = verify::random_test_function(kLine2, 2.0, rng);
  const auto times = uniform_time_grid(512);
  const auto P0 = lattice_geodesic(1).curve.nodes[0];
  CurveOfMeasures curve{times, std::vector<ProductMeasure>(times.size(), P0), "static"};
  EXPECT_LE(ce_residual(curve, constant_field({0.0, 0.0}), phi), 1e-10);
}

TEST(CeResidual, GeodesicDecaysAtSecondOrder) {
  gen::Rng rng(8);
  for (int f = 0; f < 5; ++f) {
    auto [xi, eta] = verify::random_pair(rng, 1, 3);
    const auto r = cost_cp(xi, eta, 2.0);
    const auto phi = verify::random_test_function(xi.geometry(), xi.geometry().period, rng);
    const auto study = verify::refinement_study(r.kernel, palm_measure(xi), phi);
    EXPECT_GE(study.order, 2.0) << "fixture " << f;
    EXPECT_LT(study.residuals[2], study.residuals[0]) << "fixture " << f;
  }
}

TEST(CeResidual, CorruptedCurveStaysAwayFromZero) {
  gen::Rng rng(9);
  auto [xi, eta] = verify::random_pair(rng, 1, 3);
  const auto r = cost_cp(xi, eta, 2.0);
  const auto phi = verify::random_test_function(xi.geometry(), xi.geometry().period, rng);
  const auto clean = verify::refinement_study(r.kernel, palm_measure(xi), phi);
  const auto bad = verify::refinement_study(r.kernel, palm_measure(xi), phi, 8, true);
  EXPECT_GT(bad.residuals.back(), 100.0 * clean.residuals.back());
  EXPECT_GT(bad.residuals.back(), 0.5 * bad.residuals.front());
}

TEST(CeResidual, GridCoarserThanSupportRejected) {
  const auto one = [](const TorusPoint&, std::span<const double>) { return 1.0; };
  const auto phi = make_test_function(kLine2, SpaceBump{Vec{0.0}, 1.0}, TimeBump{0.4, 0.6}, one, 1.0, 0.01);
  const auto geo = lattice_geodesic(4);
  EXPECT_THROW(ce_residual(geo.curve, geo.field, phi), InvalidArgument);
}

TEST(Extract, EndpointsAndMidpoint) {
  const auto geo = lattice_geodesic(4);
  const auto x0 = std::get<PeriodicPointConfiguration>(extract_xi_t(geo.curve, 0.0));
  const auto x1 = std::get<PeriodicPointConfiguration>(extract_xi_t(geo.curve, 1.0));
  const auto xm = std::get<PeriodicPointConfiguration>(extract_xi_t(geo.curve, 0.5));
  EXPECT_LE(configuration_mismatch(x0, kLattice), 1e-12);
  EXPECT_LE(configuration_mismatch(x1, kShifted), 1e-12);
  EXPECT_LE(configuration_mismatch(xm, PeriodicPointConfiguration(kLine2, {Vec{0.125}, Vec{1.125}})), 1e-12);
}

TEST(Extract, PalmRoundTrip) {
  std::mt19937_64 rng(10);
  const TorusGeometry g(2, 1.3);
  const auto xi = gen::random_configuration(g, 4, rng, true), eta = gen::random_configuration(g, 4, rng, true);
  const auto r = cost_cp(xi, eta, 2.0);
  const auto geo = build_geodesic(r.kernel, palm_measure(xi), uniform_time_grid(4));
  for (double t : geo.curve.times) {
    const auto q = palm_measure(extract_xi_t(geo.curve, t));
    const auto m = omega_marginal(g, geo.curve.nodes[geo.curve.node_index(t)].atoms);
    ASSERT_EQ(q.atoms.size(), m.size());
    for (const auto& a : m) {
      double mass = -1.0;
      for (const auto& b : q.atoms)
        if (torus_distance(g, a.point, b.point) <= 1e-12) mass = b.mass;
      EXPECT_NEAR(mass, a.mass, 1e-12);
    }
  }
}

TEST(Extract, NonRealizableMarginalRejected) {
  auto geo = lattice_geodesic(2);
  geo.curve.nodes[1].atoms[0].mass = -0.5;
  EXPECT_THROW(extract_xi_t(geo.curve, 0.5), InvalidArgument);
  EXPECT_THROW(extract_xi_t(geo.curve, 0.3), InvalidArgument);
}

TEST(WeakContinuity, ClosedForms) {
  const auto geo = lattice_geodesic(8);
  const auto same = weak_continuity_bound(geo.curve, geo.field, 2.0, 0.5, 0.5);
  EXPECT_EQ(same.measured, 0.0);
  EXPECT_EQ(same.bound, 0.0);
  const auto full = weak_continuity_bound(geo.curve, geo.field, 2.0, 0.0, 1.0);
  EXPECT_NEAR(full.measured, 0.0625, 1e-15);
  EXPECT_NEAR(full.bound, 0.0625, 1e-15);
  EXPECT_TRUE(full.holds);
  const auto half = weak_continuity_bound(geo.curve, geo.field, 2.0, 0.0, 0.5);
  EXPECT_NEAR(half.measured, 0.125 * 0.125, 1e-15);
  EXPECT_NEAR(half.bound, 0.0625 / 2, 1e-15);
  EXPECT_TRUE(half.holds);
}

TEST(WeakContinuity, HoldsOnRandomGeodesics) {
  std::mt19937_64 rng(11);
  for (int f = 0; f < 10; ++f) {
    const TorusGeometry g(1 + f % 2, 1.0);
    const auto xi = gen::random_configuration(g, 3, rng), eta = gen::random_configuration(g, 3, rng);
    const auto r = cost_cp(xi, eta, 2.0);
    const auto geo = build_geodesic(r.kernel, palm_measure(xi), uniform_time_grid(8));
    for (double a : {0.0, 0.25, 0.5})
      for (double b : {0.625, 1.0}) EXPECT_TRUE(weak_continuity_bound(geo.curve, geo.field, 2.0, a, b).holds);
  }
}
