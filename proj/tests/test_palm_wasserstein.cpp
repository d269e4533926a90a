#include <gtest/gtest.h>

#include <random>

#include "palmot/generators.hpp"
#include "palmot/palm_wasserstein.hpp"

using namespace palmot;

namespace {

const TorusGeometry kLine2{1, 2.0};
const PeriodicPointConfiguration kLattice(kLine2, {Vec{0.0}, Vec{1.0}});
const PeriodicPointConfiguration kShifted(kLine2, {Vec{0.25}, Vec{1.25}});

ProductMeasure random_product(const TorusGeometry& g, int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, g.period), y(-1.0, 1.0), m(0.5, 1.5);
  ProductMeasure P{g, {}};
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    Vec w(g.dimension), v(g.dimension);
    for (auto& x : w) x = u(rng);
    for (auto& x : v) x = y(rng);
    P.atoms.push_back({make_point(g, w), v, m(rng)});
    total += P.atoms.back().mass;
  }
  for (auto& a : P.atoms) a.mass /= total;
  return P;
}

}  // namespace

TEST(WassersteinProduct, IdenticalIsZero) {
  std::mt19937_64 rng(1);
  const auto P = random_product(kLine2, 5, rng);
  EXPECT_EQ(wasserstein_product(P, P, 2.0).value, 0.0);
}

TEST(WassersteinProduct, ShiftedLatticeEqualsStaticCost) {
  const auto W = wasserstein_product(palm_product(palm_measure(kLattice)), palm_product(palm_measure(kShifted)), 2.0);
  EXPECT_NEAR(W.value, 0.0625, 1e-15);
  EXPECT_NEAR(W.value, cost_cp(kLattice, kShifted, 2.0).cost, 1e-15);
}

TEST(WassersteinProduct, SingleAtoms) {
  const TorusGeometry g(2, 1.0);
  const ProductMeasure P0{g, {{make_point(g, Vec{0.1, 0.2}), Vec{0.3, 0.0}, 1.0}}};
  const ProductMeasure P1{g, {{make_point(g, Vec{0.9, 0.6}), Vec{-0.1, 0.5}, 1.0}}};
  const double d = dist_product(g, {P0.atoms[0].omega, P0.atoms[0].y}, {P1.atoms[0].omega, P1.atoms[0].y});
  EXPECT_NEAR(wasserstein_product(P0, P1, 3.0).value, d * d * d, 1e-15);
}

TEST(WassersteinProduct, MassMismatchRejected) {
  const ProductMeasure P0{kLine2, {{make_point(kLine2, Vec{0.0}), Vec{0.0}, 1.0}}};
  const ProductMeasure P1{kLine2, {{make_point(kLine2, Vec{0.0}), Vec{0.0}, 0.5}}};
  EXPECT_THROW(wasserstein_product(P0, P1, 2.0), InvalidArgument);
  const TorusGeometry g3(1, 3.0);
  const ProductMeasure P2{g3, {{make_point(g3, Vec{0.0}), Vec{0.0}, 1.0}}};
  EXPECT_THROW(wasserstein_product(P0, P2, 2.0), InvalidArgument);
}

TEST(WassersteinProduct, MetricOnRandomTriples) {
  std::mt19937_64 rng(2);
  double asym = 0.0, slack = -1e300;
  for (int t = 0; t < 100; ++t) {
    const TorusGeometry g(1 + t % 2, 1.5);
    const auto A = random_product(g, 4, rng), B = random_product(g, 3, rng), C = random_product(g, 5, rng);
    auto W = [](const ProductMeasure& x, const ProductMeasure& y) { return std::sqrt(wasserstein_product(x, y, 2.0).value); };
    asym = std::max(asym, std::abs(W(A, B) - W(B, A)));
    slack = std::max(slack, W(A, C) - W(A, B) - W(B, C));
  }
  EXPECT_EQ(asym, 0.0);
  EXPECT_LE(slack, 1e-9);
}

TEST(KernelToCoupling, DiracKernelGivesDiagonal) {
  const auto q = palm_measure(kLattice);
  BalancingKernel T{kLine2, {}};
  for (const auto& a : q.atoms) T.rows.push_back({a.point, a.mass, {{Vec{0.0}, 1.0}}});
  const auto U = kernel_to_coupling(T, q, q);
  EXPECT_EQ(U.cost(2.0), 0.0);
  for (const auto& a : U.atoms) EXPECT_EQ(a.from.omega, a.to.omega);
}

TEST(KernelToCoupling, ShiftedLatticeCost) {
  const auto r = cost_cp(kLattice, kShifted, 2.0);
  const auto U = kernel_to_coupling(r.kernel, palm_measure(kLattice), palm_measure(kShifted));
  EXPECT_NEAR(U.cost(2.0), 0.0625, 1e-15);
}

TEST(KernelToCoupling, LongDisplacementIsShortenedByTorusMetric) {
  const TorusGeometry g(1, 1.0);
  const PeriodicPointConfiguration xi(g, {Vec{0.1}});
  const auto q = palm_measure(xi);
  BalancingKernel T{g, {{q.atoms[0].point, q.atoms[0].mass, {{Vec{0.8}, 1.0}}}}};
  const auto U = kernel_to_coupling(T, q);
  EXPECT_NEAR(T.cost(2.0), 0.64, 1e-15);
  EXPECT_NEAR(U.cost(2.0), 0.04, 1e-14);
  EXPECT_LT(U.cost(2.0), T.cost(2.0));
}

TEST(KernelToCoupling, NonBalancingKernelRejected) {
  auto r = cost_cp(kLattice, kShifted, 2.0);
  r.kernel.rows[0].entries[0].z[0] += 0.1;
  EXPECT_THROW(kernel_to_coupling(r.kernel, palm_measure(kLattice), palm_measure(kShifted)), InvalidArgument);
}

TEST(KernelToCoupling, MarginalsArePalmMeasures) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 30; ++t) {
    const TorusGeometry g(1 + t % 2, 1.2);
    const auto xi = gen::random_configuration(g, 4, rng, true), eta = gen::random_configuration(g, 4, rng, true);
    const auto r = cost_cp(xi, eta, 2.0);
    const auto qx = palm_measure(xi), qe = palm_measure(eta);
    const auto U = kernel_to_coupling(r.kernel, qx, qe);
    std::vector<ProductAtom> from, to;
    for (const auto& a : U.atoms) {
      from.push_back({a.from.omega, a.from.y, a.mass});
      to.push_back({a.to.omega, a.to.y, a.mass});
    }
    for (const auto& [marg, palm] : {std::pair{omega_marginal(g, from, 1e-9), qx}, std::pair{omega_marginal(g, to, 1e-9), qe}}) {
      ASSERT_EQ(marg.size(), palm.atoms.size());
      for (const auto& atom : palm.atoms) {
        double m = 0.0;
        for (const auto& x : marg)
          if (torus_distance(g, x.point, atom.point) <= 1e-9) m += x.mass;
        EXPECT_NEAR(m, atom.mass, 1e-14);
      }
    }
  }
}

TEST(CouplingToKernel, DiagonalGivesDirac) {
  const auto q = palm_measure(kLattice);
  const auto U = wasserstein_product(palm_product(q), palm_product(q), 2.0).coupling;
  const auto T = coupling_to_kernel(U);
  for (const auto& row : T.rows) {
    ASSERT_EQ(row.entries.size(), 1u);
    EXPECT_EQ(row.entries[0].z[0], 0.0);
  }
}

TEST(CouplingToKernel, RoundTripForShortDisplacements) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 30; ++t) {
    const TorusGeometry g(1 + t % 2, 1.0);
    const auto xi = gen::random_configuration(g, 3, rng), eta = gen::random_configuration(g, 3, rng);
    const auto r = cost_cp(xi, eta, 2.0);
    const auto qx = palm_measure(xi);
    const auto back = align_rows(coupling_to_kernel(kernel_to_coupling(r.kernel, qx)), qx);
    ASSERT_EQ(back.rows.size(), r.kernel.rows.size());
    for (std::size_t i = 0; i < back.rows.size(); ++i) {
      ASSERT_EQ(back.rows[i].entries.size(), r.kernel.rows[i].entries.size());
      EXPECT_NEAR(back.rows[i].palm_mass, r.kernel.rows[i].palm_mass, 1e-15);
      for (std::size_t e = 0; e < back.rows[i].entries.size(); ++e)
        EXPECT_LE(norm(sub(back.rows[i].entries[e].z, r.kernel.rows[i].entries[e].z)), 1e-12);
    }
  }
}

TEST(CouplingToKernel, ShiftedLatticeOptimalCoupling) {
  const auto W = wasserstein_product(palm_product(palm_measure(kLattice)), palm_product(palm_measure(kShifted)), 2.0);
  EXPECT_NEAR(coupling_to_kernel(W.coupling).cost(2.0), 0.0625, 1e-15);
}

TEST(CouplingToKernel, NeverIncreasesCost) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const TorusGeometry g(1 + t % 2, 1.1);
    const auto A = random_product(g, 4, rng), B = random_product(g, 4, rng);
    const auto U = wasserstein_product(A, B, 2.0).coupling;
    // Kernel cost ignores the y offsets, so it is bounded by the Omega part of U's cost.
    EXPECT_LE(coupling_to_kernel(U).cost(2.0), U.cost(2.0) + 1e-12);
  }
}

TEST(Equality, Examples) {
  const auto same = check_equality_cp_inf(kLattice, kLattice, 2.0);
  EXPECT_EQ(same.static_cost, 0.0);
  EXPECT_EQ(same.product_wasserstein, 0.0);
  EXPECT_EQ(same.kernel_to_coupling_cost, 0.0);
  EXPECT_TRUE(same.pass);
  const auto lat = check_equality_cp_inf(kLattice, kShifted, 2.0);
  EXPECT_NEAR(lat.static_cost, 0.0625, 1e-15);
  EXPECT_NEAR(lat.product_wasserstein, 0.0625, 1e-15);
  EXPECT_TRUE(lat.pass);
}

TEST(Equality, RandomPairs) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    const TorusGeometry g(1 + t % 2, 0.8 + 0.05 * t);
    const auto xi = gen::random_configuration(g, 4, rng, t % 2 == 0), eta = gen::random_configuration(g, 4, rng, t % 2 == 0);
    for (double p : {1.5, 2.0, 3.0}) {
      const auto e = check_equality_cp_inf(xi, eta, p);
      EXPECT_LE(e.gap, 1e-9);
      EXPECT_TRUE(e.kernel_to_coupling_le);
      EXPECT_TRUE(e.coupling_to_kernel_le);
      EXPECT_TRUE(e.composition_preserves);
    }
  }
}
