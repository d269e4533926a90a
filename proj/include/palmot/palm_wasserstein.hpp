#pragma once

// Measures on Omega x R^d, the Wasserstein distance induced by the product
// metric d, and the two conversions between balancing kernels and couplings
// whose costs sandwich c_p.

#include <algorithm>
#include <cmath>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palmot/core.hpp"
#include "palmot/torus.hpp"
#include "palmot/transport.hpp"

namespace palmot {

struct ProductAtom {
  TorusPoint omega;
  Vec y;
  double mass = 0.0;
};

/// Finitely supported measure on Omega x R^d. Total mass equals the intensity
/// of the model it came from (a probability measure at unit intensity).
struct ProductMeasure {
  TorusGeometry geometry;
  std::vector<ProductAtom> atoms;

  double total_mass() const {
    double s = 0.0;
    for (const auto& a : atoms) s += a.mass;
    return s;
  }
};

/// Q tensor delta_0.
inline ProductMeasure palm_product(const PalmMeasure& palm) {
  ProductMeasure out{palm.geometry, {}};
  for (const auto& a : palm.atoms) out.atoms.push_back({a.point, Vec(palm.geometry.dimension, 0.0), a.mass});
  return out;
}

struct CouplingAtom {
  ProductPoint from;
  ProductPoint to;
  double mass = 0.0;
};

struct ProductCoupling {
  TorusGeometry geometry;
  std::vector<CouplingAtom> atoms;

  double cost(double p) const {
    double s = 0.0;
    for (const auto& a : atoms) {
      const double dd = dist_product(geometry, a.from, a.to);
      s += a.mass * (dd == 0.0 ? 0.0 : std::pow(dd, p));
    }
    return s;
  }
};

/// Merges atoms whose Omega components lie within tol on the torus; first occurrence wins.
inline std::vector<PalmAtom> omega_marginal(const TorusGeometry& g, std::span<const ProductAtom> atoms,
                                            double tol = 1e-12) {
  std::vector<PalmAtom> out;
  for (const auto& a : atoms) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const PalmAtom& b) { return torus_distance(g, a.omega, b.point) <= tol; });
    if (it == out.end())
      out.push_back({a.omega, a.mass});
    else
      it->mass += a.mass;
  }
  return out;
}

struct ProductWasserstein {
  double value = 0.0;  // W_p^p
  ProductCoupling coupling;
};

namespace detail {

inline std::vector<double> flatten(const ProductMeasure& P) {
  std::vector<double> out{static_cast<double>(P.atoms.size())};
  for (const auto& a : P.atoms) {
    out.insert(out.end(), a.omega.coords.begin(), a.omega.coords.end());
    out.insert(out.end(), a.y.begin(), a.y.end());
    out.push_back(a.mass);
  }
  return out;
}

inline ProductWasserstein solve_product(const ProductMeasure& P0, const ProductMeasure& P1, double p) {
  const auto& g = P0.geometry;
  Matrix c(P0.atoms.size(), P1.atoms.size());
  Vec a, b;
  for (const auto& x : P0.atoms) a.push_back(x.mass);
  for (const auto& y : P1.atoms) b.push_back(y.mass);
  for (std::size_t i = 0; i < P0.atoms.size(); ++i)
    for (std::size_t j = 0; j < P1.atoms.size(); ++j) {
      const double dd = dist_product(g, {P0.atoms[i].omega, P0.atoms[i].y}, {P1.atoms[j].omega, P1.atoms[j].y});
      c(i, j) = dd == 0.0 ? 0.0 : std::pow(dd, p);
    }
  const auto plan = solve_transport_exact(c, a, b);
  ProductWasserstein out{plan.cost(c), {g, {}}};
  for (std::size_t i = 0; i < P0.atoms.size(); ++i)
    for (std::size_t j = 0; j < P1.atoms.size(); ++j)
      if (plan.plan(i, j) > 0.0)
        out.coupling.atoms.push_back({{P0.atoms[i].omega, P0.atoms[i].y},
                                      {P1.atoms[j].omega, P1.atoms[j].y},
                                      plan.plan(i, j)});
  return out;
}

}  // namespace detail

/// Solved in a canonical orientation so that W(P0, P1) == W(P1, P0) bitwise.
inline ProductWasserstein wasserstein_product(const ProductMeasure& P0, const ProductMeasure& P1, double p) {
  require_same_geometry(P0.geometry, P1.geometry);
  require(std::isfinite(p) && p > 1.0, "exponent p must be > 1");
  require(!P0.atoms.empty() && !P1.atoms.empty(), "empty product measure");
  const double m0 = P0.total_mass(), m1 = P1.total_mass();
  require(std::abs(m0 - m1) <= 1e-12 * std::max(1.0, std::max(m0, m1)), "product measures differ in total mass");
  if (!(detail::flatten(P1) < detail::flatten(P0))) return detail::solve_product(P0, P1, p);
  auto out = detail::solve_product(P1, P0, p);
  for (auto& a : out.coupling.atoms) std::swap(a.from, a.to);
  return out;
}

/// U = E_{Q_xi}[ int delta_{(w, 0), (theta_z w, 0)} T(w, dz) ].
/// When palm_eta is given the kernel must balance it (violation <= 1e-9).
inline ProductCoupling kernel_to_coupling(const BalancingKernel& T, const PalmMeasure& palm_xi,
                                          const std::optional<PalmMeasure>& palm_eta = std::nullopt) {
  require_same_geometry(T.geometry, palm_xi.geometry);
  if (palm_eta) {
    const auto basis = indicator_basis(*palm_eta);
    const double v = verify_balancing(T, palm_xi, *palm_eta, basis);
    require(v <= 1e-9, "kernel_to_coupling: kernel is not balancing (violation " + std::to_string(v) + ")");
  }
  require(T.rows.size() == palm_xi.atoms.size(), "kernel rows do not match source Palm atoms");
  const auto& g = T.geometry;
  const Vec zero(g.dimension, 0.0);
  ProductCoupling U{g, {}};
  for (std::size_t i = 0; i < T.rows.size(); ++i) {
    const auto& row = T.rows[i];
    require(row.origin == palm_xi.atoms[i].point, "kernel row origin does not match source Palm atom");
    for (const auto& e : row.entries)
      U.atoms.push_back({{row.origin, zero}, {shift(g, row.origin, e.z), zero}, palm_xi.atoms[i].mass * e.mass});
  }
  return U;
}

/// Pushes U forward under F(w1, w2) = (w1, minimal_shift(w1, w2)) and
/// disintegrates over w1.
inline BalancingKernel coupling_to_kernel(const ProductCoupling& U, double merge_tol = 1e-12) {
  const auto& g = U.geometry;
  BalancingKernel T{g, {}};
  for (const auto& a : U.atoms) {
    require(a.mass > 0.0, "coupling masses must be > 0");
    const Vec z = minimal_shift(g, a.from.omega, a.to.omega);
    auto it = std::find_if(T.rows.begin(), T.rows.end(), [&](const KernelRow& r) {
      return torus_distance(g, r.origin, a.from.omega) <= merge_tol;
    });
    if (it == T.rows.end()) {
      T.rows.push_back({a.from.omega, 0.0, {}});
      it = std::prev(T.rows.end());
    }
    it->palm_mass += a.mass;
    auto e = std::find_if(it->entries.begin(), it->entries.end(), [&](const KernelEntry& k) { return k.z == z; });
    if (e == it->entries.end())
      it->entries.push_back({z, a.mass});
    else
      e->mass += a.mass;
  }
  for (auto& r : T.rows)
    for (auto& e : r.entries) e.mass /= r.palm_mass;
  return T;
}

/// Reorders kernel rows to follow the atom order of palm_xi.
inline BalancingKernel align_rows(const BalancingKernel& T, const PalmMeasure& palm_xi, double tol = 1e-12) {
  BalancingKernel out{T.geometry, {}};
  for (const auto& atom : palm_xi.atoms) {
    auto it = std::find_if(T.rows.begin(), T.rows.end(), [&](const KernelRow& r) {
      return torus_distance(T.geometry, r.origin, atom.point) <= tol;
    });
    require(it != T.rows.end(), "kernel has no row for a source Palm atom");
    KernelRow r = *it;
    r.origin = atom.point;
    out.rows.push_back(std::move(r));
  }
  require(out.rows.size() == T.rows.size(), "kernel has rows outside the source Palm support");
  return out;
}

struct EqualityReport {
  double static_cost = 0.0;             // (a) c_p
  double product_wasserstein = 0.0;     // (b) W_p^p(Q_xi x delta_0, Q_eta x delta_0)
  double kernel_cost = 0.0;             // cost of the static optimal kernel
  double kernel_to_coupling_cost = 0.0;  // d^p cost of the coupling built from it
  double coupling_to_kernel_cost = 0.0;  // |z|^p cost of the kernel built from the optimal coupling
  double gap = 0.0;                     // |a - b|
  bool kernel_to_coupling_le = false;   // coupling cost <= kernel cost
  bool coupling_to_kernel_le = false;   // kernel cost <= coupling cost
  bool composition_preserves = false;   // both round trips from optimizers stay at c_p
  bool pass = false;
};

inline EqualityReport check_equality_cp_inf(const StationaryModel& xi, const StationaryModel& eta, double p,
                                            double tol = 1e-9) {
  EqualityReport r;
  const auto stat = cost_cp(xi, eta, p);
  const auto qx = palm_measure(xi);
  const auto qe = palm_measure(eta);
  PalmMeasure qx_atoms{qx.geometry, qx.atoms, std::nullopt, 0};
  PalmMeasure qe_atoms{qe.geometry, qe.atoms, std::nullopt, 0};
  const auto W = wasserstein_product(palm_product(qx_atoms), palm_product(qe_atoms), p);

  r.static_cost = stat.cost;
  r.product_wasserstein = W.value;
  r.kernel_cost = stat.kernel.cost(p);
  r.kernel_to_coupling_cost = kernel_to_coupling(stat.kernel, qx_atoms, qe_atoms).cost(p);
  r.coupling_to_kernel_cost = coupling_to_kernel(W.coupling).cost(p);
  r.gap = std::abs(r.static_cost - r.product_wasserstein);

  const double slack = 1e-12 * std::max(1.0, r.static_cost);
  r.kernel_to_coupling_le = r.kernel_to_coupling_cost <= r.kernel_cost + slack;
  r.coupling_to_kernel_le = r.coupling_to_kernel_cost <= r.product_wasserstein + slack;
  r.composition_preserves = std::abs(r.kernel_to_coupling_cost - r.static_cost) <= tol &&
                            std::abs(r.coupling_to_kernel_cost - r.static_cost) <= tol;
  r.pass = r.gap <= tol && r.kernel_to_coupling_le && r.coupling_to_kernel_le && r.composition_preserves;
  return r;
}

}  // namespace palmot
