#pragma once

// Flat torus [0, L)^d with the translation flow, stationarized periodic
// measures on it, their Palm measures and the refined Campbell formula.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <type_traits>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "palmot/core.hpp"

namespace palmot {

struct TorusGeometry {
  int dimension = 1;
  double period = 1.0;

  TorusGeometry() = default;
  TorusGeometry(int d, double L) : dimension(d), period(L) {
    require(d >= 1, "torus dimension must be >= 1");
    require(std::isfinite(L) && L > 0.0, "torus period must be finite and > 0");
  }

  double volume() const { return std::pow(period, dimension); }

  friend bool operator==(const TorusGeometry&, const TorusGeometry&) = default;
};

inline void require_same_geometry(const TorusGeometry& a, const TorusGeometry& b) {
  require(a == b, "geometry mismatch");
}

/// Coordinates reduced to the fundamental cell [0, L)^d.
struct TorusPoint {
  Vec coords;

  friend bool operator==(const TorusPoint&, const TorusPoint&) = default;
};

/// Reduces a real number to [0, L). Values already in range are returned untouched.
inline double wrap_coordinate(double v, double L) {
  if (v >= 0.0 && v < L) return v;
  double r = v - L * std::floor(v / L);
  if (r >= L || r < 0.0) r = 0.0;
  return r;
}

inline TorusPoint make_point(const TorusGeometry& g, std::span<const double> v) {
  require(static_cast<int>(v.size()) == g.dimension, "point dimension mismatch");
  require(all_finite(v), "non-finite point coordinate");
  TorusPoint p{Vec(v.begin(), v.end())};
  for (auto& x : p.coords) x = wrap_coordinate(x, g.period);
  return p;
}

/// theta_z omega = omega + z mod L.
inline TorusPoint shift(const TorusGeometry& g, const TorusPoint& omega, std::span<const double> z) {
  require(z.size() == omega.coords.size(), "shift dimension mismatch");
  TorusPoint p{Vec(omega.coords.size())};
  for (std::size_t i = 0; i < z.size(); ++i) p.coords[i] = wrap_coordinate(omega.coords[i] + z[i], g.period);
  return p;
}

/// Minimal-norm representative of v modulo L, in [-L/2, L/2)^d.
///
/// The minimal-norm set of lifts factorizes over coordinates, so the
/// lexicographically smallest minimizer is obtained coordinate-wise by
/// preferring -L/2 over +L/2. Inputs already in range are returned bit-exactly.
inline Vec canonical_rep(std::span<const double> v, double L) {
  require(std::isfinite(L) && L > 0.0, "canonical_rep: period must be > 0");
  require(all_finite(v), "canonical_rep: non-finite input");
  const double half = 0.5 * L;
  Vec r(v.begin(), v.end());
  for (auto& x : r) {
    if (x >= -half && x < half) continue;
    x -= L * std::round(x / L);
    if (x >= half) x -= L;
    if (x < -half) x += L;
  }
  return r;
}

/// The shift z with theta_z w1 = w2 of minimal norm (lexicographic tie-break).
inline Vec minimal_shift(const TorusGeometry& g, const TorusPoint& w1, const TorusPoint& w2) {
  require(static_cast<int>(w1.coords.size()) == g.dimension &&
              static_cast<int>(w2.coords.size()) == g.dimension,
          "minimal_shift: geometry mismatch");
  return canonical_rep(sub(w2.coords, w1.coords), g.period);
}

inline double torus_distance(const TorusGeometry& g, const TorusPoint& w1, const TorusPoint& w2) {
  return norm(minimal_shift(g, w1, w2));
}

/// A point of Omega x R^d.
struct ProductPoint {
  TorusPoint omega;
  Vec y;
};

/// d((w1,z1),(w2,z2)) = (|z1-z2|^2 + d_Omega(w1,w2)^2)^{1/2}.
inline double dist_product(const TorusGeometry& g, const ProductPoint& a, const ProductPoint& b) {
  require(a.y.size() == b.y.size() && static_cast<int>(a.y.size()) == g.dimension,
          "dist_product: geometry mismatch");
  const double dw = torus_distance(g, a.omega, b.omega);
  return std::sqrt(norm2(sub(a.y, b.y)) + dw * dw);
}

// ---------------------------------------------------------------------------
// Stationary models

/// xi(omega, A) = sum_i sum_k w_i 1_A(x_i - omega + kL).
class PeriodicPointConfiguration {
 public:
  PeriodicPointConfiguration(TorusGeometry geometry, const std::vector<Vec>& atoms, Vec weights)
      : geometry_(geometry), weights_(std::move(weights)) {
    require(!atoms.empty(), "point configuration needs at least one atom");
    require(atoms.size() == weights_.size(), "atoms and weights differ in length");
    atoms_.reserve(atoms.size());
    for (const auto& a : atoms) atoms_.push_back(make_point(geometry_, a));
    for (double w : weights_) require(std::isfinite(w) && w > 0.0, "atom weights must be finite and > 0");
    for (std::size_t i = 0; i < atoms_.size(); ++i)
      for (std::size_t j = i + 1; j < atoms_.size(); ++j)
        require(atoms_[i] != atoms_[j], "atoms must be pairwise distinct");
  }

  /// Unit weights.
  PeriodicPointConfiguration(TorusGeometry geometry, const std::vector<Vec>& atoms)
      : PeriodicPointConfiguration(geometry, atoms, Vec(atoms.size(), 1.0)) {}

  const TorusGeometry& geometry() const noexcept { return geometry_; }
  const std::vector<TorusPoint>& atoms() const noexcept { return atoms_; }
  const Vec& weights() const noexcept { return weights_; }
  std::size_t size() const noexcept { return atoms_.size(); }

  double intensity() const { return sum(weights_) / geometry_.volume(); }

 private:
  TorusGeometry geometry_;
  std::vector<TorusPoint> atoms_;
  Vec weights_;
};

/// Piecewise-constant periodic density on an m^d grid, row-major with axis 0 slowest.
/// xi(omega, dz) = rho(omega + z) dz.
class PeriodicDensity {
 public:
  PeriodicDensity(TorusGeometry geometry, int resolution, Vec values)
      : geometry_(geometry), resolution_(resolution), values_(std::move(values)) {
    require(resolution >= 1, "density resolution must be >= 1");
    std::size_t cells = 1;
    for (int k = 0; k < geometry_.dimension; ++k) cells *= static_cast<std::size_t>(resolution);
    require(values_.size() == cells, "density values must have resolution^dimension entries");
    for (double v : values_) require(std::isfinite(v) && v >= 0.0, "density values must be finite and >= 0");
    require(mean() > 0.0, "density mean must be > 0");
  }

  const TorusGeometry& geometry() const noexcept { return geometry_; }
  int resolution() const noexcept { return resolution_; }
  const Vec& values() const noexcept { return values_; }
  std::size_t cells() const noexcept { return values_.size(); }
  double cell_width() const { return geometry_.period / resolution_; }
  double cell_volume() const { return std::pow(cell_width(), geometry_.dimension); }

  double mean() const { return sum(values_) / static_cast<double>(values_.size()); }

  Vec cell_center(std::size_t index) const {
    Vec c(geometry_.dimension);
    const double h = cell_width();
    for (int k = geometry_.dimension - 1; k >= 0; --k) {
      c[k] = (static_cast<double>(index % resolution_) + 0.5) * h;
      index /= resolution_;
    }
    return c;
  }

  std::size_t cell_index(const TorusPoint& p) const {
    std::size_t idx = 0;
    const double h = cell_width();
    for (int k = 0; k < geometry_.dimension; ++k) {
      auto i = static_cast<long>(std::floor(p.coords[k] / h));
      i = std::clamp(i, 0L, static_cast<long>(resolution_) - 1);
      idx = idx * resolution_ + static_cast<std::size_t>(i);
    }
    return idx;
  }

  double at(const TorusPoint& p) const { return values_[cell_index(p)]; }

 private:
  TorusGeometry geometry_;
  int resolution_;
  Vec values_;
};

/// Largest torus distance or weight gap between matched atoms; infinity when
/// the atom counts differ or an atom has no partner.
inline double configuration_mismatch(const PeriodicPointConfiguration& a, const PeriodicPointConfiguration& b,
                                     double match_radius = 1e-6) {
  if (a.geometry() != b.geometry() || a.size() != b.size()) return std::numeric_limits<double>::infinity();
  std::vector<bool> used(b.size(), false);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::size_t best = b.size();
    double best_d = match_radius;
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (used[j]) continue;
      const double dd = torus_distance(a.geometry(), a.atoms()[i], b.atoms()[j]);
      if (dd <= best_d) {
        best_d = dd;
        best = j;
      }
    }
    if (best == b.size()) return std::numeric_limits<double>::infinity();
    used[best] = true;
    worst = std::max({worst, best_d, std::abs(a.weights()[i] - b.weights()[best])});
  }
  return worst;
}

using StationaryModel = std::variant<PeriodicPointConfiguration, PeriodicDensity>;

inline const TorusGeometry& geometry_of(const StationaryModel& m) {
  return std::visit([](const auto& v) -> const TorusGeometry& { return v.geometry(); }, m);
}

/// (sum w_i) / L^d for configurations; the grid mean for densities.
inline double intensity(const StationaryModel& m) {
  return std::visit(
      [](const auto& v) {
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, PeriodicPointConfiguration>)
          return v.intensity();
        else
          return v.mean();
      },
      m);
}

// ---------------------------------------------------------------------------
// Palm measure

struct PalmAtom {
  TorusPoint point;
  double mass = 0.0;
};

/// Q_xi on the torus. Atomic for configurations. For densities the Lebesgue
/// density rho / L^d is kept, together with its cell-center discretization.
struct PalmMeasure {
  TorusGeometry geometry;
  std::vector<PalmAtom> atoms;
  std::optional<Vec> density;
  int density_resolution = 0;

  double total_mass() const {
    double s = 0.0;
    for (const auto& a : atoms) s += a.mass;
    return s;
  }
};

inline PalmMeasure palm_measure(const StationaryModel& model) {
  PalmMeasure q;
  q.geometry = geometry_of(model);
  const double vol = q.geometry.volume();
  if (const auto* c = std::get_if<PeriodicPointConfiguration>(&model)) {
    for (std::size_t i = 0; i < c->size(); ++i) q.atoms.push_back({c->atoms()[i], c->weights()[i] / vol});
  } else {
    const auto& d = std::get<PeriodicDensity>(model);
    Vec dens = d.values();
    for (auto& v : dens) v /= vol;
    for (std::size_t i = 0; i < d.cells(); ++i) {
      if (dens[i] == 0.0) continue;
      q.atoms.push_back({make_point(q.geometry, d.cell_center(i)), dens[i] * d.cell_volume()});
    }
    q.density = std::move(dens);
    q.density_resolution = d.resolution();
  }
  return q;
}

// ---------------------------------------------------------------------------
// Realizations in a window

struct Box {
  Vec lo;
  Vec hi;
};

/// Lambda_r = [-r/2, r/2]^d.
inline Box centered_cube(int d, double r) { return {Vec(d, -0.5 * r), Vec(d, 0.5 * r)}; }

struct WeightedLocation {
  Vec location;
  double weight = 0.0;
};

namespace detail {

inline void validate_box(const Box& b, int d) {
  require(static_cast<int>(b.lo.size()) == d && static_cast<int>(b.hi.size()) == d, "window dimension mismatch");
  require(all_finite(b.lo) && all_finite(b.hi), "window must be bounded");
  for (int k = 0; k < d; ++k) require(b.lo[k] <= b.hi[k], "window has lo > hi");
}

/// Calls fn(lift) for every x + kL inside [lo, hi], in lexicographic k order.
template <typename Fn>
void for_each_lift_in_box(std::span<const double> x, double L, const Box& box, Fn&& fn) {
  const int d = static_cast<int>(x.size());
  std::vector<long> kmin(d), kmax(d), k(d);
  for (int a = 0; a < d; ++a) {
    kmin[a] = static_cast<long>(std::ceil((box.lo[a] - x[a]) / L));
    kmax[a] = static_cast<long>(std::floor((box.hi[a] - x[a]) / L));
    if (kmin[a] > kmax[a]) return;
  }
  k = kmin;
  Vec lift(d);
  while (true) {
    for (int a = 0; a < d; ++a) lift[a] = x[a] + static_cast<double>(k[a]) * L;
    bool inside = true;
    for (int a = 0; a < d; ++a) inside = inside && lift[a] >= box.lo[a] && lift[a] <= box.hi[a];
    if (inside) fn(std::as_const(lift));
    int a = d - 1;
    while (a >= 0 && k[a] == kmax[a]) {
      k[a] = kmin[a];
      --a;
    }
    if (a < 0) break;
    ++k[a];
  }
}

}  // namespace detail

/// Atoms of xi(omega) inside the window. Densities are returned as lifted cell
/// centers carrying the cell mass.
inline std::vector<WeightedLocation> evaluate_measure(const StationaryModel& model, const TorusPoint& omega,
                                                      const Box& window) {
  const auto& g = geometry_of(model);
  detail::validate_box(window, g.dimension);
  std::vector<WeightedLocation> out;
  auto emit = [&](std::span<const double> base, double w) {
    Vec rel = sub(base, omega.coords);
    detail::for_each_lift_in_box(rel, g.period, window,
                                 [&](const Vec& lift) { out.push_back({lift, w}); });
  };
  if (const auto* c = std::get_if<PeriodicPointConfiguration>(&model)) {
    for (std::size_t i = 0; i < c->size(); ++i) emit(c->atoms()[i].coords, c->weights()[i]);
  } else {
    const auto& d = std::get<PeriodicDensity>(model);
    for (std::size_t i = 0; i < d.cells(); ++i)
      if (d.values()[i] > 0.0) emit(d.cell_center(i), d.values()[i] * d.cell_volume());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Refined Campbell formula

using OmegaSpaceFunction = std::function<double(const TorusPoint&, std::span<const double>)>;

struct CampbellQuadrature {
  int resolution = 256;          // nodes per axis, for both omega and z grids
  Box z_support;                 // f(omega, .) vanishes outside this box
  double max_evaluations = 5e7;  // budget on f evaluations
};

struct CampbellResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double gap = 0.0;
};

class QuadratureBudgetExceeded : public Error {
 public:
  using Error::Error;
};

namespace detail {

/// Midpoint nodes of a uniform grid with n nodes per axis over [lo, hi].
template <typename Fn>
void for_each_grid_node(const Vec& lo, const Vec& hi, int n, Fn&& fn) {
  const int d = static_cast<int>(lo.size());
  std::vector<int> idx(d, 0);
  Vec node(d);
  double cell = 1.0;
  for (int a = 0; a < d; ++a) cell *= (hi[a] - lo[a]) / n;
  while (true) {
    for (int a = 0; a < d; ++a) node[a] = lo[a] + (idx[a] + 0.5) * (hi[a] - lo[a]) / n;
    fn(std::as_const(node), cell);
    int a = d - 1;
    while (a >= 0 && idx[a] == n - 1) {
      idx[a] = 0;
      --a;
    }
    if (a < 0) break;
    ++idx[a];
  }
}

}  // namespace detail

/// lhs = E_Q[ int f(theta_z w, z) xi(w, dz) ] by an omega grid,
/// rhs = E_{Q_xi}[ int f(w, z) dz ] by a z grid over the declared support.
inline CampbellResult campbell_check(const StationaryModel& model, const OmegaSpaceFunction& f,
                                     const CampbellQuadrature& quad) {
  const auto& g = geometry_of(model);
  detail::validate_box(quad.z_support, g.dimension);
  require(quad.resolution >= 1, "quadrature resolution must be >= 1");
  const double nodes = std::pow(static_cast<double>(quad.resolution), g.dimension);
  const Vec cell_lo(g.dimension, 0.0), cell_hi(g.dimension, g.period);
  const double inv_vol = 1.0 / g.volume();
  CampbellResult r;

  if (const auto* c = std::get_if<PeriodicPointConfiguration>(&model)) {
    double lifts_per_atom = 1.0;
    for (int a = 0; a < g.dimension; ++a)
      lifts_per_atom *= std::floor((quad.z_support.hi[a] - quad.z_support.lo[a]) / g.period) + 1.0;
    const double cost = nodes * static_cast<double>(c->size()) * (lifts_per_atom + 1.0);
    if (cost > quad.max_evaluations) throw QuadratureBudgetExceeded("campbell_check: quadrature budget exhausted");

    // Omega-average of the realization seen from omega.
    double lhs = 0.0;
    detail::for_each_grid_node(cell_lo, cell_hi, quad.resolution, [&](const Vec& w, double cell) {
      const TorusPoint omega{w};
      double s = 0.0;
      for (std::size_t i = 0; i < c->size(); ++i) {
        Vec rel = sub(c->atoms()[i].coords, w);
        detail::for_each_lift_in_box(rel, g.period, quad.z_support, [&](const Vec& z) {
          s += c->weights()[i] * f(shift(g, omega, z), z);
        });
      }
      lhs += s * cell * inv_vol;
    });
    r.lhs = lhs;

    const auto palm = palm_measure(model);
    double rhs = 0.0;
    for (const auto& atom : palm.atoms) {
      double integral = 0.0;
      detail::for_each_grid_node(quad.z_support.lo, quad.z_support.hi, quad.resolution,
                                 [&](const Vec& z, double cell) { integral += f(atom.point, z) * cell; });
      rhs += atom.mass * integral;
    }
    r.rhs = rhs;
  } else {
    const auto& d = std::get<PeriodicDensity>(model);
    if (nodes * nodes * 2.0 > quad.max_evaluations)
      throw QuadratureBudgetExceeded("campbell_check: quadrature budget exhausted");
    double lhs = 0.0;
    detail::for_each_grid_node(cell_lo, cell_hi, quad.resolution, [&](const Vec& w, double wcell) {
      const TorusPoint omega{w};
      double s = 0.0;
      detail::for_each_grid_node(quad.z_support.lo, quad.z_support.hi, quad.resolution,
                                 [&](const Vec& z, double zcell) {
                                   const TorusPoint moved = shift(g, omega, z);
                                   s += f(moved, z) * d.at(moved) * zcell;
                                 });
      lhs += s * wcell * inv_vol;
    });
    r.lhs = lhs;
    double rhs = 0.0;
    detail::for_each_grid_node(cell_lo, cell_hi, quad.resolution, [&](const Vec& w, double wcell) {
      const TorusPoint omega{w};
      const double palm_density = d.at(omega) * inv_vol;
      double inner = 0.0;
      detail::for_each_grid_node(quad.z_support.lo, quad.z_support.hi, quad.resolution,
                                 [&](const Vec& z, double zcell) { inner += f(omega, z) * zcell; });
      rhs += palm_density * inner * wcell;
    });
    r.rhs = rhs;
  }
  r.gap = std::abs(r.lhs - r.rhs);
  return r;
}

}  // namespace palmot
