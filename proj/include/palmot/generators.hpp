#pragma once

// Seeded fixtures: lattices, random configurations, smooth densities and
// smooth test integrands.

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "palmot/core.hpp"
#include "palmot/torus.hpp"

namespace palmot::gen {

using Rng = std::mt19937_64;

/// n^d lattice with spacing L/n, shifted by offset.
inline PeriodicPointConfiguration lattice(const TorusGeometry& g, int n, std::span<const double> offset = {}) {
  require(n >= 1, "lattice needs n >= 1");
  std::vector<Vec> atoms;
  std::vector<int> idx(g.dimension, 0);
  while (true) {
    Vec x(g.dimension);
    for (int a = 0; a < g.dimension; ++a) x[a] = g.period * idx[a] / n + (offset.empty() ? 0.0 : offset[a]);
    atoms.push_back(x);
    int a = g.dimension - 1;
    while (a >= 0 && idx[a] == n - 1) idx[a--] = 0;
    if (a < 0) break;
    ++idx[a];
  }
  return PeriodicPointConfiguration(g, atoms, Vec(atoms.size(), 1.0));
}

/// n uniform atoms (redrawn until pairwise distinct) with unit weights, or
/// random weights rescaled to total n.
inline PeriodicPointConfiguration random_configuration(const TorusGeometry& g, int n, Rng& rng,
                                                       bool random_weights = false) {
  require(n >= 1, "configuration needs n >= 1");
  std::uniform_real_distribution<double> u(0.0, g.period), w(0.5, 1.5);
  std::vector<Vec> atoms;
  while (static_cast<int>(atoms.size()) < n) {
    Vec x(g.dimension);
    for (auto& v : x) v = u(rng);
    bool clash = false;
    for (const auto& a : atoms) clash = clash || norm(sub(a, x)) < 1e-9 * g.period;
    if (!clash) atoms.push_back(x);
  }
  Vec weights(n, 1.0);
  if (random_weights) {
    for (auto& v : weights) v = w(rng);
    const double s = n / sum(weights);
    for (auto& v : weights) v *= s;
  }
  return PeriodicPointConfiguration(g, atoms, weights);
}

/// Cell averages are not needed; values are the density at cell centers.
inline PeriodicDensity sampled_density(const TorusGeometry& g, int m, const std::function<double(const Vec&)>& f) {
  PeriodicDensity layout(g, m, Vec(static_cast<std::size_t>(std::pow(m, g.dimension) + 0.5), 1.0));
  Vec v(layout.cells());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(layout.cell_center(i));
  return PeriodicDensity(g, m, v);
}

/// 1 + amp * prod_a cos(2 pi (x_a - shift_a) / L).
inline PeriodicDensity cosine_density(const TorusGeometry& g, int m, double amp, std::span<const double> shift = {}) {
  Vec s(shift.begin(), shift.end());
  s.resize(g.dimension, 0.0);
  return sampled_density(g, m, [&](const Vec& x) {
    double c = 1.0;
    for (int a = 0; a < g.dimension; ++a) c *= std::cos(2.0 * std::numbers::pi * (x[a] - s[a]) / g.period);
    return 1.0 + amp * c;
  });
}

/// Smooth integrand f(w, z) = (1 + a cos(2 pi <k, w>/L + phi)) * bump_R(z - c),
/// vanishing outside the ball B_R(c).
struct SmoothIntegrand {
  TorusGeometry geometry;
  double amplitude = 0.5;
  std::vector<int> wave;
  double phase = 0.0;
  Vec center;
  double radius = 1.0;

  double operator()(const TorusPoint& w, std::span<const double> z) const {
    double q = 0.0;
    for (int a = 0; a < geometry.dimension; ++a) q += (z[a] - center[a]) * (z[a] - center[a]);
    q /= radius * radius;
    if (q >= 1.0) return 0.0;
    double arg = phase;
    for (int a = 0; a < geometry.dimension; ++a) arg += 2.0 * std::numbers::pi * wave[a] * w.coords[a] / geometry.period;
    return (1.0 + amplitude * std::cos(arg)) * std::exp(-1.0 / (1.0 - q));
  }
};

inline SmoothIntegrand random_integrand(const TorusGeometry& g, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> k(-2, 2);
  SmoothIntegrand f{g, 0.2 + 0.6 * u(rng), std::vector<int>(g.dimension), 2.0 * std::numbers::pi * u(rng),
                    Vec(g.dimension), 0.5 * g.period * (0.5 + u(rng))};
  for (auto& v : f.wave) v = k(rng);
  for (auto& v : f.center) v = 0.25 * g.period * (2.0 * u(rng) - 1.0);
  return f;
}

}  // namespace palmot::gen
