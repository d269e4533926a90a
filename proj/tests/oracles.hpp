#pragma once

// Independent reference computations used only by the tests. None of them
// calls the library's solvers.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

/// Palm masses by direct quadrature of its defining expectation: average over
/// an omega grid of sum over atoms z of xi(omega) lying in the unit box B = [0,1)^d
/// of w * delta_{theta_z omega}. Returns location -> mass, locations rounded to 1e-9.
inline std::map<std::vector<long long>, double> palm_by_quadrature(int d, double L, const std::vector<Vec>& atoms,
                                                                   const Vec& weights, int M) {
  std::map<std::vector<long long>, double> out;
  const double cell = std::pow(L / M, d) / std::pow(L, d);
  std::vector<int> idx(d, 0);
  const int reach = static_cast<int>(std::ceil(1.0 / L)) + 1;
  while (true) {
    Vec w(d);
    for (int a = 0; a < d; ++a) w[a] = (idx[a] + 0.5) * L / M;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      // enumerate lifts k in [-reach, reach]^d
      std::vector<int> k(d, -reach);
      while (true) {
        bool inside = true;
        Vec landing(d);
        for (int a = 0; a < d; ++a) {
          const double z = atoms[i][a] - w[a] + k[a] * L;
          inside = inside && z >= 0.0 && z < 1.0;
          double x = std::fmod(w[a] + z, L);
          if (x < 0) x += L;
          if (x > L - 1e-9) x -= L;
          landing[a] = x;
        }
        if (inside) {
          std::vector<long long> key(d);
          for (int a = 0; a < d; ++a) key[a] = std::llround(landing[a] * 1e9);
          out[key] += weights[i] * cell;
        }
        int a = d - 1;
        while (a >= 0 && k[a] == reach) k[a--] = -reach;
        if (a < 0) break;
        ++k[a];
      }
    }
    int a = d - 1;
    while (a >= 0 && idx[a] == M - 1) idx[a--] = 0;
    if (a < 0) break;
    ++idx[a];
  }
  return out;
}

/// min_k |y - x + kL|^p over a wide window k in [-2, 2]^d.
inline double wide_lift_cost(const Vec& x, const Vec& y, double L, double p) {
  const int d = static_cast<int>(x.size());
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> k(d, -2);
  while (true) {
    double s = 0.0;
    for (int a = 0; a < d; ++a) {
      const double z = y[a] - x[a] + k[a] * L;
      s += z * z;
    }
    best = std::min(best, s == 0.0 ? 0.0 : std::pow(std::sqrt(s), p));
    int a = d - 1;
    while (a >= 0 && k[a] == 2) k[a--] = -2;
    if (a < 0) break;
    ++k[a];
  }
  return best;
}

/// Optimal assignment cost by enumerating all permutations.
inline double assignment_by_permutations(const std::vector<Vec>& xs, const std::vector<Vec>& ys, double L, double p) {
  const std::size_t n = xs.size();
  std::vector<std::vector<double>> c(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i][j] = wide_lift_cost(xs[i], ys[j], L, p);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += c[i][perm[i]];
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// E[cos(a (x + sqrt(eps) Z))] = exp(-a^2 eps / 2) cos(a x).
inline double gaussian_cosine(double a, double x, double eps) { return std::exp(-0.5 * a * a * eps) * std::cos(a * x); }

/// Exact flow of u' = A sin(k (w + u)), u(0) = 0: tan(k s / 2) = tan(k w / 2) exp(A k t) with s = w + u.
inline double sine_flow(double A, double k, double w, double t) {
  const double period = 2.0 * 3.14159265358979323846 / k;
  double s = 2.0 / k * std::atan(std::tan(0.5 * k * w) * std::exp(A * k * t));
  // The flow never crosses a zero of sin, so s stays in w's branch.
  s += period * std::round((w - s) / period);
  return s - w;
}

}  // namespace oracle
