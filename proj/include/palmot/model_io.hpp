#pragma once

// JSON model files and reports, CSV tables, and two-column plot data.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "palmot/bb_grid.hpp"
#include "palmot/dynamics.hpp"
#include "palmot/palm_wasserstein.hpp"
#include "palmot/torus.hpp"
#include "palmot/transport.hpp"

namespace palmot::io {

using json = nlohmann::ordered_json;

/// Shortest decimal that round-trips a double.
inline std::string fmt(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline json vec_json(std::span<const double> v) { return json(std::vector<double>(v.begin(), v.end())); }

inline Vec json_vec(const json& j, const std::string& what) {
  if (!j.is_array()) throw InvalidArgument(what + " must be an array of numbers");
  Vec v;
  for (const auto& x : j) {
    if (!x.is_number()) throw InvalidArgument(what + " must contain only numbers");
    v.push_back(x.get<double>());
  }
  return v;
}

// ---------------------------------------------------------------------------
// Models

inline json model_to_json(const StationaryModel& model) {
  const auto& g = geometry_of(model);
  json j;
  if (const auto* c = std::get_if<PeriodicPointConfiguration>(&model)) {
    j["kind"] = "points";
    j["dimension"] = g.dimension;
    j["period"] = g.period;
    json atoms = json::array();
    for (const auto& a : c->atoms()) atoms.push_back(vec_json(a.coords));
    j["atoms"] = atoms;
    j["weights"] = vec_json(c->weights());
  } else {
    const auto& d = std::get<PeriodicDensity>(model);
    j["kind"] = "density";
    j["dimension"] = g.dimension;
    j["period"] = g.period;
    j["resolution"] = d.resolution();
    j["values"] = vec_json(d.values());
  }
  return j;
}

inline StationaryModel model_from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("model document must be an object");
  for (const char* key : {"kind", "dimension", "period"})
    if (!j.contains(key)) throw InvalidArgument(std::string("model is missing field '") + key + "'");
  if (!j["dimension"].is_number_integer()) throw InvalidArgument("dimension must be an integer");
  if (!j["period"].is_number()) throw InvalidArgument("period must be a number");
  const TorusGeometry g(j["dimension"].get<int>(), j["period"].get<double>());
  const auto kind = j["kind"].get<std::string>();
  if (kind == "points") {
    if (!j.contains("atoms")) throw InvalidArgument("point model is missing field 'atoms'");
    if (!j["atoms"].is_array()) throw InvalidArgument("atoms must be an array");
    std::vector<Vec> atoms;
    for (const auto& a : j["atoms"]) atoms.push_back(json_vec(a, "atom"));
    Vec weights = j.contains("weights") ? json_vec(j["weights"], "weights") : Vec(atoms.size(), 1.0);
    return PeriodicPointConfiguration(g, atoms, weights);
  }
  if (kind == "density") {
    for (const char* key : {"resolution", "values"})
      if (!j.contains(key)) throw InvalidArgument(std::string("density model is missing field '") + key + "'");
    if (!j["resolution"].is_number_integer()) throw InvalidArgument("resolution must be an integer");
    return PeriodicDensity(g, j["resolution"].get<int>(), json_vec(j["values"], "values"));
  }
  throw InvalidArgument("model kind must be 'points' or 'density', got '" + kind + "'");
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidArgument("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline StationaryModel load_model(const std::filesystem::path& path) {
  try {
    return model_from_json(read_json(path));
  } catch (const json::exception& e) {
    throw InvalidArgument("bad model file " + path.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out << body;
}

inline void save_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline void save_model(const std::filesystem::path& path, const StationaryModel& model) {
  save_json(path, model_to_json(model));
}

// ---------------------------------------------------------------------------
// Static solver output

inline json kernel_json(const BalancingKernel& T) {
  json rows = json::array();
  for (const auto& r : T.rows) {
    json entries = json::array();
    for (const auto& e : r.entries) entries.push_back({{"z", vec_json(e.z)}, {"mass", e.mass}});
    rows.push_back({{"origin", vec_json(r.origin.coords)}, {"palm_mass", r.palm_mass}, {"entries", entries}});
  }
  return rows;
}

inline json plan_json(const TransportPlan& plan, double threshold = 0.0) {
  json t = json::array();
  for (std::size_t i = 0; i < plan.plan.rows(); ++i)
    for (std::size_t j = 0; j < plan.plan.cols(); ++j)
      if (plan.plan(i, j) > threshold) t.push_back({i, j, plan.plan(i, j)});
  return t;
}

inline json static_report_json(const StaticSolveReport& r) {
  return {{"cost", r.cost},
          {"exponent", r.exponent},
          {"method", to_string(r.method)},
          {"iterations", r.iterations},
          {"plan", plan_json(r.plan)},
          {"kernel", kernel_json(r.kernel)},
          {"marginal_violation", r.plan.marginal_violation()}};
}

/// Rows i, j, source coords, target coords, lift, mass.
inline std::string plan_csv(const StaticSolveReport& r) {
  const int d = r.cost_matrix.geometry.dimension;
  std::ostringstream os;
  os << "i,j";
  for (int a = 0; a < d; ++a) os << ",x" << a;
  for (int a = 0; a < d; ++a) os << ",y" << a;
  for (int a = 0; a < d; ++a) os << ",z" << a;
  os << ",mass\n";
  for (std::size_t i = 0; i < r.plan.plan.rows(); ++i)
    for (std::size_t j = 0; j < r.plan.plan.cols(); ++j) {
      const double m = r.plan.plan(i, j);
      if (m <= 0.0) continue;
      os << i << ',' << j;
      for (double v : r.cost_matrix.sources[i].coords) os << ',' << fmt(v);
      for (double v : r.cost_matrix.targets[j].coords) os << ',' << fmt(v);
      for (double v : r.cost_matrix.displacement(i, j)) os << ',' << fmt(v);
      os << ',' << fmt(m) << '\n';
    }
  return os.str();
}

inline std::string kernel_csv(const BalancingKernel& T) {
  const int d = T.geometry.dimension;
  std::ostringstream os;
  os << "row";
  for (int a = 0; a < d; ++a) os << ",origin" << a;
  for (int a = 0; a < d; ++a) os << ",z" << a;
  os << ",mass\n";
  for (std::size_t i = 0; i < T.rows.size(); ++i)
    for (const auto& e : T.rows[i].entries) {
      os << i;
      for (double v : T.rows[i].origin.coords) os << ',' << fmt(v);
      for (double v : e.z) os << ',' << fmt(v);
      os << ',' << fmt(e.mass) << '\n';
    }
  return os.str();
}

inline std::string palm_csv(const PalmMeasure& palm) {
  const int d = palm.geometry.dimension;
  std::ostringstream os;
  for (int a = 0; a < d; ++a) os << (a ? "," : "") << "omega" << a;
  os << ",mass\n";
  for (const auto& a : palm.atoms) {
    for (std::size_t k = 0; k < a.point.coords.size(); ++k) os << (k ? "," : "") << fmt(a.point.coords[k]);
    os << ',' << fmt(a.mass) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Curves and grid solutions

/// One row per atom per node: t, omega, y, mass.
inline std::string curve_csv(const CurveOfMeasures& curve) {
  const int d = curve.nodes.empty() ? 0 : curve.nodes.front().geometry.dimension;
  std::ostringstream os;
  os << "t";
  for (int a = 0; a < d; ++a) os << ",omega" << a;
  for (int a = 0; a < d; ++a) os << ",y" << a;
  os << ",mass\n";
  for (std::size_t k = 0; k < curve.nodes.size(); ++k)
    for (const auto& at : curve.nodes[k].atoms) {
      os << fmt(curve.times[k]);
      for (double v : at.omega.coords) os << ',' << fmt(v);
      for (double v : at.y) os << ',' << fmt(v);
      os << ',' << fmt(at.mass) << '\n';
    }
  return os.str();
}

/// t, x, rho, m per cell; momenta are averaged to cell centers and midpoint times.
inline std::string solution_csv(const SpaceTimeSolution& sol) {
  const auto& g = sol.grid;
  const int d = g.geometry.dimension;
  const std::size_t n = g.cells();
  std::ostringstream os;
  os << "t";
  for (int a = 0; a < d; ++a) os << ",x" << a;
  os << ",rho";
  for (int a = 0; a < d; ++a) os << ",m" << a;
  os << '\n';
  const PeriodicDensity layout(g.geometry, g.m, Vec(n, 1.0));
  for (int k = 0; k <= g.n_t; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      os << fmt(static_cast<double>(k) / g.n_t);
      for (double v : layout.cell_center(i)) os << ',' << fmt(v);
      os << ',' << fmt(sol.rho[k][i]);
      for (int a = 0; a < d; ++a) {
        // Face fluxes averaged to the cell, then over the adjacent half steps.
        auto centered = [&](int kk) {
          return 0.5 * (sol.momentum[a][kk][i] + sol.momentum[a][kk][detail::neighbor(i, a, -1, g.m, d)]);
        };
        double v = 0.0;
        if (k == 0)
          v = centered(0);
        else if (k == g.n_t)
          v = centered(g.n_t - 1);
        else
          v = 0.5 * (centered(k - 1) + centered(k));
        os << ',' << fmt(v);
      }
      os << '\n';
    }
  return os.str();
}

inline std::string trace_csv(const std::vector<TraceEntry>& trace) {
  std::ostringstream os;
  os << "iteration,residual,objective\n";
  for (const auto& e : trace) os << e.iteration << ',' << fmt(e.residual) << ',' << fmt(e.objective) << '\n';
  return os.str();
}

/// Two whitespace-separated columns with a commented header.
inline std::string plot_data(const std::string& xlabel, const std::string& ylabel, std::span<const double> x,
                             std::span<const double> y) {
  std::ostringstream os;
  os << "# " << xlabel << ' ' << ylabel << '\n';
  for (std::size_t k = 0; k < x.size() && k < y.size(); ++k) os << fmt(x[k]) << ' ' << fmt(y[k]) << '\n';
  return os.str();
}

}  // namespace palmot::io
