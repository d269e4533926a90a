// palmot: static and dynamic transport between periodic random measures.
//
// Exit status: 0 all assertions pass, 2 numerical failure, 3 input error.

#include <fftw3.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "palmot/palmot.hpp"

namespace fs = std::filesystem;
using namespace palmot;
using io::json;

namespace {

constexpr int kPass = 0;
constexpr int kNumericalFailure = 2;
constexpr int kInputError = 3;

struct RunConfig {
  std::string command;
  std::string config_path;
  std::string xi, eta, model, rho0, rho1;
  double p = 2.0;
  std::string method = "lp";
  double eps = 1e-3;
  int grid = 64;
  int timesteps = 32;
  std::optional<double> tol;
  unsigned long seed = 1;
  std::string out = "palmot_out";
  // subcommand specific
  bool shift_search = false;
  std::vector<double> at{0.0, 0.5, 1.0};
  std::string benchmark = "cosine";
  double gap_tol = 0.05;
  int max_iters = 200000;
  std::vector<std::string> suites;
  int fixtures = 10;
  bool corrupt = false;
  bool campbell = false;
  int resolution = 2048;
  std::string kind = "lattice";
  int dimension = 1;
  double period = 1.0;
  int n = 4;
  double offset = 0.0;
  double amplitude = 0.5;
  bool random_weights = false;
};

class Report {
 public:
  explicit Report(const RunConfig& cfg) {
    body_["command"] = cfg.command;
    body_["versions"] = {{"palmot", std::string(palmot::version)}, {"fftw", std::string(fftw_version)}};
  }

  json& results() { return body_["results"]; }
  json& config() { return body_["config"]; }

  void assert_le(const std::string& name, double measured, double tolerance) {
    add(name, measured, tolerance, "<=", measured <= tolerance);
  }
  void assert_ge(const std::string& name, double measured, double tolerance) {
    add(name, measured, tolerance, ">=", measured >= tolerance);
  }
  void add(const std::string& name, double measured, double tolerance, const std::string& relation, bool pass) {
    body_["assertions"].push_back(
        {{"name", name}, {"measured", measured}, {"tolerance", tolerance}, {"relation", relation}, {"pass", pass}});
    all_pass_ = all_pass_ && pass;
  }
  bool pass() const { return all_pass_; }

  void timing(const std::string& key, double seconds) { timing_[key] = seconds; }

  int finish(const fs::path& out) {
    body_["pass"] = all_pass_;
    json full = body_;
    full["timing"] = timing_;
    io::save_json(out / "report.json", full);
    std::cout << body_["command"].get<std::string>() << ": " << (all_pass_ ? "PASS" : "FAIL") << " ("
              << (out / "report.json").string() << ")\n";
    for (const auto& a : body_["assertions"])
      if (!a["pass"].get<bool>())
        std::cout << "  failed " << a["name"].get<std::string>() << ": measured " << a["measured"].dump() << ' '
                  << a["relation"].get<std::string>() << ' ' << a["tolerance"].dump() << '\n';
    return all_pass_ ? kPass : kNumericalFailure;
  }

 private:
  json body_ = json::object();
  json timing_ = json::object();
  bool all_pass_ = true;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

json config_json(const RunConfig& c, double tol) {
  return {{"p", c.p},           {"method", c.method},   {"eps", c.eps},   {"grid", c.grid},
          {"timesteps", c.timesteps}, {"tol", tol},     {"seed", c.seed}, {"out", c.out}};
}

StaticMethod parse_method(const std::string& m) {
  if (m == "lp") return StaticMethod::exact_lp;
  if (m == "sinkhorn") return StaticMethod::sinkhorn;
  throw InvalidArgument("--method must be lp or sinkhorn");
}

void require_input(const std::string& path, const std::string& flag) {
  if (path.empty()) throw InvalidArgument(flag + " is required");
}

PeriodicPointConfiguration load_points(const std::string& path) {
  auto m = io::load_model(path);
  if (!std::holds_alternative<PeriodicPointConfiguration>(m))
    throw InvalidArgument(path + ": a point model is required here (densities go through `bb`)");
  return std::get<PeriodicPointConfiguration>(m);
}

void validate_common(const RunConfig& c) {
  if (!(std::isfinite(c.p) && c.p > 1.0)) throw InvalidArgument("--p must be > 1");
  if (!(c.eps > 0.0)) throw InvalidArgument("--eps must be > 0");
  if (c.timesteps < 1 || c.timesteps > 100000) throw InvalidArgument("--timesteps must lie in [1, 100000]");
  if (c.grid < 1 || c.grid > 4096) throw InvalidArgument("--grid must lie in [1, 4096]");
  if (c.tol && !(*c.tol > 0.0)) throw InvalidArgument("--tol must be > 0");
}

// ---------------------------------------------------------------------------

int cmd_static(const RunConfig& c) {
  require_input(c.xi, "--xi");
  require_input(c.eta, "--eta");
  const double tol = c.tol.value_or(c.method == "lp" ? 1e-9 : 1e-6);
  const auto xi = io::load_model(c.xi), eta = io::load_model(c.eta);
  const StaticOptions opt{parse_method(c.method), c.eps};
  Report rep(c);
  rep.config() = config_json(c, tol);
  rep.config()["xi"] = c.xi;
  rep.config()["eta"] = c.eta;
  rep.config()["shift_search"] = c.shift_search;

  const auto t0 = Clock::now();
  const auto s = cost_cp(xi, eta, c.p, opt);
  rep.timing("solve", seconds_since(t0));
  rep.results() = io::static_report_json(s);

  const auto qx = palm_measure(xi), qe = palm_measure(eta);
  PalmMeasure qe_atoms{qe.geometry, qe.atoms, std::nullopt, 0};
  PalmMeasure qx_atoms{qx.geometry, {}, std::nullopt, 0};
  for (const auto& r : s.kernel.rows) qx_atoms.atoms.push_back({r.origin, r.palm_mass});
  const double violation = verify_balancing(s.kernel, qx_atoms, qe_atoms, indicator_basis(qe_atoms));
  rep.results()["violations"] = {{"balancing", violation}, {"marginals", s.plan.marginal_violation()}};
  rep.assert_le("balancing_violation", violation, tol);
  rep.assert_le("marginal_violation", s.plan.marginal_violation(), tol);
  rep.assert_le("kernel_cost_matches", std::abs(s.kernel.cost(c.p) - s.cost), tol * std::max(1.0, s.cost));

  if (c.shift_search) {
    const auto t1 = Clock::now();
    const auto sh = optimize_relative_shift(xi, eta, c.p);
    rep.timing("shift_search", seconds_since(t1));
    rep.results()["shift_search"] = {{"shift", sh.shift},
                                     {"cost", sh.cost},
                                     {"cost_at_zero", sh.cost_at_zero},
                                     {"evaluations", sh.evaluations}};
    rep.assert_le("shift_search_not_worse", sh.cost - sh.cost_at_zero, 1e-12);
  }
  const fs::path out(c.out);
  io::write_text(out / "plan.csv", io::plan_csv(s));
  io::write_text(out / "kernel.csv", io::kernel_csv(s.kernel));
  return rep.finish(out);
}

int cmd_geodesic(const RunConfig& c) {
  require_input(c.xi, "--xi");
  require_input(c.eta, "--eta");
  const double tol = c.tol.value_or(1e-9);
  const auto xi = load_points(c.xi), eta = load_points(c.eta);
  Report rep(c);
  rep.config() = config_json(c, tol);
  rep.config()["xi"] = c.xi;
  rep.config()["eta"] = c.eta;
  rep.config()["at"] = c.at;

  const auto t0 = Clock::now();
  const auto s = cost_cp(xi, eta, c.p);
  const auto qx = palm_measure(xi), qe = palm_measure(eta);
  const auto geo = build_geodesic(s.kernel, qx, uniform_time_grid(c.timesteps), qe);
  const double act = action(geo.curve, geo.field, c.p);
  rep.results()["static_cost"] = s.cost;
  rep.results()["action"] = act;
  rep.assert_le("action_equals_static_cost", std::abs(act - s.cost), tol);

  // Continuity equation against seeded mollified test functions, with a refinement study.
  gen::Rng rng(c.seed);
  const auto phi = verify::random_test_function(xi.geometry(), xi.geometry().period, rng);
  const double res = ce_residual(geo.curve, geo.field, phi);
  const auto study = verify::refinement_study(s.kernel, qx, phi);
  rep.results()["ce_residual"] = res;
  rep.results()["ce_refinement"] = {{"intervals", study.intervals},
                                    {"residuals", study.residuals},
                                    {"orders", study.orders},
                                    {"observed_order", study.order}};
  rep.assert_ge("ce_observed_order", study.order, 2.0);

  json extracted = json::array();
  for (double t : c.at) {
    const auto model = extract_xi_t(geo.curve, t);
    extracted.push_back({{"t", t}, {"model", io::model_to_json(model)}});
  }
  rep.results()["extracted"] = extracted;
  const auto end = std::get<PeriodicPointConfiguration>(extract_xi_t(geo.curve, 1.0));
  rep.assert_le("endpoint_recovers_eta", configuration_mismatch(end, eta), 1e-9);
  const auto wc = weak_continuity_bound(geo.curve, geo.field, c.p, 0.0, 1.0);
  rep.results()["weak_continuity"] = {{"measured", wc.measured}, {"bound", wc.bound}};
  rep.assert_le("weak_continuity", wc.measured - wc.bound, 1e-9);
  rep.timing("total", seconds_since(t0));

  const fs::path out(c.out);
  io::write_text(out / "curve.csv", io::curve_csv(geo.curve));
  Vec ks(study.intervals.begin(), study.intervals.end());
  io::write_text(out / "ce_refinement.dat", io::plot_data("intervals", "ce_residual", ks, study.residuals));
  return rep.finish(out);
}

int cmd_bb(const RunConfig& c) {
  if (c.p != 2.0) throw InvalidArgument("bb supports --p 2 only");
  const double tol = c.tol.value_or(1e-6);
  std::optional<PeriodicDensity> r0, r1;
  std::string source;
  if (!c.rho0.empty() || !c.rho1.empty()) {
    require_input(c.rho0, "--rho0");
    require_input(c.rho1, "--rho1");
    auto a = io::load_model(c.rho0), b = io::load_model(c.rho1);
    if (!std::holds_alternative<PeriodicDensity>(a) || !std::holds_alternative<PeriodicDensity>(b))
      throw InvalidArgument("bb needs density models");
    r0 = std::get<PeriodicDensity>(a);
    r1 = std::get<PeriodicDensity>(b);
    source = c.rho0 + " -> " + c.rho1;
  } else if (c.benchmark == "cosine") {
    const TorusGeometry g(1, 1.0);
    r0 = gen::cosine_density(g, c.grid, 0.5);
    const Vec sh{0.25};
    r1 = gen::cosine_density(g, c.grid, 0.5, sh);
    source = "cosine benchmark";
  } else {
    throw InvalidArgument("unknown benchmark '" + c.benchmark + "'");
  }
  const StaggeredGrid grid{r0->geometry(), r0->resolution(), c.timesteps};
  BBParams params;
  params.tol = tol;
  params.max_iters = c.max_iters;
  Report rep(c);
  rep.config() = config_json(c, tol);
  rep.config()["input"] = source;
  rep.config()["gap_tol"] = c.gap_tol;
  rep.config()["max_iters"] = c.max_iters;
  rep.config()["m"] = grid.m;

  const fs::path out(c.out);
  const auto t0 = Clock::now();
  SpaceTimeSolution sol;
  try {
    sol = bb_solve(*r0, *r1, grid, params);
  } catch (const GridConvergenceError& e) {
    io::write_text(out / "trace.csv", io::trace_csv(e.trace()));
    throw;
  }
  rep.timing("bb_solve", seconds_since(t0));
  const auto t1 = Clock::now();
  const double ref = static_grid_reference(*r0, *r1, grid);
  rep.timing("static_grid_reference", seconds_since(t1));
  const double gap = ref > 0.0 ? std::abs(sol.cost - ref) / ref : std::abs(sol.cost - ref);

  double mass_drift = 0.0, min_rho = sol.rho[0][0];
  const double m0 = sum(sol.rho[0]);
  for (const auto& row : sol.rho) {
    mass_drift = std::max(mass_drift, std::abs(sum(row) - m0) / m0);
    for (double v : row) min_rho = std::min(min_rho, v);
  }
  rep.results() = {{"bb_cost", sol.cost},
                   {"objective", sol.objective},
                   {"static_reference", ref},
                   {"relative_gap", gap},
                   {"iterations", sol.iterations},
                   {"ce_residual", ce_residual_grid(sol)},
                   {"mass_drift", mass_drift},
                   {"min_density", min_rho}};
  rep.assert_le("ce_residual_grid", ce_residual_grid(sol), tol);
  rep.assert_le("mass_conservation", mass_drift, 1e-10);
  rep.assert_ge("nonnegativity", min_rho, -1e-8);
  if (ref > 0.0)
    rep.assert_le("static_dynamic_gap", gap, c.gap_tol);
  else
    rep.assert_le("zero_cost", sol.cost, 1e-8);

  io::write_text(out / "solution.csv", io::solution_csv(sol));
  io::write_text(out / "trace.csv", io::trace_csv(sol.trace));
  Vec its, objs, res;
  for (const auto& e : sol.trace) {
    its.push_back(e.iteration);
    objs.push_back(e.objective / grid.geometry.volume());
    res.push_back(e.residual);
  }
  io::write_text(out / "objective_trace.dat", io::plot_data("iteration", "cost", its, objs));
  io::write_text(out / "residual_trace.dat", io::plot_data("iteration", "residual", its, res));
  return rep.finish(out);
}

int cmd_verify(const RunConfig& c) {
  const auto& names = c.suites.empty() ? verify::suite_names() : c.suites;
  std::vector<std::string> selected;
  for (const auto& n : names)
    if (!n.empty()) selected.push_back(n);
  if (selected.empty()) throw InvalidArgument("empty suite selection");
  for (const auto& n : selected)
    if (std::find(verify::suite_names().begin(), verify::suite_names().end(), n) == verify::suite_names().end())
      throw InvalidArgument("unknown property suite '" + n + "'");
  if (c.fixtures < 1) throw InvalidArgument("--fixtures must be >= 1");
  Report rep(c);
  rep.config() = config_json(c, 0.0);
  rep.config()["tol"] = "per suite";
  rep.config()["suites"] = selected;
  rep.config()["fixtures"] = c.fixtures;
  rep.config()["corrupt"] = c.corrupt;
  const verify::SuiteOptions opt{c.seed, c.fixtures, c.p, c.corrupt};
  for (const auto& n : selected) {
    const auto t0 = Clock::now();
    const auto r = verify::run(n, opt);
    rep.timing(n, seconds_since(t0));
    rep.results()[n] = {{"measured", r.measured}, {"tolerance", r.tolerance}, {"fixtures", r.fixtures},
                        {"detail", r.detail}};
    rep.add(n, r.measured, r.tolerance, n == "ce_refinement" ? ">=" : "<=", r.pass);
  }
  return rep.finish(fs::path(c.out));
}

int cmd_palm(const RunConfig& c) {
  require_input(c.model, "--model");
  const auto model = io::load_model(c.model);
  const double tol = c.tol.value_or(1e-8);
  Report rep(c);
  rep.config() = config_json(c, tol);
  rep.config()["model"] = c.model;
  const auto palm = palm_measure(model);
  rep.results()["intensity"] = intensity(model);
  rep.results()["palm_total_mass"] = palm.total_mass();
  rep.assert_le("palm_mass_equals_intensity", std::abs(palm.total_mass() - intensity(model)), 1e-12);
  if (c.campbell) {
    gen::Rng rng(c.seed);
    const auto& g = geometry_of(model);
    const auto f = gen::random_integrand(g, rng);
    CampbellQuadrature q{c.resolution, {sub(f.center, Vec(g.dimension, f.radius)), add(f.center, Vec(g.dimension, f.radius))}};
    const auto t0 = Clock::now();
    const auto r = campbell_check(model, f, q);
    rep.timing("campbell", seconds_since(t0));
    rep.results()["campbell"] = {{"lhs", r.lhs}, {"rhs", r.rhs}, {"gap", r.gap}, {"resolution", c.resolution}};
    rep.assert_le("campbell_gap", r.gap, tol);
  }
  const fs::path out(c.out);
  io::write_text(out / "palm.csv", io::palm_csv(palm));
  return rep.finish(out);
}

int cmd_generate(const RunConfig& c) {
  const TorusGeometry g(c.dimension, c.period);
  gen::Rng rng(c.seed);
  std::optional<StationaryModel> model;
  if (c.kind == "lattice") {
    model = gen::lattice(g, c.n, Vec(c.dimension, c.offset));
  } else if (c.kind == "random") {
    model = gen::random_configuration(g, c.n, rng, c.random_weights);
  } else if (c.kind == "cosine") {
    model = gen::cosine_density(g, c.grid, c.amplitude, Vec(c.dimension, c.offset));
  } else {
    throw InvalidArgument("--kind must be lattice, random or cosine");
  }
  fs::path out(c.out);
  if (out.extension() != ".json") out /= "model.json";
  io::save_model(out, *model);
  std::cout << "wrote " << out.string() << '\n';
  return kPass;
}

// Values from the config file apply unless the same flag was given on the command line.
void merge_config(RunConfig& c, const CLI::App& sub) {
  if (c.config_path.empty()) return;
  const json j = io::read_json(c.config_path);
  if (!j.is_object()) throw InvalidArgument("config file must hold a JSON object");
  auto given = [&](const std::string& flag) { return sub.count("--" + flag) > 0; };
  try {
    for (const auto& [key, value] : j.items()) {
      if (given(key)) continue;
      if (key == "p") c.p = value.get<double>();
      else if (key == "method") c.method = value.get<std::string>();
      else if (key == "eps") c.eps = value.get<double>();
      else if (key == "grid") c.grid = value.get<int>();
      else if (key == "timesteps") c.timesteps = value.get<int>();
      else if (key == "tol") c.tol = value.get<double>();
      else if (key == "seed") c.seed = value.get<unsigned long>();
      else if (key == "out") c.out = value.get<std::string>();
      else if (key == "xi") c.xi = value.get<std::string>();
      else if (key == "eta") c.eta = value.get<std::string>();
      else if (key == "model") c.model = value.get<std::string>();
      else if (key == "rho0") c.rho0 = value.get<std::string>();
      else if (key == "rho1") c.rho1 = value.get<std::string>();
      else if (key == "at") c.at = value.get<std::vector<double>>();
      else if (key == "suite") c.suites = value.get<std::vector<std::string>>();
      else if (key == "fixtures") c.fixtures = value.get<int>();
      else if (key == "max-iters") c.max_iters = value.get<int>();
      else if (key == "gap-tol") c.gap_tol = value.get<double>();
      else throw InvalidArgument("unknown config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("bad config value: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transport between periodic stationary random measures"};
  app.require_subcommand(1);
  RunConfig c;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", c.config_path, "JSON config file; flags override its values");
    s->add_option("--p", c.p, "transport exponent p > 1");
    s->add_option("--method", c.method, "static solver: lp or sinkhorn")->check(CLI::IsMember({"lp", "sinkhorn"}));
    s->add_option("--eps", c.eps, "Sinkhorn regularization");
    s->add_option("--grid", c.grid, "space resolution per axis");
    s->add_option("--timesteps", c.timesteps, "time intervals");
    s->add_option("--tol", c.tol, "assertion / solver tolerance");
    s->add_option("--seed", c.seed, "random seed");
    s->add_option("--out", c.out, "output directory");
  };

  auto* st = app.add_subcommand("static", "static cost c_p, optimal plan and balancing kernel");
  common(st);
  st->add_option("--xi", c.xi, "source model file");
  st->add_option("--eta", c.eta, "target model file");
  st->add_flag("--shift-search", c.shift_search, "also optimize over relative shifts");

  auto* geo = app.add_subcommand("geodesic", "displacement geodesic, action and continuity-equation checks");
  common(geo);
  geo->add_option("--xi", c.xi, "source point model");
  geo->add_option("--eta", c.eta, "target point model");
  geo->add_option("--at", c.at, "times at which to extract the configuration");

  auto* bb = app.add_subcommand("bb", "grid Benamou-Brenier solve against the static grid reference");
  common(bb);
  bb->add_option("--rho0", c.rho0, "initial density model");
  bb->add_option("--rho1", c.rho1, "final density model");
  bb->add_option("--benchmark", c.benchmark, "built-in pair when no densities are given");
  bb->add_option("--gap-tol", c.gap_tol, "allowed relative static/dynamic gap");
  bb->add_option("--max-iters", c.max_iters, "iteration budget");

  auto* ver = app.add_subcommand("verify", "seeded property suite");
  common(ver);
  ver->add_option("--suite", c.suites, "suites: campbell balancing equality ce_refinement triangle")
      ->delimiter(',');
  ver->add_option("--fixtures", c.fixtures, "fixtures per suite");
  ver->add_flag("--corrupt", c.corrupt, "inject known defects (suites should fail)");

  auto* palm = app.add_subcommand("palm", "Palm measure and Campbell check of a model");
  common(palm);
  palm->add_option("--model", c.model, "model file");
  palm->add_flag("--campbell", c.campbell, "run the Campbell check with a seeded integrand");
  palm->add_option("--resolution", c.resolution, "Campbell quadrature nodes per axis");

  auto* g = app.add_subcommand("generate", "write a model file");
  common(g);
  g->add_option("--kind", c.kind, "lattice, random or cosine");
  g->add_option("--dimension", c.dimension, "torus dimension");
  g->add_option("--period", c.period, "torus period L");
  g->add_option("--n", c.n, "lattice points per axis, or number of random atoms");
  g->add_option("--offset", c.offset, "lattice offset or density shift per axis");
  g->add_option("--amplitude", c.amplitude, "cosine amplitude");
  g->add_flag("--random-weights", c.random_weights, "random atom weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInputError;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    c.command = sub->get_name();
    merge_config(c, *sub);
    validate_common(c);
    if (c.command == "static") return cmd_static(c);
    if (c.command == "geodesic") return cmd_geodesic(c);
    if (c.command == "bb") return cmd_bb(c);
    if (c.command == "verify") return cmd_verify(c);
    if (c.command == "palm") return cmd_palm(c);
    if (c.command == "generate") return cmd_generate(c);
    return kInputError;
  } catch (const ConvergenceError& e) {
    std::cerr << "numerical failure: " << e.what() << " (residual " << e.residual() << ")\n";
    return kNumericalFailure;
  } catch (const InvalidArgument& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const json::exception& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kInputError;
  } catch (const Error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  }
}
