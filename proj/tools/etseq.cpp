// etseq: solve, sweep and check two-stage futures/spot market equilibria.
//
//   etseq solve     --config default.cfg --competition cournot --risk neutral
//   etseq sweep     --param res --from 0 --to 10000 --step 1000 --risk averse
//   etseq stability --counts 150,200,320
//   etseq validate  --config broken.cfg
//
// Every flag can also be set through ETSEQ_<FLAG> (e.g. ETSEQ_SEED=7).
// Exit status: 0 success, 1 invalid input, 2 non-convergence.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "etseq/config_io.hpp"
#include "etseq/equilibrium.hpp"
#include "etseq/report.hpp"
#include "etseq/scenarios.hpp"
#include "etseq/sensitivity.hpp"

namespace fs = std::filesystem;
using namespace etseq;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Flags {
  std::string config;
  std::string competition;
  std::string risk = "neutral";
  std::optional<double> phi, alpha;
  std::optional<std::size_t> scenarios;
  std::optional<std::uint64_t> seed;
  std::string param = "res";
  std::optional<double> from, to, step;
  std::string market = "both";
  std::string out = "out";
  unsigned threads = 0;
  bool verbose = false;
  std::vector<std::size_t> counts{150, 200, 320, 350, 400, 500};
};

struct InvalidInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "market configuration file")->envname("ETSEQ_CONFIG");
  app->add_option("--competition", f.competition, "cournot | perfect")
      ->check(CLI::IsMember({"cournot", "perfect"}))
      ->envname("ETSEQ_COMPETITION");
  app->add_option("--risk", f.risk, "neutral | averse")
      ->check(CLI::IsMember({"neutral", "averse"}))
      ->envname("ETSEQ_RISK");
  app->add_option("--phi", f.phi, "weight on CVaR")->envname("ETSEQ_PHI");
  app->add_option("--alpha", f.alpha, "CVaR confidence level")->envname("ETSEQ_ALPHA");
  app->add_option("--scenarios", f.scenarios, "number of scenarios")->envname("ETSEQ_SCENARIOS");
  app->add_option("--seed", f.seed, "scenario seed")->envname("ETSEQ_SEED");
  app->add_option("--market", f.market, "general | spot-only | both")
      ->check(CLI::IsMember({"general", "spot-only", "both"}))
      ->envname("ETSEQ_MARKET");
  app->add_option("--out", f.out, "output directory")->envname("ETSEQ_OUT");
  app->add_option("--threads", f.threads, "worker cap (0 = all cores)")->envname("ETSEQ_THREADS");
  app->add_flag("--verbose", f.verbose, "write solver traces")->envname("ETSEQ_VERBOSE");
}

MarketConfig build_config(const Flags& f) {
  MarketConfig cfg = f.config.empty() ? default_config() : load_config(f.config);
  if (f.competition == "cournot")
    cfg.set_competition(Competition::cournot);
  else if (f.competition == "perfect")
    cfg.set_competition(Competition::perfect);
  if (f.alpha)
    cfg.risk.alpha = *f.alpha;
  if (f.risk == "neutral") {
    if (f.phi && *f.phi != 0.0)
      throw InvalidInput("--risk neutral conflicts with --phi " + std::to_string(*f.phi));
    cfg.risk.phi = 0.0;
  } else {
    cfg.risk.phi = f.phi ? *f.phi : (cfg.risk.phi > 0.0 ? cfg.risk.phi : 1.0);
  }
  if (f.scenarios)
    cfg.n_scenarios = *f.scenarios;
  if (f.seed)
    cfg.seed = *f.seed;
  const auto report = validate(cfg);
  if (!report.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& v : report)
      msg += "\n  - " + v;
    throw InvalidInput(msg);
  }
  return cfg;
}

SolverOptions solver_options(const Flags& f) {
  SolverOptions opt;
  opt.trace = f.verbose;
  return opt;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os)
    throw InvalidInput("cannot write " + p.string());
  return os;
}

void write_manifest(const fs::path& dir, const Flags& f, const std::string& mode,
                    const MarketConfig& cfg, const SolverOptions& opt) {
  nlohmann::ordered_json m;
  m["tool"] = "etseq";
  m["version"] = kVersion;
  m["mode"] = mode;
  m["config_path"] = f.config.empty() ? "<builtin default>" : f.config;
  m["config_hash"] = config_hash(cfg);
  m["seed"] = cfg.seed;
  m["scenarios"] = cfg.n_scenarios;
  m["competition"] = to_string(cfg.conjecture.kind);
  m["risk"] = {{"phi", cfg.risk.phi}, {"alpha", cfg.risk.alpha}};
  m["output_dir"] = dir.string();
  m["tolerances"] = {{"comp", opt.tol_comp},       {"stat", opt.tol_stat},
                     {"feas", opt.tol_feas},       {"best_response", opt.br_tol},
                     {"max_sweeps", opt.max_sweeps}, {"max_newton", opt.max_newton},
                     {"damping", opt.damping}};
  m["started_at"] = now_iso();
  auto os = open_out(dir / "manifest.json");
  os << m.dump(2) << '\n';
  std::ofstream cfg_copy(dir / "config.cfg");
  cfg_copy << write_config(cfg);
}

int cmd_solve(const Flags& f) {
  const MarketConfig cfg = build_config(f);
  const SolverOptions opt = solver_options(f);
  const fs::path dir(f.out);
  fs::create_directories(dir);
  write_manifest(dir, f, "solve", cfg, opt);
  const auto set = sample_scenarios(cfg);
  {
    auto os = open_out(dir / "scenarios.csv");
    write_scenarios_csv(os, set, cfg);
  }
  int code = 0;
  if (f.market != "spot-only") {
    const auto sol = cfg.risk.phi == 0.0 && f.risk == "neutral"
                         ? risk_neutral_equilibrium(cfg, set, opt)
                         : solve_equilibrium(cfg, set, opt);
    {
      auto os = open_out(dir / "solution.json");
      os << solution_json(sol, cfg, set).dump(2) << '\n';
    }
    {
      auto os = open_out(dir / "solution.csv");
      write_solution_csv(os, sol, cfg, set);
    }
    if (f.verbose) {
      auto os = open_out(dir / "trace.csv");
      write_trace_csv(os, sol.trace, config_hash(cfg));
    }
    std::cerr << "status " << to_string(sol.status) << "  pF " << fmt9(sol.fd.pF)
              << "  residual " << fmt9(sol.residual) << "  kkt " << fmt9(sol.kkt_residual) << '\n';
    if (sol.status != SolveStatus::converged)
      code = 2;
  }
  if (f.market != "general") {
    auto os = open_out(dir / "spot_only.csv");
    os << "config_hash,scenario,pS,conv_q,res_q,emissions\n";
    const auto hash = config_hash(cfg);
    for (const auto& s : set) {
      const auto sp = spot_only_equilibrium(s, cfg.conjecture);
      double q = 0.0, e = 0.0, r = 0.0;
      for (std::size_t i = 0; i < sp.qS_conv.size(); ++i) {
        q += sp.qS_conv[i];
        e += sp.epsS[i];
      }
      for (double v : sp.qS_res)
        r += v;
      os << hash << ',' << s.index << ',' << fmt9(sp.pS) << ',' << fmt9(q) << ',' << fmt9(r)
         << ',' << fmt9(e) << '\n';
    }
  }
  return code;
}

int cmd_sweep(const Flags& f) {
  const MarketConfig cfg = build_config(f);
  SweepSpec spec;
  spec.parameter = f.param == "res" ? SweepParameter::res_penetration : SweepParameter::co2_price;
  const bool res = spec.parameter == SweepParameter::res_penetration;
  spec.grid = make_grid(f.from.value_or(0.0), f.to.value_or(res ? 10000.0 : 50.0),
                        f.step.value_or(res ? 1000.0 : 5.0));
  spec.base_config = cfg;
  spec.general_model = f.market != "spot-only";
  spec.spot_only = f.market != "general";
  spec.risk_averse = f.risk == "averse";
  spec.options = solver_options(f);
  spec.threads = f.threads;
  check_sweep(spec);

  const fs::path dir(f.out);
  fs::create_directories(dir);
  write_manifest(dir, f, std::string("sweep-") + f.param, cfg, spec.options);
  const auto rows = run_sweep(spec);
  {
    auto os = open_out(dir / ("sweep_" + f.param + ".csv"));
    write_sweep_csv(os, rows, cfg, spec.parameter);
  }
  nlohmann::ordered_json meta;
  meta["config_hash"] = config_hash(cfg);
  meta["seed"] = cfg.seed;
  meta["parameter"] = f.param;
  meta["tolerances"] = {{"comp", spec.options.tol_comp}, {"stat", spec.options.tol_stat}};
  nlohmann::ordered_json points = nlohmann::ordered_json::array();
  int code = 0;
  for (const auto& r : rows) {
    const bool ok = !spec.general_model || (r.error.empty() && r.status == SolveStatus::converged);
    if (!ok)
      code = 2;
    points.push_back({{"value", r.value},
                      {"status", spec.general_model ? to_string(r.status) : "skipped"},
                      {"residual", r.residual},
                      {"kkt_residual", r.kkt_residual},
                      {"profit_scale", r.profit_scale},
                      {"gradient_scale", r.gradient_scale},
                      {"error", r.error}});
    std::cerr << f.param << '=' << fmt9(r.value) << "  "
              << (spec.general_model ? to_string(r.status) : "spot-only") << "  pF "
              << fmt9(r.pF) << "  pS " << fmt9(r.pS) << "  pS(spot-only) "
              << fmt9(r.pS_spot_only) << (r.error.empty() ? "" : "  error: " + r.error) << '\n';
  }
  meta["points"] = std::move(points);
  auto os = open_out(dir / ("sweep_" + f.param + "_metadata.json"));
  os << meta.dump(2) << '\n';
  return code;
}

int cmd_stability(const Flags& f) {
  const MarketConfig cfg = build_config(f);
  const SolverOptions opt = solver_options(f);
  const fs::path dir(f.out);
  fs::create_directories(dir);
  write_manifest(dir, f, "stability", cfg, opt);
  const auto table = stability_study(cfg, f.counts, f.risk == "averse", opt, f.threads);
  auto os = open_out(dir / "stability.csv");
  write_stability_csv(os, table, cfg);
  int code = 0;
  for (const auto& r : table.rows) {
    if (!r.outcome.error.empty() || r.outcome.status != SolveStatus::converged)
      code = 2;
    std::cerr << "scenarios=" << r.n_scenarios << "  pF " << fmt9(r.outcome.pF) << "  pS "
              << fmt9(r.outcome.pS) << (r.outcome.error.empty() ? "" : "  error: " + r.outcome.error)
              << '\n';
  }
  std::cerr << "spread pF " << fmt9(table.spread_pF) << "  pS " << fmt9(table.spread_pS) << '\n';
  return code;
}

int cmd_validate(const Flags& f) {
  MarketConfig cfg = f.config.empty() ? default_config() : load_config(f.config);
  const auto report = validate(cfg);
  if (report.empty()) {
    std::cout << "ok  " << config_hash(cfg) << '\n';
    return 0;
  }
  for (const auto& v : report)
    std::cerr << v << '\n';
  return 1;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage futures/spot electricity market equilibria with CO2 allowances"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Flags f;

  auto* solve = app.add_subcommand("solve", "solve one equilibrium");
  auto* sweep = app.add_subcommand("sweep", "RES or CO2 sensitivity sweep");
  auto* stab = app.add_subcommand("stability", "re-solve across scenario counts");
  auto* val = app.add_subcommand("validate", "check a configuration file");
  for (auto* sc : {solve, sweep, stab})
    add_common(sc, f);
  val->add_option("--config", f.config, "market configuration file")->envname("ETSEQ_CONFIG");
  sweep->add_option("--param", f.param, "res | co2")
      ->check(CLI::IsMember({"res", "co2"}))
      ->envname("ETSEQ_PARAM");
  sweep->add_option("--from", f.from, "first grid value")->envname("ETSEQ_FROM");
  sweep->add_option("--to", f.to, "last grid value")->envname("ETSEQ_TO");
  sweep->add_option("--step", f.step, "grid step")->envname("ETSEQ_STEP");
  stab->add_option("--counts", f.counts, "scenario counts")->delimiter(',')->envname(
      "ETSEQ_COUNTS");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*solve)
      return cmd_solve(f);
    if (*sweep)
      return cmd_sweep(f);
    if (*stab)
      return cmd_stability(f);
    return cmd_validate(f);
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ModelError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
