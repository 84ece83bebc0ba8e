#include <gtest/gtest.h>

#include <random>

#include "duopoly_oracle.hpp"
#include "etseq/equilibrium.hpp"
#include "support.hpp"

using namespace etseq;

namespace {

void expect_certified(const EquilibriumSolution& sol) {
  EXPECT_EQ(sol.status, SolveStatus::converged);
  EXPECT_TRUE(sol.accepted());
  EXPECT_GE(sol.residual, 0.0);
  EXPECT_LE(sol.residual, 1e-6 * sol.profit_scale);
  EXPECT_LE(sol.kkt_residual, 1e-6 * sol.gradient_scale);
  EXPECT_LE(sol.feasibility, 1e-6);
}

void expect_nash(const EquilibriumSolution& sol, const ScenarioSet& set, const MarketConfig& cfg) {
  const auto values = generator_objectives(sol.fd, set, cfg);
  for (std::size_t k = 0; k < cfg.n_gen(); ++k) {
    const auto br = best_response(k, sol.fd, set, cfg);
    EXPECT_LE(br.value - values[k], 1e-4 * std::max(1.0, std::abs(values[k]))) << "generator " << k;
    EXPECT_NEAR(values[k], sol.objective[k], 1e-9 * std::max(1.0, std::abs(values[k])));
  }
}

MarketConfig table1(std::size_t scenarios) {
  auto cfg = default_config();
  cfg.n_scenarios = scenarios;
  return cfg;
}

bool rel_close(double a, double b, double rel) {
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1.0});
}

} // namespace

TEST(Equilibrium, DuopolyMatchesGridOracle) {
  const auto cfg = testing_support::duopoly_config();
  const auto set = sample_scenarios(cfg);
  const auto sol = risk_neutral_equilibrium(cfg, set);
  expect_certified(sol);
  const testing_support::DuopolyOracle oracle{&set, cfg.demand.gammaF, cfg.demand.betaF};
  const double q = oracle.solve(5.0, 5e-3);
  EXPECT_NEAR(sol.fd.qF[0], q, 1e-2);
  EXPECT_NEAR(sol.fd.qF[1], q, 1e-2);
  EXPECT_GT(q, 0.05);
  EXPECT_LT(q, 4.9);
}

TEST(Equilibrium, Table1FuturesPriceInPublishedRange) {
  const auto cfg = table1(125);
  const auto set = sample_scenarios(cfg);
  const auto sol = risk_neutral_equilibrium(cfg, set);
  expect_certified(sol);
  EXPECT_GE(sol.fd.pF, 103.0);
  EXPECT_LE(sol.fd.pF, 126.0);
  expect_nash(sol, set, cfg);
}

TEST(Equilibrium, RiskAverseNashProperty) {
  auto cfg = table1(50);
  cfg.risk.phi = 0.5;
  const auto set = sample_scenarios(cfg);
  const auto sol = solve_equilibrium(cfg, set);
  expect_certified(sol);
  expect_nash(sol, set, cfg);
}

TEST(Equilibrium, PerfectCompetitionCertified) {
  auto cfg = table1(50);
  cfg.set_competition(Competition::perfect);
  const auto set = sample_scenarios(cfg);
  const auto sol = risk_neutral_equilibrium(cfg, set);
  expect_certified(sol);
  double mean_pS = 0.0;
  for (const auto& sp : sol.spot)
    mean_pS += sp.pS / static_cast<double>(sol.spot.size());
  EXPECT_NEAR(sol.fd.pF, mean_pS, 1e-6 * sol.fd.pF);
}

TEST(Equilibrium, ZeroRiskWeightPathsAgree) {
  const auto cfg = table1(50);
  const auto set = sample_scenarios(cfg);
  const auto rn = risk_neutral_equilibrium(cfg, set);
  const auto ra = solve_equilibrium(cfg, set);
  expect_certified(rn);
  expect_certified(ra);
  EXPECT_FALSE(rn.risk_averse_path);
  EXPECT_TRUE(ra.risk_averse_path);
  EXPECT_TRUE(rel_close(rn.fd.pF, ra.fd.pF, 1e-4));
  for (std::size_t k = 0; k < cfg.n_gen(); ++k) {
    EXPECT_TRUE(rel_close(rn.fd.qF[k], ra.fd.qF[k], 1e-4));
    EXPECT_TRUE(rel_close(rn.panel.expected[k], ra.panel.expected[k], 1e-4));
    EXPECT_TRUE(rel_close(rn.panel.cvar[k], ra.panel.cvar[k], 1e-4));
  }
  for (std::size_t i = 0; i < cfg.n_conv(); ++i)
    EXPECT_TRUE(rel_close(rn.fd.epsF[i], ra.fd.epsF[i], 1e-4));
  for (std::size_t w = 0; w < set.size(); ++w)
    EXPECT_TRUE(rel_close(rn.spot[w].pS, ra.spot[w].pS, 1e-4));
}

TEST(Equilibrium, RiskNeutralPathRequiresZeroWeight) {
  auto cfg = table1(50);
  cfg.risk.phi = 0.3;
  const auto set = sample_scenarios(cfg);
  EXPECT_THROW(risk_neutral_equilibrium(cfg, set), ModelError);
}

TEST(Equilibrium, ConventionalGeneratorRequired) {
  auto cfg = table1(20);
  const auto set = sample_scenarios(cfg);
  cfg.conventional.clear();
  cfg.set_competition(Competition::cournot);
  EXPECT_THROW(risk_neutral_equilibrium(cfg, set), ModelError);
}

TEST(Equilibrium, EmptyBoxIsInfeasible) {
  auto cfg = table1(20);
  const auto set = sample_scenarios(cfg);
  cfg.conventional[0].qF_min = 100.0;
  cfg.conventional[0].qF_max = 50.0;
  EXPECT_THROW(solve_equilibrium(cfg, set), InfeasibleBounds);
  cfg = table1(20);
  cfg.res[0].qF_min = 6000.0;
  cfg.res[0].qF_max_tracks_mean = false;
  cfg.res[0].qF_max = 10.0;
  EXPECT_THROW(solve_equilibrium(cfg, set), InfeasibleBounds);
}

TEST(Equilibrium, ExhaustedBudgetReportsNonConvergence) {
  auto cfg = table1(50);
  cfg.risk.phi = 1.0;
  const auto set = sample_scenarios(cfg);
  SolverOptions opt;
  opt.max_sweeps = 0;
  opt.max_newton = 0;
  opt.trace = true;
  const auto sol = solve_equilibrium(cfg, set, opt);
  EXPECT_EQ(sol.status, SolveStatus::non_convergence);
  EXPECT_FALSE(sol.accepted());
  EXPECT_EQ(sol.newton_steps, 0);
  EXPECT_EQ(sol.fd.qF.size(), cfg.n_gen());
}

TEST(Equilibrium, TraceRecordedWhenRequested) {
  const auto cfg = table1(20);
  const auto set = sample_scenarios(cfg);
  SolverOptions opt;
  opt.trace = true;
  const auto sol = risk_neutral_equilibrium(cfg, set, opt);
  ASSERT_FALSE(sol.trace.empty());
  EXPECT_EQ(sol.trace.front().phase, "diagonalization");
  EXPECT_TRUE(risk_neutral_equilibrium(cfg, set).trace.empty());
}

TEST(Equilibrium, FlatAllowanceDirection) {
  auto cfg = table1(30);
  cfg.carbon.cv_pS = 0.0; // spot allowance price equals the futures price
  const auto set = sample_scenarios(cfg);
  const auto sol = risk_neutral_equilibrium(cfg, set);
  expect_certified(sol);
  for (std::size_t i = 0; i < cfg.n_conv(); ++i) {
    ASSERT_TRUE(sol.eps_flat[i]);
    double own = 0.0;
    for (std::size_t w = 0; w < set.size(); ++w)
      own += set[w].prob * set[w].eta[i] * (sol.spot[w].qS_conv[i] + sol.fd.qF[i]);
    const auto& g = cfg.conventional[i];
    EXPECT_NEAR(sol.fd.epsF[i], std::clamp(own, g.epsF_min, g.epsF_max), 1e-6 * own);
  }
  // Profits do not depend on the allowance split.
  auto moved = sol.fd;
  for (std::size_t i = 0; i < cfg.n_conv(); ++i)
    moved.epsF[i] = cfg.conventional[i].epsF_max * (0.1 + 0.2 * i);
  for (std::size_t w = 0; w < set.size(); ++w) {
    const auto a = scenario_profits(set[w], sol.fd, sol.spot[w], cfg.carbon.pF_co2);
    const auto sp = evaluate_spot(set[w], moved, cfg.conjecture);
    const auto b = scenario_profits(set[w], moved, sp, cfg.carbon.pF_co2);
    for (std::size_t k = 0; k < a.size(); ++k)
      EXPECT_NEAR(a[k], b[k], 1e-9 * std::max(1.0, std::abs(a[k])));
  }
}

TEST(BestResponse, AllowancesAtUpperBoundWhenSpotIsDearer) {
  auto cfg = testing_support::flat_config(2, 0);
  cfg.carbon = {10.0, 12.0, 0.0};
  const auto set = sample_scenarios(cfg);
  const auto fd = make_decision({100.0, 100.0}, {0.0, 0.0}, cfg.demand);
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_EQ(best_response(k, fd, set, cfg).epsF, cfg.conventional[k].epsF_max);
  cfg.carbon = {12.0, 10.0, 0.0};
  const auto set2 = sample_scenarios(cfg);
  EXPECT_EQ(best_response(0, fd, set2, cfg).epsF, cfg.conventional[0].epsF_min);
}

TEST(BestResponse, MonopolyMatchesGridSearch) {
  for (double phi : {0.0, 0.5, 1.0}) {
    auto cfg = testing_support::flat_config(1, 0);
    cfg.demand.cv_gamma = 0.2;
    cfg.conventional[0].cv_b = 0.3;
    cfg.risk = {phi, 0.8};
    cfg.n_scenarios = 20;
    const auto set = sample_scenarios(cfg);
    const auto zero = make_decision({0.0}, {0.0}, cfg.demand);
    const auto br = best_response(0, zero, set, cfg);
    double best_q = 0.0, best_v = -1e300;
    const double step = 0.05;
    for (int s = 0; s <= 20000; ++s) {
      const double q = s * step;
      const double v = generator_objectives(make_decision({q}, {br.epsF}, cfg.demand), set, cfg)[0];
      if (v > best_v) {
        best_v = v;
        best_q = q;
      }
    }
    EXPECT_NEAR(br.qF, best_q, 2 * step) << "phi " << phi;
    EXPECT_GE(br.value, best_v - 1e-6 * std::abs(best_v));
    EXPECT_LE(br.value - best_v, 1e-3 * std::max(1.0, std::abs(best_v)));
  }
}

TEST(Stationarity, InteriorRiskNeutralOptimumHasZeroResiduals) {
  // Single generator with an interior optimum: every dual is zero.
  auto cfg = testing_support::flat_config(1, 0);
  cfg.carbon.cv_pS = 0.0;
  const auto set = sample_scenarios(cfg);
  const auto sol = risk_neutral_equilibrium(cfg, set);
  expect_certified(sol);
  EXPECT_GT(sol.fd.qF[0], 0.0);
  EXPECT_LT(sol.fd.qF[0], cfg.conventional[0].qF_max);
  EXPECT_LE(sol.duals[0].nu_min, 1e-12 * sol.gradient_scale);
  EXPECT_LE(sol.duals[0].nu_max, 1e-12 * sol.gradient_scale);
  auto candidate = sol;
  candidate.duals[0].nu_min = candidate.duals[0].nu_max = 0.0;
  candidate.duals[0].lambda_min = candidate.duals[0].lambda_max = 0.0;
  const auto r = stationarity_residuals(candidate, cfg, set);
  EXPECT_NEAR(r.a[0], 0.0, 1e-6 * sol.gradient_scale);
  EXPECT_EQ(r.b[0], 0.0);
  EXPECT_EQ(r.d[0], 0.0);
  for (double c : r.c[0])
    EXPECT_EQ(c, 0.0);
  EXPECT_EQ(r.complementarity, 0.0);
}

TEST(Stationarity, MisallocatedTailMassShowsInResidual) {
  auto cfg = table1(50);
  cfg.risk.phi = 0.6;
  const auto set = sample_scenarios(cfg);
  auto sol = solve_equilibrium(cfg, set);
  expect_certified(sol);
  const auto base = stationarity_residuals(sol, cfg, set);
  for (std::size_t k = 0; k < cfg.n_gen(); ++k) {
    double sum = 0.0;
    for (double m : sol.duals[k].mu)
      sum += m;
    EXPECT_NEAR(sum, cfg.risk.phi, 1e-6);
    EXPECT_NEAR(base.d[k], 0.0, 1e-6);
  }
  sol.duals[1].mu[3] += 0.125;
  const auto r = stationarity_residuals(sol, cfg, set);
  EXPECT_NEAR(std::abs(r.d[1]), std::abs(base.d[1] + 0.125), 1e-12);
  EXPECT_NEAR(r.c[1][3], base.c[1][3] - 0.125, 1e-12);
}

TEST(Duals, CvarReconstructedFromRiskVariables) {
  std::mt19937_64 rng(41);
  for (int t = 0; t < 6; ++t) {
    auto cfg = testing_support::random_config(rng, 40);
    cfg.risk = {0.25 + 0.15 * t, 0.9};
    const auto set = sample_scenarios(cfg);
    const auto sol = solve_equilibrium(cfg, set);
    expect_certified(sol);
    for (std::size_t k = 0; k < cfg.n_gen(); ++k) {
      const auto& du = sol.duals[k];
      double tail = 0.0, mu = 0.0;
      for (std::size_t w = 0; w < set.size(); ++w) {
        tail += set[w].prob * du.eta[w];
        mu += du.mu[w];
        EXPECT_GE(du.eta[w], 0.0);
        const double kappa = cfg.risk.phi * set[w].prob / 0.1;
        EXPECT_NEAR(du.mu[w] + du.theta[w], kappa, 1e-12);
      }
      const double value = du.xi - tail / 0.1;
      EXPECT_NEAR(value, sol.panel.cvar[k], 1e-8 * std::max(1.0, sol.profit_scale));
      EXPECT_NEAR(mu, cfg.risk.phi, 1e-6);
      EXPECT_LE(sol.panel.cvar[k], sol.panel.expected[k] + 1e-9);
    }
  }
}

TEST(Duals, SolverCvarMatchesSortedReference) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> z(1e5, 3e4);
  std::vector<std::pair<double, double>> scratch;
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 10 + rng() % 300;
    std::vector<double> v(n), p(n, 1.0 / static_cast<double>(n));
    for (auto& x : v)
      x = z(rng);
    const double alpha = 0.5 + 0.45 * static_cast<double>(rng() % 1000) / 1000.0;
    const double ref = cvar(v, p, alpha).cvar;
    EXPECT_NEAR(detail::cvar_value(v, p, alpha, scratch), ref, 1e-8 * std::abs(ref));
  }
}
