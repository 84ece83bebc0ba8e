#include <gtest/gtest.h>

#include <sstream>

#include "duopoly_oracle.hpp"
#include "etseq/report.hpp"
#include "etseq/sensitivity.hpp"
#include "support.hpp"

using namespace etseq;

namespace {

SweepSpec spec_for(SweepParameter p, std::vector<double> grid, std::size_t scenarios) {
  SweepSpec spec;
  spec.parameter = p;
  spec.grid = std::move(grid);
  spec.base_config = default_config();
  spec.base_config.n_scenarios = scenarios;
  spec.threads = 1;
  return spec;
}

std::string csv(const std::vector<SweepRow>& rows, const SweepSpec& spec) {
  std::ostringstream os;
  write_sweep_csv(os, rows, spec.base_config, spec.parameter);
  return os.str();
}

} // namespace

TEST(Grid, DefaultGrids) {
  const auto res = make_grid(0, 10000, 1000);
  ASSERT_EQ(res.size(), 11u);
  EXPECT_EQ(res.back(), 10000.0);
  const auto co2 = make_grid(0, 50, 5);
  ASSERT_EQ(co2.size(), 11u);
  EXPECT_EQ(co2[3], 15.0);
  EXPECT_THROW(make_grid(0, 10, 0), ModelError);
  EXPECT_THROW(make_grid(10, 0, 1), ModelError);
}

TEST(Sweep, RejectsBadSpecs) {
  auto spec = spec_for(SweepParameter::res_penetration, {}, 20);
  EXPECT_THROW(run_sweep(spec), ModelError);
  spec.grid = {0, 2000, 2000};
  EXPECT_THROW(run_sweep(spec), ModelError);
  spec.grid = {0, 10001};
  EXPECT_THROW(run_sweep(spec), ModelError);
  spec.grid = {-1, 10};
  EXPECT_THROW(run_sweep(spec), ModelError);
  spec.parameter = SweepParameter::co2_price;
  spec.grid = {0, 60};
  EXPECT_THROW(run_sweep(spec), ModelError);
  spec.grid = {0, 50};
  spec.base_config.risk.phi = 0.5;
  EXPECT_THROW(run_sweep(spec), ModelError);
  spec.risk_averse = true;
  spec.general_model = spec.spot_only = false;
  EXPECT_THROW(run_sweep(spec), ModelError);
}

TEST(Sweep, ResValueSplitAcrossRenewables) {
  auto cfg = default_config();
  cfg.res.push_back(cfg.res[0]);
  cfg.res[1].id = "res2";
  const auto c = sweep_config(cfg, SweepParameter::res_penetration, 6000.0);
  EXPECT_EQ(c.res[0].Q_mean, 3000.0);
  EXPECT_EQ(c.res[1].Q_mean, 3000.0);
  EXPECT_EQ(c.res[0].futures_cap(), 3000.0);
  const auto k = sweep_config(cfg, SweepParameter::co2_price, 40.0);
  EXPECT_EQ(k.carbon.pF_co2, 40.0);
  EXPECT_EQ(k.carbon.pS_co2_mean, 40.0);
}

TEST(Sweep, NoRenewablesAtZeroPenetration) {
  const auto rows = run_sweep(spec_for(SweepParameter::res_penetration, {0}, 50));
  ASSERT_EQ(rows.size(), 1u);
  const auto& r = rows[0];
  EXPECT_TRUE(r.error.empty()) << r.error;
  EXPECT_EQ(r.status, SolveStatus::converged);
  EXPECT_EQ(r.res_qF, 0.0);
  EXPECT_NEAR(r.res_qS, 0.0, 1e-12);
  EXPECT_NEAR(r.res_total, 0.0, 1e-12);
  EXPECT_NEAR(r.res_profit, 0.0, 1e-9);
  EXPECT_EQ(r.spot_only_res_q, 0.0);
  EXPECT_GT(r.conv_total, 0.0);
}

TEST(Sweep, ZeroCarbonPriceRemovesAllowanceTerms) {
  auto spec = spec_for(SweepParameter::co2_price, {0}, 50);
  const auto rows = run_sweep(spec);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].status, SolveStatus::converged);
  // Same market with zero intensities: identical prices, quantities and profits.
  auto clean = sweep_config(spec.base_config, SweepParameter::co2_price, 0.0);
  auto set = sample_scenarios(clean);
  for (const auto& s : set)
    EXPECT_EQ(s.pS_co2, 0.0);
  const auto sol = risk_neutral_equilibrium(clean, set);
  for (auto& s : set.scenarios)
    for (auto& e : s.eta)
      e = 0.0;
  const auto sol0 = risk_neutral_equilibrium(clean, set);
  EXPECT_NEAR(sol.fd.pF, sol0.fd.pF, 1e-6 * sol.fd.pF);
  for (std::size_t k = 0; k < clean.n_gen(); ++k) {
    EXPECT_NEAR(sol.fd.qF[k], sol0.fd.qF[k], 1e-6 * std::max(1.0, sol.fd.qF[k]));
    EXPECT_NEAR(sol.panel.expected[k], sol0.panel.expected[k],
                1e-6 * std::abs(sol.panel.expected[k]));
  }
  EXPECT_NEAR(rows[0].pF, sol.fd.pF, 1e-9 * sol.fd.pF);
}

TEST(Sweep, FuturesPriceFallsWithRenewables) {
  const auto rows =
      run_sweep(spec_for(SweepParameter::res_penetration, make_grid(0, 10000, 1000), 125));
  ASSERT_EQ(rows.size(), 11u);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    EXPECT_EQ(rows[k].status, SolveStatus::converged);
    EXPECT_EQ(rows[k].value, 1000.0 * k);
    if (k > 0) {
      EXPECT_LT(rows[k].pF, rows[k - 1].pF);
    }
  }
}

TEST(Sweep, FuturesPriceRisesWithCarbonPrice) {
  const auto rows = run_sweep(spec_for(SweepParameter::co2_price, make_grid(0, 50, 10), 100));
  std::vector<double> pF;
  for (const auto& r : rows) {
    EXPECT_EQ(r.status, SolveStatus::converged);
    pF.push_back(r.pF);
  }
  EXPECT_LE(isotonic_deviation(pF, true), 0.02);
  EXPECT_GT(pF.back(), pF.front());
}

TEST(Sweep, CommonRandomNumbersAreBitIdentical) {
  auto spec = spec_for(SweepParameter::res_penetration, {0, 2500, 5000, 7500}, 40);
  const auto a = csv(run_sweep(spec), spec);
  const auto b = csv(run_sweep(spec), spec);
  spec.threads = 3;
  const auto c = csv(run_sweep(spec), spec);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(Sweep, NonConvergenceFlaggedPerRow) {
  auto spec = spec_for(SweepParameter::res_penetration, {1000, 2000}, 30);
  spec.options.max_sweeps = 0;
  spec.options.max_newton = 0;
  const auto rows = run_sweep(spec);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_TRUE(r.solved);
    EXPECT_EQ(r.status, SolveStatus::non_convergence);
  }
  const auto text = csv(rows, spec);
  EXPECT_NE(text.find("non_convergence"), std::string::npos);
}

TEST(Sweep, SpotOnlyVariantAlone) {
  auto spec = spec_for(SweepParameter::res_penetration, {3000}, 30);
  spec.general_model = false;
  const auto rows = run_sweep(spec);
  EXPECT_FALSE(rows[0].solved);
  EXPECT_GT(rows[0].pS_spot_only, 0.0);
  EXPECT_EQ(rows[0].pF, 0.0);
}

TEST(Summary, SymmetricDuopolyColumnsMatch) {
  const auto cfg = testing_support::duopoly_config();
  const auto set = sample_scenarios(cfg);
  const auto row = summarize_equilibrium(risk_neutral_equilibrium(cfg, set), set);
  EXPECT_NEAR(row.qF[0], row.qF[1], 1e-6);
  EXPECT_NEAR(row.qS[0], row.qS[1], 1e-6);
  EXPECT_NEAR(row.profit[0], row.profit[1], 1e-6 * std::abs(row.profit[0]));
  EXPECT_NEAR(row.cvar[0], row.cvar[1], 1e-6 * std::max(1.0, std::abs(row.cvar[0])));
}

TEST(Summary, HandBuiltArithmetic) {
  ScenarioSet set;
  for (int w = 0; w < 2; ++w) {
    Scenario s = testing_support::make_scenario({0, 0}, {1, 1}, {0.5, 0.25}, {100.0}, 0, 1, 0);
    s.index = w;
    s.prob = 0.5;
    set.scenarios.push_back(s);
  }
  EquilibriumSolution sol;
  sol.fd = {{10.0, 20.0, 30.0}, {4.0, 6.0}, 90.0};
  SpotOutcome a, b;
  a.pS = 80.0;
  a.qS_conv = {2.0, 4.0};
  a.qS_res = {70.0};
  a.epsS = {2.0, -0.5};
  b.pS = 100.0;
  b.qS_conv = {6.0, 8.0};
  b.qS_res = {60.0};
  b.epsS = {4.0, 1.0};
  sol.spot = {a, b};
  sol.panel.profit = {{1, 3}, {5, 7}, {9, 11}};
  sol.panel.summarize(probabilities(set), 0.5);
  const auto row = summarize_equilibrium(sol, set);
  EXPECT_EQ(row.pF, 90.0);
  EXPECT_EQ(row.pS, 90.0);
  EXPECT_EQ(row.qS, (std::vector<double>{4.0, 6.0, 65.0}));
  EXPECT_EQ(row.conv_qF, 30.0);
  EXPECT_EQ(row.conv_qS, 10.0);
  EXPECT_EQ(row.conv_total, 40.0);
  EXPECT_EQ(row.res_qF, 30.0);
  EXPECT_EQ(row.res_qS, 65.0);
  EXPECT_EQ(row.res_total, 95.0);
  EXPECT_EQ(row.conv_profit, 2.0 + 6.0);
  EXPECT_EQ(row.res_profit, 10.0);
  EXPECT_EQ(row.conv_cvar, 1.0 + 5.0);
  EXPECT_EQ(row.epsS, (std::vector<double>{3.0, 0.25}));
  EXPECT_EQ(row.emissions, 3.0 + 4.0 + 0.25 + 6.0);
  // Pooled: 0.75 * E[total conventional output] = 0.75 * 0.5 * ((36) + (44)).
  EXPECT_EQ(row.emissions_pooled, 30.0);
}

TEST(Isotonic, Deviation) {
  EXPECT_EQ(isotonic_deviation({1, 2, 3, 4}, true), 0.0);
  EXPECT_EQ(isotonic_deviation({4, 3, 3, 1}, false), 0.0);
  EXPECT_DOUBLE_EQ(isotonic_deviation({3, 2, 1}, true), 0.5);
  EXPECT_DOUBLE_EQ(isotonic_deviation({0, 10, 9, 20}, true), 0.025);
  EXPECT_EQ(isotonic_deviation({5}, true), 0.0);
  EXPECT_EQ(isotonic_deviation({2, 2, 2}, false), 0.0);
}

TEST(Stability, SpreadAndCounts) {
  auto cfg = default_config();
  EXPECT_THROW(stability_study(cfg, {9, 50}, false), ModelError);
  EXPECT_THROW(stability_study(cfg, {}, false), ModelError);
  const auto single = stability_study(cfg, {150}, false);
  ASSERT_EQ(single.rows.size(), 1u);
  EXPECT_EQ(single.spread_pF, 0.0);
  EXPECT_EQ(single.spread_pS, 0.0);
  const auto t = stability_study(cfg, {150, 200, 320}, false);
  ASSERT_EQ(t.rows.size(), 3u);
  std::vector<double> pF;
  for (const auto& r : t.rows) {
    EXPECT_TRUE(r.outcome.error.empty());
    EXPECT_EQ(r.outcome.status, SolveStatus::converged);
    pF.push_back(r.outcome.pF);
  }
  EXPECT_DOUBLE_EQ(t.spread_pF, relative_spread(pF));
  EXPECT_LE(t.spread_pF, 0.05);
}

TEST(Summary, PooledEmissionsOrderOfMagnitudeRiskAverse) {
  auto cfg = sweep_config(default_config(), SweepParameter::res_penetration, 7500.0);
  cfg.risk.phi = 1.0;
  cfg.n_scenarios = 320;
  const auto set = sample_scenarios(cfg);
  const auto sol = solve_equilibrium(cfg, set);
  ASSERT_EQ(sol.status, SolveStatus::converged);
  const auto row = summarize_equilibrium(sol, set);
  EXPECT_NEAR(row.emissions_pooled, 16730.78, 0.15 * 16730.78);
  EXPECT_LT(row.emissions, row.emissions_pooled);
}
