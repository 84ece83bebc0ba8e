#pragma once

// Parameter sweeps (RES penetration, CO2 price), per-solution summaries and
// scenario-count stability.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "etseq/equilibrium.hpp"
#include "etseq/model.hpp"
#include "etseq/scenarios.hpp"
#include "etseq/spot.hpp"

namespace etseq {

enum class SweepParameter { res_penetration, co2_price };

inline const char* to_string(SweepParameter p) {
  return p == SweepParameter::res_penetration ? "res" : "co2";
}

struct SweepSpec {
  SweepParameter parameter = SweepParameter::res_penetration;
  std::vector<double> grid;
  MarketConfig base_config;
  bool general_model = true;
  bool spot_only = true;
  bool risk_averse = false; // CVaR path; otherwise the risk-neutral path
  SolverOptions options;
  unsigned threads = 0; // 0 = hardware concurrency
};

struct SweepRow {
  double value = 0.0;
  bool solved = false; // general model attempted
  SolveStatus status = SolveStatus::non_convergence;
  std::string error;
  double residual = 0.0, kkt_residual = 0.0, feasibility = 0.0;
  double profit_scale = 1.0, gradient_scale = 1.0;

  double pF = 0.0;
  double pS = 0.0;           // general model, expected
  double pS_spot_only = 0.0; // no futures trading, expected

  // Per generator, conventional-then-RES.
  std::vector<double> qF, qS, profit, cvar;
  std::vector<double> epsF, epsS; // conventional only; epsS expected

  double conv_qF = 0.0, conv_qS = 0.0, conv_total = 0.0;
  double res_qF = 0.0, res_qS = 0.0, res_total = 0.0;
  double conv_profit = 0.0, conv_cvar = 0.0;
  double res_profit = 0.0, res_cvar = 0.0;
  double emissions = 0.0; // sum_i E[epsS_i + epsF_i]
  // sum_i E[eta_i * total conventional output]: each intensity applied to
  // pooled conventional output instead of the generator's own.
  double emissions_pooled = 0.0;

  double spot_only_conv_q = 0.0, spot_only_res_q = 0.0, spot_only_emissions = 0.0;
};

/// Expectations of an equilibrium, with totals built from the parts.
inline SweepRow summarize_equilibrium(const EquilibriumSolution& sol, const ScenarioSet& set) {
  SweepRow row;
  row.solved = true;
  row.status = sol.status;
  row.residual = sol.residual;
  row.kkt_residual = sol.kkt_residual;
  row.feasibility = sol.feasibility;
  row.profit_scale = sol.profit_scale;
  row.gradient_scale = sol.gradient_scale;
  const std::size_t I = sol.fd.epsF.size();
  const std::size_t n = sol.fd.qF.size();
  row.pF = sol.fd.pF;
  row.qF = sol.fd.qF;
  row.epsF = sol.fd.epsF;
  row.qS.assign(n, 0.0);
  row.epsS.assign(I, 0.0);
  for (std::size_t w = 0; w < sol.spot.size(); ++w) {
    const double p = set[w].prob;
    const auto& sp = sol.spot[w];
    row.pS += p * sp.pS;
    for (std::size_t i = 0; i < I; ++i) {
      row.qS[i] += p * sp.qS_conv[i];
      row.epsS[i] += p * sp.epsS[i];
    }
    for (std::size_t j = 0; j < n - I; ++j)
      row.qS[I + j] += p * sp.qS_res[j];
    double pooled = 0.0, eta_sum = 0.0;
    for (std::size_t i = 0; i < I; ++i) {
      pooled += sp.qS_conv[i] + sol.fd.qF[i];
      eta_sum += set[w].eta[i];
    }
    row.emissions_pooled += p * eta_sum * pooled;
  }
  row.profit = sol.panel.expected;
  row.cvar = sol.panel.cvar;
  for (std::size_t k = 0; k < n; ++k) {
    if (k < I) {
      row.conv_qF += row.qF[k];
      row.conv_qS += row.qS[k];
      row.conv_profit += row.profit[k];
      row.conv_cvar += row.cvar[k];
      row.emissions += row.epsS[k] + row.epsF[k];
    } else {
      row.res_qF += row.qF[k];
      row.res_qS += row.qS[k];
      row.res_profit += row.profit[k];
      row.res_cvar += row.cvar[k];
    }
  }
  row.conv_total = row.conv_qF + row.conv_qS;
  row.res_total = row.res_qF + row.res_qS;
  return row;
}

/// Fills the spot-only columns of row.
inline void summarize_spot_only(SweepRow& row, const ScenarioSet& set,
                                const CompetitionConjecture& conj) {
  row.pS_spot_only = row.spot_only_conv_q = row.spot_only_res_q = row.spot_only_emissions = 0.0;
  for (const auto& s : set) {
    const auto sp = spot_only_equilibrium(s, conj);
    row.pS_spot_only += s.prob * sp.pS;
    for (std::size_t i = 0; i < s.n_conv(); ++i) {
      row.spot_only_conv_q += s.prob * sp.qS_conv[i];
      row.spot_only_emissions += s.prob * sp.epsS[i];
    }
    for (double q : sp.qS_res)
      row.spot_only_res_q += s.prob * q;
  }
}

/// Configuration at one grid value. A RES value is the total expected RES
/// production, split evenly across RES generators; a CO2 value sets both
/// allowance prices.
inline MarketConfig sweep_config(const MarketConfig& base, SweepParameter p, double value) {
  MarketConfig cfg = base;
  if (p == SweepParameter::res_penetration) {
    const double share = value / static_cast<double>(cfg.res.size());
    for (auto& r : cfg.res)
      r.Q_mean = share;
  } else {
    cfg.carbon.pS_co2_mean = value;
    cfg.carbon.pF_co2 = value;
  }
  return cfg;
}

inline void check_sweep(const SweepSpec& spec) {
  if (spec.grid.empty())
    throw ModelError("sweep: grid must be nonempty");
  for (std::size_t k = 1; k < spec.grid.size(); ++k)
    if (!(spec.grid[k] > spec.grid[k - 1]))
      throw ModelError("sweep: grid must be strictly increasing");
  const double lo = spec.grid.front(), hi = spec.grid.back();
  if (spec.parameter == SweepParameter::res_penetration) {
    if (spec.base_config.res.empty())
      throw ModelError("sweep: RES sweep needs at least one RES generator");
    if (lo < 0.0 || hi > 10000.0)
      throw ModelError("sweep: RES grid must lie in [0, 10000]");
  } else if (lo < 0.0 || hi > 50.0) {
    throw ModelError("sweep: CO2 grid must lie in [0, 50]");
  }
  if (!spec.general_model && !spec.spot_only)
    throw ModelError("sweep: no market variant selected");
  if (!spec.risk_averse && spec.base_config.risk.phi != 0.0)
    throw ModelError("sweep: risk-neutral sweep requires phi = 0");
  require_valid(spec.base_config);
}

/// Evenly spaced grid from..to (inclusive when to is hit within rounding).
inline std::vector<double> make_grid(double from, double to, double step) {
  if (!(step > 0.0) || to < from)
    throw ModelError("grid: need step > 0 and to >= from");
  std::vector<double> g;
  const auto n = static_cast<long>(std::floor((to - from) / step + 1e-9));
  for (long k = 0; k <= n; ++k)
    g.push_back(from + static_cast<double>(k) * step);
  return g;
}

namespace detail {
/// Runs job(k) for k in [0, n) on up to `threads` workers.
template <class Job> void parallel_for(std::size_t n, unsigned threads, Job job) {
  if (threads == 0)
    threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t k = 0; k < n; ++k)
      job(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < n; k = next++)
        job(k);
    });
  for (auto& th : pool)
    th.join();
}
} // namespace detail

/// One row per grid value, in grid order. Every point reuses the base seed.
inline std::vector<SweepRow> run_sweep(const SweepSpec& spec) {
  check_sweep(spec);
  std::vector<SweepRow> rows(spec.grid.size());
  detail::parallel_for(spec.grid.size(), spec.threads, [&](std::size_t k) {
    SweepRow& row = rows[k];
    const double value = spec.grid[k];
    try {
      const MarketConfig cfg = sweep_config(spec.base_config, spec.parameter, value);
      const ScenarioSet set = sample_scenarios(cfg);
      if (spec.general_model) {
        const auto sol = spec.risk_averse ? solve_equilibrium(cfg, set, spec.options)
                                          : risk_neutral_equilibrium(cfg, set, spec.options);
        row = summarize_equilibrium(sol, set);
      }
      if (spec.spot_only)
        summarize_spot_only(row, set, cfg.conjecture);
    } catch (const std::exception& e) {
      row.error = e.what();
      row.status = SolveStatus::non_convergence;
    }
    row.value = value;
  });
  return rows;
}

/// Largest distance from the best monotone (pool-adjacent-violators) fit,
/// relative to the range of the values.
inline double isotonic_deviation(const std::vector<double>& values, bool increasing) {
  if (values.size() < 2)
    return 0.0;
  std::vector<double> v(values);
  if (!increasing)
    for (double& x : v)
      x = -x;
  struct Block {
    double sum;
    std::size_t count;
  };
  std::vector<Block> blocks;
  for (double x : v) {
    blocks.push_back({x, 1});
    while (blocks.size() > 1) {
      const auto& b = blocks[blocks.size() - 1];
      const auto& a = blocks[blocks.size() - 2];
      if (a.sum / static_cast<double>(a.count) <= b.sum / static_cast<double>(b.count))
        break;
      const Block merged{a.sum + b.sum, a.count + b.count};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  double dev = 0.0;
  std::size_t pos = 0;
  for (const auto& b : blocks) {
    const double mean = b.sum / static_cast<double>(b.count);
    for (std::size_t k = 0; k < b.count; ++k, ++pos)
      dev = std::max(dev, std::abs(v[pos] - mean));
  }
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double range = *mx - *mn;
  return range > 0.0 ? dev / range : 0.0;
}

/// (max - min) / mean.
inline double relative_spread(const std::vector<double>& values) {
  if (values.size() < 2)
    return 0.0;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  double mean = 0.0;
  for (double x : values)
    mean += x;
  mean /= static_cast<double>(values.size());
  return mean != 0.0 ? (*mx - *mn) / std::abs(mean) : 0.0;
}

struct StabilityRow {
  std::size_t n_scenarios = 0;
  SweepRow outcome;
};

struct StabilityTable {
  std::vector<StabilityRow> rows;
  double spread_pF = 0.0;
  double spread_pS = 0.0;
};

/// Re-solves cfg at each scenario count, same seed throughout.
inline StabilityTable stability_study(const MarketConfig& cfg,
                                      const std::vector<std::size_t>& counts, bool risk_averse,
                                      const SolverOptions& options = {}, unsigned threads = 0) {
  if (counts.empty())
    throw ModelError("stability: no scenario counts given");
  const double min_count = 1.0 / (1.0 - cfg.risk.alpha);
  for (std::size_t c : counts)
    if (static_cast<double>(c) < min_count - 1e-9)
      throw ModelError("stability: scenario count " + std::to_string(c) +
                       " is below 1/(1-alpha)");
  StabilityTable table;
  table.rows.resize(counts.size());
  detail::parallel_for(counts.size(), threads, [&](std::size_t k) {
    MarketConfig c = cfg;
    c.n_scenarios = counts[k];
    auto& row = table.rows[k];
    row.n_scenarios = counts[k];
    try {
      const auto set = sample_scenarios(c);
      const auto sol = risk_averse ? solve_equilibrium(c, set, options)
                                   : risk_neutral_equilibrium(c, set, options);
      row.outcome = summarize_equilibrium(sol, set);
      summarize_spot_only(row.outcome, set, c.conjecture);
    } catch (const std::exception& e) {
      row.outcome.error = e.what();
    }
  });
  std::vector<double> pF, pS;
  for (const auto& r : table.rows) {
    pF.push_back(r.outcome.pF);
    pS.push_back(r.outcome.pS);
  }
  table.spread_pF = relative_spread(pF);
  table.spread_pS = relative_spread(pS);
  return table;
}

} // namespace etseq
