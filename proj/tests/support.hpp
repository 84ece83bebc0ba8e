#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "etseq/config_io.hpp"
#include "etseq/equilibrium.hpp"
#include "etseq/futures.hpp"
#include "etseq/scenarios.hpp"
#include "etseq/spot.hpp"

namespace testing_support {

using namespace etseq;

/// Deterministic market with all CVs zero.
inline MarketConfig flat_config(std::size_t I, std::size_t J) {
  MarketConfig cfg;
  for (std::size_t i = 0; i < I; ++i) {
    ConventionalGenerator g;
    g.id = "c" + std::to_string(i);
    g.a_mean = 1.0;
    g.b_mean = 10.0 + static_cast<double>(i);
    g.c_mean = 0.01;
    g.eta_mean = 0.5;
    g.qF_max = 1000.0;
    g.epsF_max = 1000.0;
    cfg.conventional.push_back(g);
  }
  for (std::size_t j = 0; j < J; ++j) {
    ResGenerator r;
    r.id = "r" + std::to_string(j);
    r.Q_mean = 200.0;
    r.qF_max = 200.0;
    cfg.res.push_back(r);
  }
  cfg.demand = {100.0, 0.05, 0.0, 0.0};
  cfg.carbon = {10.0, 10.0, 0.0};
  cfg.set_competition(Competition::cournot);
  cfg.n_scenarios = 10;
  cfg.seed = 1;
  return cfg;
}

/// Single scenario from explicit numbers.
inline Scenario make_scenario(std::vector<double> b, std::vector<double> c,
                              std::vector<double> eta, std::vector<double> Q, double gammaS,
                              double betaS, double pco2) {
  Scenario s;
  s.a.assign(c.size(), 0.0);
  s.b = std::move(b);
  s.c = std::move(c);
  s.eta = std::move(eta);
  s.Q = std::move(Q);
  s.gammaS = gammaS;
  s.betaS = betaS;
  s.pS_co2 = pco2;
  return s;
}

/// Random small market: I in [1,3], J in [0,1], moderate CVs. alpha = 0.5,
/// so n_scen must be at least 2.
inline MarketConfig random_config(std::mt19937_64& rng, std::size_t n_scen) {
  std::uniform_int_distribution<int> I_d(1, 3), J_d(0, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MarketConfig cfg;
  const int I = I_d(rng), J = J_d(rng);
  for (int i = 0; i < I; ++i) {
    ConventionalGenerator g;
    g.id = "g" + std::to_string(i);
    g.a_mean = 50.0 * u(rng);
    g.b_mean = 20.0 + 30.0 * u(rng);
    g.c_mean = 0.005 + 0.02 * u(rng);
    g.eta_mean = 0.3 + 0.5 * u(rng);
    g.cv_a = g.cv_b = g.cv_c = 0.1;
    g.cv_eta = 0.05;
    g.qF_max = 20000;
    g.epsF_max = 20000;
    cfg.conventional.push_back(g);
  }
  for (int j = 0; j < J; ++j) {
    ResGenerator r;
    r.id = "r" + std::to_string(j);
    r.Q_mean = 2000.0 + 6000.0 * u(rng);
    r.cv_Q = 0.05;
    r.qF_max_tracks_mean = true;
    cfg.res.push_back(r);
  }
  cfg.demand = {150.0 + 50.0 * u(rng), 0.004 + 0.002 * u(rng), 0.15, 0.05};
  cfg.carbon = {20.0 + 10.0 * u(rng), 20.0 + 10.0 * u(rng), 0.16};
  cfg.set_competition(Competition::cournot);
  cfg.risk.alpha = 0.5;
  cfg.n_scenarios = n_scen;
  cfg.seed = rng();
  return cfg;
}

/// Random conjecture with delta in [-1,0] and psi in [-1/(n-1), 0].
inline CompetitionConjecture random_conjecture(std::mt19937_64& rng, std::size_t I,
                                               std::size_t J) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  CompetitionConjecture cj;
  cj.kind = Competition::custom;
  const double n = static_cast<double>(I + J);
  for (std::size_t i = 0; i < I; ++i)
    cj.delta.push_back(-u(rng));
  for (std::size_t k = 0; k < I + J; ++k)
    cj.psi.push_back(n > 1 ? -u(rng) / (n - 1.0) : 0.0);
  return cj;
}

inline bool close_rel(double a, double b, double rel, double abs_floor = 0.0) {
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1.0}) + abs_floor;
}

/// Golden-section maximisation of a unimodal function on [lo, hi].
inline double golden_max(const std::function<double(double)>& f, double lo, double hi,
                         double tol) {
  const double r = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = lo, b = hi, x1 = b - r * (b - a), x2 = a + r * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > tol) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + r * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - r * (b - a);
      f1 = f(x1);
    }
  }
  return 0.5 * (a + b);
}

/// Spot quantities by Gauss-Seidel best responses on conjectured spot
/// profits: generator i expects rivals' total output to move by delta_i per
/// unit of its own output. Each best response is found numerically.
inline std::vector<double> spot_by_best_response(const Scenario& s, const FuturesDecision& fd,
                                                 const CompetitionConjecture& cj,
                                                 int max_sweeps = 5000) {
  const std::size_t I = s.n_conv();
  std::vector<double> q(I, 0.0);
  double committed = 0.0;
  for (std::size_t i = 0; i < I; ++i)
    committed += fd.qF[i];
  const double span = 10.0 * (std::abs(effective_intercept(s)) / s.betaS + committed + 1.0);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double moved = 0.0;
    for (std::size_t i = 0; i < I; ++i) {
      double rivals = 0.0;
      for (std::size_t l = 0; l < I; ++l)
        if (l != i)
          rivals += q[l];
      const double q0 = q[i];
      auto profit = [&](double qi) {
        const double r = rivals + cj.delta[i] * (qi - q0);
        const double p = effective_intercept(s) - s.betaS * (qi + r + committed);
        const double tot = fd.qF[i] + qi;
        return p * qi - s.b[i] * tot - 0.5 * s.c[i] * tot * tot - s.pS_co2 * s.eta[i] * tot;
      };
      const double best = golden_max(profit, q0 - span, q0 + span, 1e-11 * span);
      moved = std::max(moved, std::abs(best - q[i]));
      q[i] = best;
    }
    if (moved < 1e-10 * span)
      break;
  }
  return q;
}

} // namespace testing_support
