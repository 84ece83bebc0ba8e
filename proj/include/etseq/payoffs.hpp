#pragma once

// Per-scenario profits of both technologies and the CVaR of a profit vector.

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "etseq/model.hpp"
#include "etseq/scenarios.hpp"

namespace etseq {

/// First-stage commitments. qF is indexed conventional-then-RES.
struct FuturesDecision {
  std::vector<double> qF;
  std::vector<double> epsF; // conventional only
  double pF = 0.0;

  static FuturesDecision zeros(std::size_t n_conv, std::size_t n_res) {
    return {std::vector<double>(n_conv + n_res, 0.0), std::vector<double>(n_conv, 0.0), 0.0};
  }
};

/// Eq. (1)-style conventional profit. epsS is the spot allowance position
/// (positive = shortage bought at the spot allowance price).
inline double profit_conventional(const Scenario& s, std::size_t i, const FuturesDecision& fd,
                                  double pF_co2, double pS, double qS_i, double epsS_i) {
  const double total = fd.qF[i] + qS_i;
  const double cost = s.a[i] + s.b[i] * total + 0.5 * s.c[i] * total * total;
  return fd.pF * fd.qF[i] + pS * qS_i - cost - pF_co2 * fd.epsF[i] - s.pS_co2 * epsS_i;
}

/// RES profit: futures sold at pF, the remainder of Q_j cleared at spot.
inline double profit_res(const Scenario& s, std::size_t j, const FuturesDecision& fd, double pS) {
  const double qF = fd.qF[s.n_conv() + j];
  return (fd.pF - pS) * qF + pS * s.Q[j];
}

struct CvarResult {
  double cvar = 0.0;
  double var = 0.0; // maximizing xi (smallest when several tie)
};

/// Exact lower-tail CVaR: max over xi of xi - 1/(1-alpha) sum sigma max(xi - profit, 0).
/// The maximum is attained at the first sorted profit whose cumulative
/// probability reaches 1-alpha.
inline CvarResult cvar(std::span<const double> profits, std::span<const double> probs,
                       double alpha) {
  if (profits.empty())
    throw ModelError("cvar: empty scenario set");
  if (profits.size() != probs.size())
    throw ModelError("cvar: profits and probabilities differ in length");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw ModelError("cvar: alpha must lie in (0, 1)");

  std::vector<std::size_t> order(profits.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return profits[l] < profits[r]; });

  const double tail = 1.0 - alpha;
  double cum = 0.0;
  double xi = profits[order.back()];
  for (std::size_t k = 0; k < order.size(); ++k) {
    cum += probs[order[k]];
    if (cum >= tail * (1.0 - 1e-12)) {
      xi = profits[order[k]];
      break;
    }
  }
  double shortfall = 0.0;
  for (std::size_t w = 0; w < profits.size(); ++w)
    shortfall += probs[w] * std::max(xi - profits[w], 0.0);
  return {xi - shortfall / tail, xi};
}

inline double objective(double expected, double cvar_value, double phi) {
  return (1.0 - phi) * expected + phi * cvar_value;
}

struct ProfitPanel {
  std::vector<std::vector<double>> profit; // [generator][scenario]
  std::vector<double> expected;
  std::vector<double> cvar;
  std::vector<double> var;

  /// Fills expected/cvar/var from the profit matrix.
  void summarize(std::span<const double> probs, double alpha) {
    const std::size_t n = profit.size();
    expected.assign(n, 0.0);
    cvar.assign(n, 0.0);
    var.assign(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t w = 0; w < probs.size(); ++w)
        expected[k] += probs[w] * profit[k][w];
      const auto r = etseq::cvar(profit[k], probs, alpha);
      cvar[k] = r.cvar;
      var[k] = r.var;
    }
  }
};

inline std::vector<double> probabilities(const ScenarioSet& set) {
  std::vector<double> p;
  p.reserve(set.size());
  for (const auto& s : set)
    p.push_back(s.prob);
  return p;
}

} // namespace etseq
