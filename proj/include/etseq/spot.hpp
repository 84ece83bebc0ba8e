#pragma once

// Closed-form second-stage (spot) equilibrium for given futures commitments.

#include <vector>

#include "etseq/model.hpp"
#include "etseq/payoffs.hpp"
#include "etseq/scenarios.hpp"

namespace etseq {

struct SpotOutcome {
  double pS = 0.0;
  std::vector<double> qS_conv;
  std::vector<double> qS_res;
  std::vector<double> epsS; // positive = allowance shortage
  std::vector<double> tau;
  double phi_factor = 0.0;
};

struct SpotFactors {
  std::vector<double> tau; // 1 / (betaS (1 + delta_i) + c_i)
  double phi = 0.0;        // 1 / (1 + betaS sum tau)
};

inline SpotFactors spot_factors(const Scenario& s, const CompetitionConjecture& conj) {
  const std::size_t I = s.n_conv();
  if (conj.delta.size() != I)
    throw ModelError("spot: conjecture delta size does not match generator count");
  SpotFactors f;
  f.tau.resize(I);
  double sum_tau = 0.0;
  for (std::size_t i = 0; i < I; ++i) {
    const double denom = s.betaS * (1.0 + conj.delta[i]) + s.c[i];
    if (!(denom > 0.0))
      throw ModelError("spot: degenerate tau denominator betaS(1+delta)+c <= 0");
    f.tau[i] = 1.0 / denom;
    sum_tau += f.tau[i];
  }
  f.phi = 1.0 / (1.0 + s.betaS * sum_tau);
  return f;
}

namespace detail {
/// Marginal cost offset b + c qF + eta pCO2 of conventional generator i.
inline double spot_offset(const Scenario& s, std::size_t i, double qF_i) {
  return s.b[i] + s.c[i] * qF_i + s.eta[i] * s.pS_co2;
}

inline double spot_price(const Scenario& s, const SpotFactors& f, const std::vector<double>& qF) {
  double weighted = 0.0;
  double committed = 0.0;
  for (std::size_t i = 0; i < s.n_conv(); ++i) {
    weighted += f.tau[i] * spot_offset(s, i, qF[i]);
    committed += qF[i];
  }
  return f.phi * (effective_intercept(s) + s.betaS * weighted - s.betaS * committed);
}
} // namespace detail

inline double spot_price(const Scenario& s, const FuturesDecision& fd,
                         const CompetitionConjecture& conj) {
  return detail::spot_price(s, spot_factors(s, conj), fd.qF);
}

/// Conventional spot quantities; negative values are short sales.
inline std::vector<double> spot_quantity(const Scenario& s, const FuturesDecision& fd,
                                         const CompetitionConjecture& conj) {
  const auto f = spot_factors(s, conj);
  const double pS = detail::spot_price(s, f, fd.qF);
  std::vector<double> q(s.n_conv());
  for (std::size_t i = 0; i < q.size(); ++i)
    q[i] = f.tau[i] * (pS - detail::spot_offset(s, i, fd.qF[i]));
  return q;
}

/// Own-output allowance balance eta_i (qS_i + qF_i) - epsF_i.
inline std::vector<double> spot_emissions(const Scenario& s, const FuturesDecision& fd,
                                          const std::vector<double>& qS) {
  std::vector<double> e(s.n_conv());
  for (std::size_t i = 0; i < e.size(); ++i)
    e[i] = s.eta[i] * (qS[i] + fd.qF[i]) - fd.epsF[i];
  return e;
}

inline SpotOutcome evaluate_spot(const Scenario& s, const FuturesDecision& fd,
                                 const CompetitionConjecture& conj) {
  const auto f = spot_factors(s, conj);
  SpotOutcome out;
  out.pS = detail::spot_price(s, f, fd.qF);
  out.tau = f.tau;
  out.phi_factor = f.phi;
  out.qS_conv.resize(s.n_conv());
  for (std::size_t i = 0; i < s.n_conv(); ++i)
    out.qS_conv[i] = f.tau[i] * (out.pS - detail::spot_offset(s, i, fd.qF[i]));
  out.qS_res.resize(s.n_res());
  for (std::size_t j = 0; j < s.n_res(); ++j)
    out.qS_res[j] = s.Q[j] - fd.qF[s.n_conv() + j];
  out.epsS = spot_emissions(s, fd, out.qS_conv);
  return out;
}

/// Market without any futures trading.
inline SpotOutcome spot_only_equilibrium(const Scenario& s, const CompetitionConjecture& conj) {
  return evaluate_spot(s, FuturesDecision::zeros(s.n_conv(), s.n_res()), conj);
}

/// Actual (non-conjectural) sensitivities of the spot block to every futures
/// quantity, conventional-then-RES. The spot block is affine in qF.
struct SpotJacobian {
  std::vector<double> dpS;              // dPS/dqF_l
  std::vector<std::vector<double>> dqS; // [i][l] dqS_i/dqF_l
};

inline SpotJacobian spot_jacobian(const Scenario& s, const SpotFactors& f) {
  const std::size_t I = s.n_conv();
  const std::size_t n = I + s.n_res();
  SpotJacobian jac;
  jac.dpS.assign(n, 0.0);
  for (std::size_t l = 0; l < I; ++l)
    jac.dpS[l] = f.phi * s.betaS * (f.tau[l] * s.c[l] - 1.0);
  jac.dqS.assign(I, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t l = 0; l < n; ++l)
      jac.dqS[i][l] = f.tau[i] * (jac.dpS[l] - (l == i ? s.c[i] : 0.0));
  return jac;
}

} // namespace etseq
