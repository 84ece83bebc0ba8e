#pragma once

// First-stage derivatives: how futures commitments move prices, spot
// quantities and profits, under conjectural variations psi.

#include <vector>

#include "etseq/model.hpp"
#include "etseq/payoffs.hpp"
#include "etseq/scenarios.hpp"
#include "etseq/spot.hpp"

namespace etseq {

/// Futures inverse demand gammaF - betaF * sum_k qF_k.
inline double futures_price(const std::vector<double>& qF, const DemandParams& demand) {
  double total = 0.0;
  for (double q : qF)
    total += q;
  return demand.gammaF - demand.betaF * total;
}

inline FuturesDecision make_decision(std::vector<double> qF, std::vector<double> epsF,
                                     const DemandParams& demand) {
  FuturesDecision fd{std::move(qF), std::move(epsF), 0.0};
  fd.pF = futures_price(fd.qF, demand);
  return fd;
}

enum class PartialForm {
  /// Directional derivative of the assembled spot map along the conjectured move.
  consistent,
  /// Literal transcription, including the extra spot factor on c_i tau_i and
  /// a zero spot response to RES futures. Kept for comparison only.
  printed
};

/// Conjectural derivatives for one scenario, indexed conventional-then-RES.
/// For RES entries dqS is -1 exactly.
struct PartialDerivatives {
  std::vector<double> dPF_dqF;
  std::vector<double> dPS_dqF;
  std::vector<double> dqS_dqF;
};

inline PartialDerivatives partials(const Scenario& s, const CompetitionConjecture& conj,
                                   const DemandParams& demand,
                                   PartialForm form = PartialForm::consistent) {
  const std::size_t I = s.n_conv();
  const std::size_t J = s.n_res();
  const std::size_t n = I + J;
  if (conj.psi.size() != n)
    throw ModelError("partials: conjecture psi size does not match generator count");
  const auto f = spot_factors(s, conj);
  const double rivals = static_cast<double>(n) - 1.0;

  double sum_ctau = 0.0;
  for (std::size_t i = 0; i < I; ++i)
    sum_ctau += s.c[i] * f.tau[i];

  PartialDerivatives pd;
  pd.dPF_dqF.resize(n);
  pd.dPS_dqF.resize(n);
  pd.dqS_dqF.resize(n);
  for (std::size_t k = 0; k < n; ++k)
    pd.dPF_dqF[k] = -demand.betaF * (1.0 + rivals * conj.psi[k]);

  const double scale = f.phi * s.betaS;
  for (std::size_t i = 0; i < I; ++i) {
    const double own = s.c[i] * f.tau[i];
    const double psi = conj.psi[i];
    double bracket = -(1.0 + (static_cast<double>(I) - 1.0) * psi);
    if (form == PartialForm::consistent) {
      bracket += own + psi * (sum_ctau - own);
    } else {
      bracket += f.phi * own;
      for (std::size_t k = 0; k < I; ++k)
        if (k != i)
          bracket += s.c[k] * conj.psi[k] * f.tau[k];
    }
    pd.dPS_dqF[i] = scale * bracket;
    pd.dqS_dqF[i] = f.tau[i] * (pd.dPS_dqF[i] - s.c[i]);
  }
  for (std::size_t j = I; j < n; ++j) {
    pd.dPS_dqF[j] = form == PartialForm::consistent
                        ? scale * conj.psi[j] * (sum_ctau - static_cast<double>(I))
                        : 0.0;
    pd.dqS_dqF[j] = -1.0;
  }
  return pd;
}

/// dPi/dqF_k along the conjectured direction, and dPi/depsF_i.
struct ProfitGradients {
  std::vector<double> dq;   // per generator k
  std::vector<double> deps; // per conventional i: pS_co2 - pF_co2
};

inline ProfitGradients profit_gradients(const Scenario& s, const FuturesDecision& fd,
                                        const SpotOutcome& spot, const PartialDerivatives& pd,
                                        double pF_co2) {
  const std::size_t I = s.n_conv();
  const std::size_t n = I + s.n_res();
  ProfitGradients g;
  g.dq.resize(n);
  g.deps.assign(I, s.pS_co2 - pF_co2);
  for (std::size_t i = 0; i < I; ++i) {
    const double qS = spot.qS_conv[i];
    const double dq = pd.dqS_dqF[i];
    const double total = fd.qF[i] + qS;
    g.dq[i] = pd.dPS_dqF[i] * qS + spot.pS * dq - s.b[i] * (1.0 + dq) -
              s.c[i] * total * (1.0 + dq) + pd.dPF_dqF[i] * fd.qF[i] -
              s.eta[i] * s.pS_co2 * (1.0 + dq) + fd.pF;
  }
  for (std::size_t j = 0; j < s.n_res(); ++j) {
    const std::size_t k = I + j;
    g.dq[k] = (pd.dPF_dqF[k] - pd.dPS_dqF[k]) * fd.qF[k] - spot.pS + pd.dPS_dqF[k] * s.Q[j] +
              fd.pF;
  }
  return g;
}

inline ProfitGradients profit_gradients(const Scenario& s, const FuturesDecision& fd,
                                        const MarketConfig& cfg,
                                        PartialForm form = PartialForm::consistent) {
  const auto spot = evaluate_spot(s, fd, cfg.conjecture);
  const auto pd = partials(s, cfg.conjecture, cfg.demand, form);
  return profit_gradients(s, fd, spot, pd, cfg.carbon.pF_co2);
}

/// Per-generator profits for one scenario, conventional-then-RES.
inline std::vector<double> scenario_profits(const Scenario& s, const FuturesDecision& fd,
                                            const SpotOutcome& spot, double pF_co2) {
  std::vector<double> out(s.n_conv() + s.n_res());
  for (std::size_t i = 0; i < s.n_conv(); ++i)
    out[i] = profit_conventional(s, i, fd, pF_co2, spot.pS, spot.qS_conv[i], spot.epsS[i]);
  for (std::size_t j = 0; j < s.n_res(); ++j)
    out[s.n_conv() + j] = profit_res(s, j, fd, spot.pS);
  return out;
}

/// Per-scenario model used by the equilibrium solvers. Every quantity is an
/// affine (spot block) or quadratic (profit) function of the primal vector
/// x = [qF_0..qF_{n-1}, epsF_0..epsF_{I-1}], so derivatives here are exact.
class ScenarioModel {
public:
  ScenarioModel(const Scenario& s, const MarketConfig& cfg)
      : s_(&s), cfg_(&cfg), factors_(spot_factors(s, cfg.conjecture)),
        jac_(spot_jacobian(s, factors_)), pd_(partials(s, cfg.conjecture, cfg.demand)) {
    const std::size_t n = n_gen();
    dgdx_.assign(n, std::vector<double>(n, 0.0));
    const double betaF = cfg.demand.betaF;
    for (std::size_t i = 0; i < n_conv(); ++i) {
      const double dq = pd_.dqS_dqF[i];
      for (std::size_t l = 0; l < n; ++l) {
        const double dqS_l = jac_.dqS[i][l];
        const double dTot_l = (l == i ? 1.0 : 0.0) + dqS_l;
        dgdx_[i][l] = pd_.dPS_dqF[i] * dqS_l + jac_.dpS[l] * dq -
                      s.c[i] * dTot_l * (1.0 + dq) + (l == i ? pd_.dPF_dqF[i] : 0.0) - betaF;
      }
    }
    for (std::size_t j = 0; j < n_res(); ++j) {
      const std::size_t k = n_conv() + j;
      for (std::size_t l = 0; l < n; ++l)
        dgdx_[k][l] = (l == k ? pd_.dPF_dqF[k] - pd_.dPS_dqF[k] : 0.0) - jac_.dpS[l] - betaF;
    }
  }

  std::size_t n_conv() const { return s_->n_conv(); }
  std::size_t n_res() const { return s_->n_res(); }
  std::size_t n_gen() const { return n_conv() + n_res(); }
  const Scenario& scenario() const { return *s_; }
  const PartialDerivatives& partial_derivatives() const { return pd_; }

  FuturesDecision decision(const std::vector<double>& x) const {
    const std::size_t n = n_gen();
    return make_decision(std::vector<double>(x.begin(), x.begin() + n),
                         std::vector<double>(x.begin() + n, x.end()), cfg_->demand);
  }

  SpotOutcome spot(const FuturesDecision& fd) const {
    SpotOutcome out;
    const auto& s = *s_;
    out.pS = detail::spot_price(s, factors_, fd.qF);
    out.tau = factors_.tau;
    out.phi_factor = factors_.phi;
    out.qS_conv.resize(n_conv());
    for (std::size_t i = 0; i < n_conv(); ++i)
      out.qS_conv[i] = factors_.tau[i] * (out.pS - detail::spot_offset(s, i, fd.qF[i]));
    out.qS_res.resize(n_res());
    for (std::size_t j = 0; j < n_res(); ++j)
      out.qS_res[j] = s.Q[j] - fd.qF[n_conv() + j];
    out.epsS = spot_emissions(s, fd, out.qS_conv);
    return out;
  }

  struct Evaluation {
    SpotOutcome spot;
    std::vector<double> profit;             // per generator
    std::vector<double> g;                  // conjectural dPi_k/dqF_k
    std::vector<std::vector<double>> grad;  // [k][x index] actual dPi_k/dx
  };

  Evaluation evaluate(const FuturesDecision& fd, bool with_actual_gradient) const {
    Evaluation ev;
    ev.spot = spot(fd);
    const double pF_co2 = cfg_->carbon.pF_co2;
    ev.profit = scenario_profits(*s_, fd, ev.spot, pF_co2);
    ev.g = profit_gradients(*s_, fd, ev.spot, pd_, pF_co2).dq;
    if (with_actual_gradient)
      ev.grad = actual_gradient(fd, ev.spot);
    return ev;
  }

  /// d g_k / d qF_l; constant in x.
  const std::vector<std::vector<double>>& conjectural_jacobian() const { return dgdx_; }

  /// Conjectured direction of generator k over the futures quantities.
  std::vector<double> direction(std::size_t k) const {
    std::vector<double> d(n_gen(), cfg_->conjecture.psi[k]);
    d[k] = 1.0;
    return d;
  }

  double allowance_gap() const { return s_->pS_co2 - cfg_->carbon.pF_co2; }

private:
  std::vector<std::vector<double>> actual_gradient(const FuturesDecision& fd,
                                                   const SpotOutcome& sp) const {
    const auto& s = *s_;
    const std::size_t I = n_conv();
    const std::size_t n = n_gen();
    const double betaF = cfg_->demand.betaF;
    std::vector<std::vector<double>> grad(n, std::vector<double>(n + I, 0.0));
    for (std::size_t i = 0; i < I; ++i) {
      const double total = fd.qF[i] + sp.qS_conv[i];
      const double marginal = s.b[i] + s.c[i] * total + s.eta[i] * s.pS_co2;
      for (std::size_t l = 0; l < n; ++l) {
        const double dqS = jac_.dqS[i][l];
        const double dTot = (l == i ? 1.0 : 0.0) + dqS;
        grad[i][l] = -betaF * fd.qF[i] + (l == i ? fd.pF : 0.0) + jac_.dpS[l] * sp.qS_conv[i] +
                     sp.pS * dqS - marginal * dTot;
      }
      grad[i][n + i] = allowance_gap();
    }
    for (std::size_t j = 0; j < n_res(); ++j) {
      const std::size_t k = I + j;
      for (std::size_t l = 0; l < n; ++l)
        grad[k][l] = (-betaF - jac_.dpS[l]) * fd.qF[k] + (l == k ? fd.pF - sp.pS : 0.0) +
                     jac_.dpS[l] * s.Q[j];
    }
    return grad;
  }

  const Scenario* s_;
  const MarketConfig* cfg_;
  SpotFactors factors_;
  SpotJacobian jac_;
  PartialDerivatives pd_;
  std::vector<std::vector<double>> dgdx_;
};

} // namespace etseq
