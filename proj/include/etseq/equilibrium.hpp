#pragma once

// Joint futures-market equilibrium. Each generator maximizes
//   (1-phi) E[profit] + phi CVaR_alpha[profit]
// over its futures box, with the spot stage eliminated through its closed
// form. The equilibrium is the joint KKT system of all generators; it is
// warm-started by damped diagonalization and refined by a Levenberg-Marquardt
// method on the Fischer-Burmeister reformulation of every complementarity pair.

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "etseq/futures.hpp"
#include "etseq/model.hpp"
#include "etseq/payoffs.hpp"
#include "etseq/scenarios.hpp"
#include "etseq/spot.hpp"

namespace etseq {

class InfeasibleBounds : public ModelError {
public:
  using ModelError::ModelError;
};

struct SolverOptions {
  int max_sweeps = 200;
  double damping = 0.5;
  int max_newton = 100;
  double tol_comp = 1e-6; // relative to profit_scale
  double tol_stat = 1e-6; // relative to gradient_scale
  double tol_feas = 1e-6; // dimensionless
  double br_tol = 1e-6;   // best-response accuracy, fraction of box width
  bool trace = false;
};

enum class SolveStatus { converged, non_convergence };

inline const char* to_string(SolveStatus s) {
  return s == SolveStatus::converged ? "converged" : "non_convergence";
}

struct DualState {
  double xi = 0.0;
  std::vector<double> eta, mu, theta;
  double nu_min = 0.0, nu_max = 0.0;
  double lambda_min = 0.0, lambda_max = 0.0; // conventional only
};

struct TraceRow {
  int iteration = 0;
  std::string phase;
  double residual = 0.0;
  double step = 0.0;
};

struct EquilibriumSolution {
  FuturesDecision fd;
  std::vector<SpotOutcome> spot; // per scenario
  std::vector<DualState> duals;  // per generator
  ProfitPanel panel;
  std::vector<double> objective; // per generator
  double risk_phi = 0.0;
  double risk_alpha = 0.9;
  bool risk_averse_path = false;

  double residual = 0.0;     // complementarity objective (sum slack * dual)
  double kkt_residual = 0.0; // max stationarity violation
  double feasibility = 0.0;  // max relative violation of sign/box constraints
  double profit_scale = 1.0;
  double gradient_scale = 1.0;
  double tol_comp = 1e-6, tol_stat = 1e-6, tol_feas = 1e-6;
  SolveStatus status = SolveStatus::non_convergence;
  int sweeps = 0;
  int newton_steps = 0;
  std::vector<bool> eps_flat; // allowance direction carried no profit signal
  std::vector<TraceRow> trace;

  bool accepted() const {
    return residual <= tol_comp * profit_scale && kkt_residual <= tol_stat * gradient_scale &&
           feasibility <= tol_feas;
  }
};

struct BestResponse {
  double qF = 0.0;
  double epsF = 0.0;
  double value = 0.0;
};

struct KktResiduals {
  std::vector<double> a;              // per generator, quantity stationarity
  std::vector<double> b;              // per conventional, allowance stationarity
  std::vector<double> d;              // per generator, sum mu - phi
  std::vector<std::vector<double>> c; // per generator and scenario
  double complementarity = 0.0;
  double feasibility = 0.0;
  double max_stationarity = 0.0; // (a),(b) in EUR/MWh; (c),(d) scaled by gradient_scale
};

namespace detail {

/// Golden-section search on a bracketing grid. Exact for concave functions.
inline std::pair<double, double> maximize_1d(const std::function<double(double)>& f, double lo,
                                             double hi, double tol) {
  if (!(hi > lo))
    return {lo, f(lo)};
  constexpr int grid = 10;
  double best_x = lo, best_v = -std::numeric_limits<double>::infinity();
  int best_i = 0;
  const double h = (hi - lo) / grid;
  for (int i = 0; i <= grid; ++i) {
    const double x = i == grid ? hi : lo + i * h;
    const double v = f(x);
    if (v > best_v) {
      best_v = v;
      best_x = x;
      best_i = i;
    }
  }
  double a = best_i == 0 ? lo : lo + (best_i - 1) * h;
  double b = best_i == grid ? hi : lo + (best_i + 1) * h;
  const double ratio = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = b - ratio * (b - a), x2 = a + ratio * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > tol) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + ratio * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - ratio * (b - a);
      f1 = f(x1);
    }
  }
  for (auto [x, v] : {std::pair{x1, f1}, std::pair{x2, f2}})
    if (v > best_v) {
      best_v = v;
      best_x = x;
    }
  return {best_x, best_v};
}

/// CVaR value only, reusing a scratch buffer.
inline double cvar_value(const std::vector<double>& values, const std::vector<double>& probs,
                         double alpha, std::vector<std::pair<double, double>>& scratch) {
  scratch.resize(values.size());
  for (std::size_t w = 0; w < values.size(); ++w)
    scratch[w] = {values[w], probs[w]};
  std::sort(scratch.begin(), scratch.end(),
            [](const auto& l, const auto& r) { return l.first < r.first; });
  const double tail = 1.0 - alpha;
  double cum = 0.0;
  double xi = scratch.back().first;
  for (const auto& [v, p] : scratch) {
    cum += p;
    if (cum >= tail * (1.0 - 1e-12)) {
      xi = v;
      break;
    }
  }
  double shortfall = 0.0;
  for (const auto& [v, p] : scratch) {
    if (v >= xi)
      break;
    shortfall += p * (xi - v);
  }
  return xi - shortfall / tail;
}

inline double fb(double a, double b, double smooth) {
  return a + b - std::sqrt(a * a + b * b + 2.0 * smooth * smooth);
}

/// Element of the (generalized) gradient of fb with respect to (a, b).
inline std::pair<double, double> fb_grad(double a, double b, double smooth) {
  const double r = std::sqrt(a * a + b * b + 2.0 * smooth * smooth);
  if (r <= 1e-300)
    return {1.0 - 1.0 / std::sqrt(2.0), 1.0 - 1.0 / std::sqrt(2.0)};
  return {1.0 - a / r, 1.0 - b / r};
}

/// Everything the solvers need about a (config, scenarios) pair.
class Market {
public:
  Market(const MarketConfig& cfg, const ScenarioSet& set) : cfg_(cfg), set_(&set) {
    for (const auto& g : cfg_.conventional)
      if (g.qF_min > g.qF_max || g.epsF_min > g.epsF_max)
        throw InfeasibleBounds("generator '" + g.id + "' has an empty futures box");
    for (const auto& r : cfg_.res)
      if (r.qF_min > r.futures_cap())
        throw InfeasibleBounds("generator '" + r.id + "' has an empty futures box");
    require_valid(cfg_);
    if (set.size() == 0)
      throw ModelError("empty scenario set");
    for (const auto& s : set)
      if (s.n_conv() != cfg_.n_conv() || s.n_res() != cfg_.n_res())
        throw ModelError("scenario generator counts do not match the configuration");
    models_.reserve(set.size());
    for (const auto& s : set)
      models_.emplace_back(s, cfg_);
    probs_ = probabilities(set);

    const std::size_t n = n_gen();
    lo_.resize(n + n_conv());
    hi_.resize(n + n_conv());
    for (std::size_t i = 0; i < n_conv(); ++i) {
      lo_[i] = cfg_.conventional[i].qF_min;
      hi_[i] = cfg_.conventional[i].qF_max;
      lo_[n + i] = cfg_.conventional[i].epsF_min;
      hi_[n + i] = cfg_.conventional[i].epsF_max;
    }
    for (std::size_t j = 0; j < n_res(); ++j) {
      lo_[n_conv() + j] = cfg_.res[j].qF_min;
      hi_[n_conv() + j] = cfg_.res[j].futures_cap();
    }
    eps_flat_.assign(n_conv(), true);
    for (const auto& m : models_)
      if (std::abs(m.allowance_gap()) > 1e-12 * std::max(1.0, cfg_.carbon.pF_co2))
        eps_flat_.assign(n_conv(), false);
  }

  const MarketConfig& config() const { return cfg_; }
  const ScenarioSet& scenarios() const { return *set_; }
  const std::vector<ScenarioModel>& models() const { return models_; }
  const std::vector<double>& probs() const { return probs_; }
  const std::vector<double>& lower() const { return lo_; }
  const std::vector<double>& upper() const { return hi_; }
  std::size_t n_conv() const { return cfg_.n_conv(); }
  std::size_t n_res() const { return cfg_.n_res(); }
  std::size_t n_gen() const { return cfg_.n_gen(); }
  std::size_t n_scen() const { return models_.size(); }
  std::size_t n_x() const { return n_gen() + n_conv(); }
  bool eps_flat(std::size_t i) const { return eps_flat_[i]; }
  double phi() const { return cfg_.risk.phi; }
  double alpha() const { return cfg_.risk.alpha; }

  FuturesDecision decision(const std::vector<double>& x) const { return models_[0].decision(x); }

  std::vector<double> pack(const FuturesDecision& fd) const {
    std::vector<double> x(fd.qF);
    x.insert(x.end(), fd.epsF.begin(), fd.epsF.end());
    return x;
  }

  /// Profit of k along x + t d_k with allowance shift de, per scenario:
  /// p0 + t g + t^2 h / 2 + de e. Exact because profits are quadratic.
  struct Line {
    std::vector<double> p0, g, h, e;
  };

  Line line(std::size_t k, const std::vector<double>& x) const {
    const auto fd = decision(x);
    Line ln;
    const std::size_t W = n_scen();
    ln.p0.resize(W);
    ln.g.resize(W);
    ln.h.resize(W);
    ln.e.resize(W);
    const auto d = models_[0].direction(k);
    for (std::size_t w = 0; w < W; ++w) {
      const auto& m = models_[w];
      const auto ev = m.evaluate(fd, false);
      ln.p0[w] = ev.profit[k];
      ln.g[w] = ev.g[k];
      double h = 0.0;
      const auto& row = m.conjectural_jacobian()[k];
      for (std::size_t l = 0; l < d.size(); ++l)
        h += row[l] * d[l];
      ln.h[w] = h;
      ln.e[w] = k < n_conv() ? m.allowance_gap() : 0.0;
    }
    return ln;
  }

  double risk_objective(const std::vector<double>& values,
                        std::vector<std::pair<double, double>>& scratch) const {
    double expected = 0.0;
    for (std::size_t w = 0; w < values.size(); ++w)
      expected += probs_[w] * values[w];
    if (phi() == 0.0)
      return expected;
    return objective(expected, cvar_value(values, probs_, alpha(), scratch), phi());
  }

  /// Expected own emissions of conventional i at x.
  double expected_emissions(std::size_t i, const std::vector<double>& x) const {
    const auto fd = decision(x);
    double e = 0.0;
    for (std::size_t w = 0; w < n_scen(); ++w) {
      const auto sp = models_[w].spot(fd);
      e += probs_[w] * models_[w].scenario().eta[i] * (sp.qS_conv[i] + fd.qF[i]);
    }
    return e;
  }

private:
  MarketConfig cfg_;
  const ScenarioSet* set_;
  std::vector<ScenarioModel> models_;
  std::vector<double> probs_;
  std::vector<double> lo_, hi_;
  std::vector<bool> eps_flat_;
};

inline double clamp_to(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

/// Generator k's (conjectural) best response from the reference point x.
inline BestResponse best_response(const Market& mk, std::size_t k, const std::vector<double>& x,
                                  double tol) {
  const std::size_t n = mk.n_gen();
  const auto ln = mk.line(k, x);
  const std::size_t W = mk.n_scen();
  const auto& probs = mk.probs();
  const double t_lo = mk.lower()[k] - x[k];
  const double t_hi = mk.upper()[k] - x[k];
  const bool conv = k < mk.n_conv();
  const double e_ref = conv ? x[n + k] : 0.0;
  const double e_lo = conv ? mk.lower()[n + k] : 0.0;
  const double e_hi = conv ? mk.upper()[n + k] : 0.0;
  const bool eps_free = conv && !mk.eps_flat(k) && e_hi > e_lo;

  std::vector<double> values(W);
  std::vector<std::pair<double, double>> scratch;
  auto value_at = [&](double t, double e) {
    const double de = e - e_ref;
    for (std::size_t w = 0; w < W; ++w)
      values[w] = ln.p0[w] + t * ln.g[w] + 0.5 * t * t * ln.h[w] + de * ln.e[w];
    return mk.risk_objective(values, scratch);
  };

  double mean_e = 0.0, mean_g = 0.0, mean_h = 0.0;
  for (std::size_t w = 0; w < W; ++w) {
    mean_e += probs[w] * ln.e[w];
    mean_g += probs[w] * ln.g[w];
    mean_h += probs[w] * ln.h[w];
  }

  double t_best = 0.0, e_best = e_ref;
  if (mk.phi() == 0.0) {
    if (eps_free)
      e_best = mean_e > 0.0 ? e_hi : (mean_e < 0.0 ? e_lo : e_ref);
    if (mean_h < 0.0) {
      t_best = clamp_to(-mean_g / mean_h, t_lo, t_hi);
    } else {
      t_best = value_at(t_lo, e_best) >= value_at(t_hi, e_best) ? t_lo : t_hi;
    }
  } else {
    const double q_tol = tol * std::max(mk.upper()[k] - mk.lower()[k], 1e-12);
    const double e_tol = tol * std::max(e_hi - e_lo, 1e-12);
    auto inner = [&](double t) {
      if (!eps_free)
        return std::pair{e_ref, value_at(t, e_ref)};
      return maximize_1d([&](double e) { return value_at(t, e); }, e_lo, e_hi, e_tol);
    };
    const auto [t_star, v_star] =
        maximize_1d([&](double t) { return inner(t).second; }, t_lo, t_hi, q_tol);
    t_best = t_star;
    e_best = inner(t_star).first;
  }
  return {x[k] + t_best, e_best, value_at(t_best, e_best)};
}

} // namespace detail

/// Best response of generator k against the futures decisions in fd.
inline BestResponse best_response(std::size_t k, const FuturesDecision& fd,
                                  const ScenarioSet& scenarios, const MarketConfig& cfg,
                                  double tol = 1e-6) {
  const detail::Market mk(cfg, scenarios);
  if (k >= mk.n_gen())
    throw ModelError("best_response: generator index out of range");
  return detail::best_response(mk, k, mk.pack(fd), tol);
}

/// Objective value of every generator at fd.
inline std::vector<double> generator_objectives(const FuturesDecision& fd,
                                                const ScenarioSet& scenarios,
                                                const MarketConfig& cfg) {
  const detail::Market mk(cfg, scenarios);
  const auto fdc = make_decision(fd.qF, fd.epsF, cfg.demand);
  std::vector<std::vector<double>> prof(mk.n_gen(), std::vector<double>(mk.n_scen()));
  for (std::size_t w = 0; w < mk.n_scen(); ++w) {
    const auto ev = mk.models()[w].evaluate(fdc, false);
    for (std::size_t k = 0; k < mk.n_gen(); ++k)
      prof[k][w] = ev.profit[k];
  }
  std::vector<double> out(mk.n_gen());
  std::vector<std::pair<double, double>> scratch;
  for (std::size_t k = 0; k < mk.n_gen(); ++k)
    out[k] = mk.risk_objective(prof[k], scratch);
  return out;
}

namespace detail {

/// Variable and equation layout of the joint KKT system. Each equation
/// shares its index with the variable it is complementary/paired to.
struct Layout {
  std::size_t n_gen = 0, n_conv = 0, n_scen = 0;
  bool cvar = false;
  std::vector<std::size_t> start;

  std::size_t q(std::size_t k) const { return start[k]; }
  std::size_t eps(std::size_t k) const { return start[k] + 1; }
  std::size_t xi(std::size_t k) const { return start[k] + (k < n_conv ? 2 : 1); }
  std::size_t nu_min(std::size_t k) const { return xi(k) + (cvar ? 1 : 0); }
  std::size_t nu_max(std::size_t k) const { return nu_min(k) + 1; }
  std::size_t lam_min(std::size_t k) const { return nu_max(k) + 1; }
  std::size_t lam_max(std::size_t k) const { return nu_max(k) + 2; }
  std::size_t eta(std::size_t k, std::size_t w) const {
    return nu_max(k) + (k < n_conv ? 3 : 1) + 2 * w;
  }
  std::size_t mu(std::size_t k, std::size_t w) const { return eta(k, w) + 1; }
  std::size_t size() const { return start.back(); }

  static Layout make(std::size_t n_conv, std::size_t n_res, std::size_t n_scen, bool cvar) {
    Layout l;
    l.n_conv = n_conv;
    l.n_gen = n_conv + n_res;
    l.n_scen = n_scen;
    l.cvar = cvar;
    std::size_t pos = 0;
    for (std::size_t k = 0; k < l.n_gen; ++k) {
      l.start.push_back(pos);
      const bool conv = k < n_conv;
      pos += 1 + (conv ? 1 : 0) + 2 + (conv ? 2 : 0);
      if (cvar)
        pos += 1 + 2 * n_scen;
    }
    l.start.push_back(pos);
    return l;
  }
};

/// Raw (unscaled) KKT state.
struct State {
  std::vector<double> x; // qF then epsF
  std::vector<DualState> duals;
};

/// Dual estimate from a primal point: VaR, shortfalls, tail weights and the
/// bound multipliers implied by the stationarity residual.
inline State extract_duals(const Market& mk, const std::vector<double>& x) {
  State st;
  st.x = x;
  const std::size_t n = mk.n_gen(), W = mk.n_scen();
  const double phi = mk.phi(), tail = 1.0 - mk.alpha();
  const auto fd = mk.decision(x);
  std::vector<std::vector<double>> prof(n, std::vector<double>(W)), g(n, std::vector<double>(W));
  for (std::size_t w = 0; w < W; ++w) {
    const auto ev = mk.models()[w].evaluate(fd, false);
    for (std::size_t k = 0; k < n; ++k) {
      prof[k][w] = ev.profit[k];
      g[k][w] = ev.g[k];
    }
  }
  const auto& probs = mk.probs();
  st.duals.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto& du = st.duals[k];
    const auto cv = cvar(prof[k], probs, mk.alpha());
    du.xi = cv.var;
    du.eta.resize(W);
    du.mu.assign(W, 0.0);
    du.theta.resize(W);
    // Scenarios near the VaR get free tail weights; weights elsewhere are
    // fixed by the sign of the CVaR slack.
    double pmax = 1.0;
    for (double p : prof[k])
      pmax = std::max(pmax, std::abs(p));
    const double tie_tol = 1e-5 * pmax;
    std::vector<std::size_t> order(W);
    for (std::size_t w = 0; w < W; ++w)
      order[w] = w;
    std::sort(order.begin(), order.end(),
              [&](std::size_t l, std::size_t r) { return prof[k][l] < prof[k][r]; });
    std::vector<bool> free_mu(W, false);
    double cum = 0.0;
    for (std::size_t r = 0; r < W; ++r) {
      const std::size_t w = order[r];
      const double kappa = phi * probs[w] / tail;
      du.eta[w] = std::max(du.xi - prof[k][w], 0.0);
      const bool near = std::abs(prof[k][w] - du.xi) <= tie_tol;
      const bool edge = cum < tail * (1.0 + 1e-12) && cum + probs[w] > tail * (1.0 - 1e-12);
      if (phi > 0.0 && (near || edge))
        free_mu[w] = true;
      du.mu[w] = kappa * clamp_to((tail - cum) / probs[w], 0.0, 1.0);
      cum += probs[w];
    }

    const bool conv = k < mk.n_conv();
    const double gs = 1.0 + [&] {
      double m = 0.0;
      for (double v : g[k])
        m = std::max(m, std::abs(v));
      return m;
    }();
    double as = 1.0;
    for (const auto& m : mk.models())
      as = std::max(as, std::abs(m.allowance_gap()));
    const double qlo = mk.lower()[k], qhi = mk.upper()[k];
    const double qtol = 1e-9 * std::max(1.0, qhi - qlo);
    const bool at_qlo = x[k] <= qlo + qtol, at_qhi = x[k] >= qhi - qtol;
    bool at_elo = false, at_ehi = false;
    if (conv) {
      const double elo = mk.lower()[n + k], ehi = mk.upper()[n + k];
      const double etol = 1e-9 * std::max(1.0, ehi - elo);
      at_elo = x[n + k] <= elo + etol;
      at_ehi = x[n + k] >= ehi - etol;
    }

    // Bounded least squares on rows (a), (b), (d) by coordinate descent.
    constexpr double wd = 10.0;
    double ra = 0.0, rb = 0.0, rd = -phi * wd;
    for (std::size_t w = 0; w < W; ++w) {
      const double wgt = (1.0 - phi) * probs[w] + du.mu[w];
      ra -= wgt * g[k][w] / gs;
      if (conv)
        rb -= wgt * mk.models()[w].allowance_gap() / as;
      rd += du.mu[w] * wd;
    }
    struct Col {
      double* v;
      double ca, cb, cd, lo, hi;
    };
    std::vector<Col> cols;
    for (std::size_t w = 0; w < W; ++w)
      if (free_mu[w])
        cols.push_back({&du.mu[w], -g[k][w] / gs,
                        conv ? -mk.models()[w].allowance_gap() / as : 0.0, wd, 0.0,
                        phi * probs[w] / tail});
    const double inf = std::numeric_limits<double>::infinity();
    if (at_qlo)
      cols.push_back({&du.nu_min, -1.0 / gs, 0.0, 0.0, 0.0, inf});
    if (at_qhi)
      cols.push_back({&du.nu_max, 1.0 / gs, 0.0, 0.0, 0.0, inf});
    if (at_elo)
      cols.push_back({&du.lambda_min, 0.0, -1.0 / as, 0.0, 0.0, inf});
    if (at_ehi)
      cols.push_back({&du.lambda_max, 0.0, 1.0 / as, 0.0, 0.0, inf});
    for (int sweep = 0; sweep < 2000 && !cols.empty(); ++sweep) {
      double moved = 0.0;
      for (auto& c : cols) {
        const double nrm = c.ca * c.ca + c.cb * c.cb + c.cd * c.cd;
        if (nrm == 0.0)
          continue;
        const double step = -(c.ca * ra + c.cb * rb + c.cd * rd) / nrm;
        const double nv = clamp_to(*c.v + step, c.lo, c.hi);
        const double dv = nv - *c.v;
        *c.v = nv;
        ra += c.ca * dv;
        rb += c.cb * dv;
        rd += c.cd * dv;
        moved = std::max(moved, std::abs(dv) * std::sqrt(nrm));
      }
      if (moved < 1e-15)
        break;
    }
    for (std::size_t w = 0; w < W; ++w)
      du.theta[w] = phi * probs[w] / tail - du.mu[w];
  }
  return st;
}

struct Scales {
  double profit = 1.0;
  double gradient = 1.0;
  double allowance = 1.0;
  std::vector<double> width; // per x entry
};

inline Scales make_scales(const Market& mk, const std::vector<double>& x) {
  Scales sc;
  const auto fd = mk.decision(x);
  double pmax = 0.0, gmax = 0.0, amax = 0.0;
  for (const auto& m : mk.models()) {
    const auto ev = m.evaluate(fd, false);
    for (double p : ev.profit)
      pmax = std::max(pmax, std::abs(p));
    for (double g : ev.g)
      gmax = std::max(gmax, std::abs(g));
    amax = std::max(amax, std::abs(m.allowance_gap()));
  }
  sc.profit = std::max(pmax, 1.0);
  sc.gradient = std::max(gmax, 1e-6);
  sc.allowance = std::max(amax, 1e-6);
  sc.width.resize(mk.n_x());
  for (std::size_t l = 0; l < mk.n_x(); ++l)
    sc.width[l] = std::max(mk.upper()[l] - mk.lower()[l], 1.0);
  return sc;
}

/// Levenberg-Marquardt on the scaled Fischer-Burmeister system.
class KktNewton {
public:
  KktNewton(const Market& mk, const Scales& sc, bool cvar)
      : mk_(mk), sc_(sc), lay_(Layout::make(mk.n_conv(), mk.n_res(), mk.n_scen(), cvar)) {
    const std::size_t N = lay_.size();
    var_scale_.assign(N, 1.0);
    const double tail = 1.0 - mk.alpha();
    for (std::size_t k = 0; k < lay_.n_gen; ++k) {
      const bool conv = k < lay_.n_conv;
      var_scale_[lay_.q(k)] = sc.width[k];
      var_scale_[lay_.nu_min(k)] = sc.gradient;
      var_scale_[lay_.nu_max(k)] = sc.gradient;
      if (conv) {
        var_scale_[lay_.eps(k)] = sc.width[lay_.n_gen + k];
        var_scale_[lay_.lam_min(k)] = sc.allowance;
        var_scale_[lay_.lam_max(k)] = sc.allowance;
      }
      if (cvar) {
        var_scale_[lay_.xi(k)] = sc.profit;
        for (std::size_t w = 0; w < lay_.n_scen; ++w) {
          var_scale_[lay_.eta(k, w)] = sc.profit;
          var_scale_[lay_.mu(k, w)] = mk.probs()[w] / tail;
        }
      }
    }
  }

  const Layout& layout() const { return lay_; }

  Eigen::VectorXd to_scaled(const State& st) const {
    Eigen::VectorXd u(lay_.size());
    const std::size_t n = lay_.n_gen;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& du = st.duals[k];
      u[lay_.q(k)] = st.x[k];
      u[lay_.nu_min(k)] = du.nu_min;
      u[lay_.nu_max(k)] = du.nu_max;
      if (k < lay_.n_conv) {
        u[lay_.eps(k)] = st.x[n + k];
        u[lay_.lam_min(k)] = du.lambda_min;
        u[lay_.lam_max(k)] = du.lambda_max;
      }
      if (lay_.cvar) {
        u[lay_.xi(k)] = du.xi;
        for (std::size_t w = 0; w < lay_.n_scen; ++w) {
          u[lay_.eta(k, w)] = du.eta[w];
          u[lay_.mu(k, w)] = du.mu[w];
        }
      }
    }
    for (std::size_t r = 0; r < lay_.size(); ++r)
      u[r] /= var_scale_[r];
    return u;
  }

  State from_scaled(const Eigen::VectorXd& u) const {
    State st;
    const std::size_t n = lay_.n_gen, W = lay_.n_scen;
    auto raw = [&](std::size_t r) { return u[r] * var_scale_[r]; };
    st.x.assign(mk_.n_x(), 0.0);
    st.duals.resize(n);
    const double tail = 1.0 - mk_.alpha();
    for (std::size_t k = 0; k < n; ++k) {
      auto& du = st.duals[k];
      st.x[k] = raw(lay_.q(k));
      du.nu_min = raw(lay_.nu_min(k));
      du.nu_max = raw(lay_.nu_max(k));
      if (k < lay_.n_conv) {
        st.x[n + k] = raw(lay_.eps(k));
        du.lambda_min = raw(lay_.lam_min(k));
        du.lambda_max = raw(lay_.lam_max(k));
      }
      du.eta.assign(W, 0.0);
      du.mu.assign(W, 0.0);
      du.theta.assign(W, 0.0);
      if (lay_.cvar) {
        du.xi = raw(lay_.xi(k));
        for (std::size_t w = 0; w < W; ++w) {
          du.eta[w] = raw(lay_.eta(k, w));
          du.mu[w] = raw(lay_.mu(k, w));
          du.theta[w] = mk_.phi() * mk_.probs()[w] / tail - du.mu[w];
        }
      }
    }
    return st;
  }

  /// Residual and (optionally) Jacobian with respect to the scaled variables.
  void assemble(const Eigen::VectorXd& u, double smooth, Eigen::VectorXd& F,
                std::vector<Eigen::Triplet<double>>* jac) const {
    const State st = from_scaled(u);
    const std::size_t n = lay_.n_gen, I = lay_.n_conv, W = lay_.n_scen;
    const std::size_t N = lay_.size();
    F.setZero(N);
    auto put = [&](std::size_t row, std::size_t col, double dz) {
      if (jac)
        jac->emplace_back(static_cast<int>(row), static_cast<int>(col), dz * var_scale_[col]);
    };
    const auto fd = mk_.decision(st.x);
    const auto& probs = mk_.probs();
    const double phi = mk_.phi(), tail = 1.0 - mk_.alpha();
    const auto& lo = mk_.lower();
    const auto& hi = mk_.upper();

    std::vector<double> sum_a(n, 0.0), sum_b(I, 0.0);
    std::vector<std::vector<double>> sum_a_dx(n, std::vector<double>(n, 0.0));
    for (std::size_t w = 0; w < W; ++w) {
      const auto& m = mk_.models()[w];
      const auto ev = m.evaluate(fd, lay_.cvar);
      const auto& dg = m.conjectural_jacobian();
      const double gap = m.allowance_gap();
      for (std::size_t k = 0; k < n; ++k) {
        const auto& du = st.duals[k];
        const double wgt = (1.0 - phi) * probs[w] + (lay_.cvar ? du.mu[w] : 0.0);
        sum_a[k] -= wgt * ev.g[k];
        for (std::size_t l = 0; l < n; ++l)
          sum_a_dx[k][l] -= wgt * dg[k][l];
        if (k < I)
          sum_b[k] -= wgt * gap;
        if (!lay_.cvar)
          continue;
        const std::size_t ie = lay_.eta(k, w), im = lay_.mu(k, w);
        // mu enters the stationarity rows
        put(lay_.q(k), im, -ev.g[k] / sc_.gradient);
        if (k < I)
          put(lay_.eps(k), im, -gap / sc_.allowance);
        put(lay_.xi(k), im, 1.0);
        // (e): 0 <= eta + Pi - xi  perp  mu >= 0
        {
          const double sa = (du.eta[w] + ev.profit[k] - du.xi) / sc_.profit;
          const double sb = du.mu[w] / var_scale_[im];
          F[im] = fb(sa, sb, smooth);
          const auto [pa, pb] = fb_grad(sa, sb, smooth);
          put(im, ie, pa / sc_.profit);
          put(im, lay_.xi(k), -pa / sc_.profit);
          for (std::size_t l = 0; l < n; ++l)
            put(im, lay_.q(l), pa * ev.grad[k][l] / sc_.profit);
          if (k < I)
            put(im, lay_.eps(k), pa * ev.grad[k][n + k] / sc_.profit);
          put(im, im, pb / var_scale_[im]);
        }
        // (f): 0 <= eta  perp  theta = phi sigma / (1-alpha) - mu >= 0
        {
          const double kappa = phi * probs[w] / tail;
          const double sa = du.eta[w] / sc_.profit;
          const double sb = (kappa - du.mu[w]) / var_scale_[im];
          F[ie] = fb(sa, sb, smooth);
          const auto [pa, pb] = fb_grad(sa, sb, smooth);
          put(ie, ie, pa / sc_.profit);
          put(ie, im, -pb / var_scale_[im]);
        }
      }
    }

    for (std::size_t k = 0; k < n; ++k) {
      const auto& du = st.duals[k];
      // (a)
      const std::size_t ra = lay_.q(k);
      F[ra] = (sum_a[k] - du.nu_min + du.nu_max) / sc_.gradient;
      for (std::size_t l = 0; l < n; ++l)
        put(ra, lay_.q(l), sum_a_dx[k][l] / sc_.gradient);
      put(ra, lay_.nu_min(k), -1.0 / sc_.gradient);
      put(ra, lay_.nu_max(k), 1.0 / sc_.gradient);
      // (g), (h)
      box_pair(F, put, lay_.nu_min(k), lay_.nu_max(k), lay_.q(k), st.x[k], lo[k], hi[k],
               du.nu_min, du.nu_max, sc_.width[k], sc_.gradient, smooth);
      if (k < I) {
        const std::size_t rb = lay_.eps(k);
        F[rb] = (sum_b[k] - du.lambda_min + du.lambda_max) / sc_.allowance;
        put(rb, lay_.lam_min(k), -1.0 / sc_.allowance);
        put(rb, lay_.lam_max(k), 1.0 / sc_.allowance);
        box_pair(F, put, lay_.lam_min(k), lay_.lam_max(k), lay_.eps(k), st.x[n + k], lo[n + k],
                 hi[n + k], du.lambda_min, du.lambda_max, sc_.width[n + k], sc_.allowance,
                 smooth);
      }
      if (lay_.cvar) {
        // (d)
        double s = 0.0;
        for (std::size_t w = 0; w < W; ++w)
          s += du.mu[w];
        F[lay_.xi(k)] = s - phi;
      }
    }
  }

  struct Result {
    State state;
    int iterations = 0;
    double merit = 0.0;
  };

  /// Iterates until `done` reports acceptance or the budget is exhausted.
  Result solve(const State& start, int max_iter, const std::function<bool(const State&)>& done,
               std::vector<TraceRow>* trace) const {
    Eigen::VectorXd u = to_scaled(start);
    const std::size_t N = lay_.size();
    Eigen::VectorXd F(N), Ft(N);
    std::vector<Eigen::Triplet<double>> trip;

    double smooth = 0.0;
    assemble(u, 0.0, F, nullptr);
    smooth = std::min(1e-3, 0.1 * F.lpNorm<Eigen::Infinity>());
    double lm = 1e-3;
    Result res;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
    bool analyzed = false;

    for (int it = 0; it < max_iter; ++it) {
      trip.clear();
      assemble(u, smooth, F, &trip);
      const double merit = F.squaredNorm();
      res.iterations = it;
      if (smooth == 0.0 && done(from_scaled(u)))
        break;
      if (smooth == 0.0 && F.lpNorm<Eigen::Infinity>() < 1e-15)
        break;

      // Augmented system [rho I, J^T; J, -I] [d; y] = [0; -F].
      const double rho = std::max(lm * std::sqrt(merit), 1e-14);
      std::vector<Eigen::Triplet<double>> aug;
      aug.reserve(2 * trip.size() + 2 * N);
      for (std::size_t r = 0; r < N; ++r) {
        aug.emplace_back(static_cast<int>(r), static_cast<int>(r), rho);
        aug.emplace_back(static_cast<int>(N + r), static_cast<int>(N + r), -1.0);
      }
      for (const auto& t : trip) {
        aug.emplace_back(static_cast<int>(N) + t.row(), t.col(), t.value());
        aug.emplace_back(t.col(), static_cast<int>(N) + t.row(), t.value());
      }
      Eigen::SparseMatrix<double> A(2 * N, 2 * N);
      A.setFromTriplets(aug.begin(), aug.end());
      if (!analyzed) {
        ldlt.analyzePattern(A);
        analyzed = true;
      }
      ldlt.factorize(A);
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2 * N);
      rhs.tail(N) = -F;
      const Eigen::VectorXd sol = ldlt.solve(rhs);
      const Eigen::VectorXd d = sol.head(N);
      const Eigen::VectorXd lin = F + (sol.tail(N)) * 0.0 + jac_times(trip, d, N);
      const double predicted = merit - lin.squaredNorm();

      const Eigen::VectorXd trial = u + d;
      assemble(trial, smooth, Ft, nullptr);
      const double actual = merit - Ft.squaredNorm();
      const double ratio = predicted > 0.0 ? actual / predicted : -1.0;
      if (trace)
        trace->push_back({it, "newton", std::sqrt(merit), d.lpNorm<Eigen::Infinity>()});
      if (ldlt.info() == Eigen::Success && ratio > 1e-4 && std::isfinite(Ft.squaredNorm())) {
        u = trial;
        if (ratio > 0.75)
          lm = std::max(lm * 0.25, 1e-10);
        else if (ratio < 0.25)
          lm *= 4.0;
        // tighten smoothing with the unsmoothed residual
        Eigen::VectorXd F0(N);
        assemble(u, 0.0, F0, nullptr);
        const double r0 = F0.lpNorm<Eigen::Infinity>();
        smooth = std::min(0.2 * smooth, 0.1 * r0);
        if (smooth < 1e-13)
          smooth = 0.0;
      } else {
        lm = std::min(lm * 4.0, 1e12);
        if (lm >= 1e12 && smooth > 0.0)
          smooth = 0.0;
      }
    }
    assemble(u, 0.0, F, nullptr);
    res.merit = F.squaredNorm();
    res.state = from_scaled(u);
    return res;
  }

private:
  template <class Put>
  void box_pair(Eigen::VectorXd& F, Put& put, std::size_t r_min, std::size_t r_max,
                std::size_t col_x, double x, double lo, double hi, double d_min, double d_max,
                double width, double dual_scale, double smooth) const {
    {
      const double sa = (x - lo) / width, sb = d_min / dual_scale;
      F[r_min] = fb(sa, sb, smooth);
      const auto [pa, pb] = fb_grad(sa, sb, smooth);
      put(r_min, col_x, pa / width);
      put(r_min, r_min, pb / dual_scale);
    }
    {
      const double sa = (hi - x) / width, sb = d_max / dual_scale;
      F[r_max] = fb(sa, sb, smooth);
      const auto [pa, pb] = fb_grad(sa, sb, smooth);
      put(r_max, col_x, -pa / width);
      put(r_max, r_max, pb / dual_scale);
    }
  }

  static Eigen::VectorXd jac_times(const std::vector<Eigen::Triplet<double>>& trip,
                                   const Eigen::VectorXd& d, std::size_t N) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(N);
    for (const auto& t : trip)
      out[t.row()] += t.value() * d[t.col()];
    return out;
  }

  const Market& mk_;
  const Scales& sc_;
  Layout lay_;
  std::vector<double> var_scale_;
};

/// Damped Gauss-Seidel iteration of best responses.
inline std::vector<double> diagonalize(const Market& mk, const SolverOptions& opt, int& sweeps,
                                       std::vector<TraceRow>* trace) {
  std::vector<double> x(mk.lower());
  const std::size_t n = mk.n_gen();
  double best_change = std::numeric_limits<double>::infinity();
  int stalled = 0;
  double damping = opt.damping;
  sweeps = 0;
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    sweeps = sweep + 1;
    double change = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto br = best_response(mk, k, x, opt.br_tol);
      const double wq = std::max(mk.upper()[k] - mk.lower()[k], 1.0);
      const double dq = damping * (br.qF - x[k]);
      x[k] += dq;
      change = std::max(change, std::abs(dq) / wq);
      if (k < mk.n_conv()) {
        const double we = std::max(mk.upper()[n + k] - mk.lower()[n + k], 1.0);
        const double de = damping * (br.epsF - x[n + k]);
        x[n + k] += de;
        change = std::max(change, std::abs(de) / we);
      }
    }
    if (trace)
      trace->push_back({sweep, "diagonalization", change, change});
    if (change < 1e-10)
      break;
    if (change < best_change * 0.999) {
      best_change = change;
      stalled = 0;
    } else if (++stalled >= 25) {
      // Oscillating best responses: halve the step rather than give up.
      if (damping <= 0.05)
        break;
      damping *= 0.5;
      stalled = 0;
      best_change = change;
    }
  }
  return x;
}

} // namespace detail

/// KKT residuals of a candidate equilibrium.
inline KktResiduals stationarity_residuals(const EquilibriumSolution& sol,
                                           const MarketConfig& cfg, const ScenarioSet& set) {
  const detail::Market mk(cfg, set);
  const std::size_t n = mk.n_gen(), I = mk.n_conv(), W = mk.n_scen();
  const double phi = sol.risk_phi, tail = 1.0 - sol.risk_alpha;
  const auto& probs = mk.probs();
  const auto fd = make_decision(sol.fd.qF, sol.fd.epsF, cfg.demand);
  KktResiduals r;
  r.a.assign(n, 0.0);
  r.b.assign(I, 0.0);
  r.d.assign(n, 0.0);
  r.c.assign(n, std::vector<double>(W, 0.0));
  const double pscale = std::max(sol.profit_scale, 1.0);
  const double gscale = std::max(sol.gradient_scale, 1e-12);
  double feas = 0.0;
  auto viol = [&feas](double v, double scale) { feas = std::max(feas, std::max(-v, 0.0) / scale); };

  std::vector<ScenarioModel::Evaluation> evs;
  evs.reserve(W);
  for (const auto& m : mk.models())
    evs.push_back(m.evaluate(fd, false));

  for (std::size_t k = 0; k < n; ++k) {
    const auto& du = sol.duals[k];
    double sq = 0.0, se = 0.0, smu = 0.0;
    for (std::size_t w = 0; w < W; ++w) {
      const double mu = du.mu.empty() ? 0.0 : du.mu[w];
      const double theta = du.theta.empty() ? 0.0 : du.theta[w];
      const double eta = du.eta.empty() ? 0.0 : du.eta[w];
      const double wgt = (1.0 - phi) * probs[w] + mu;
      sq -= wgt * evs[w].g[k];
      if (k < I)
        se -= wgt * mk.models()[w].allowance_gap();
      smu += mu;
      const double kappa = phi * probs[w] / tail;
      r.c[k][w] = kappa - mu - theta;
      const double slack = eta + evs[w].profit[k] - du.xi;
      r.complementarity += std::abs(mu * slack) + std::abs(eta * theta);
      viol(slack, pscale);
      viol(eta, pscale);
      const double kref = probs[w] / tail;
      viol(mu, kref);
      viol(theta, kref);
    }
    r.a[k] = sq - du.nu_min + du.nu_max;
    r.d[k] = smu - phi;
    const double qlo = mk.lower()[k], qhi = mk.upper()[k];
    const double wq = std::max(qhi - qlo, 1.0);
    r.complementarity +=
        std::abs((fd.qF[k] - qlo) * du.nu_min) + std::abs((qhi - fd.qF[k]) * du.nu_max);
    viol(fd.qF[k] - qlo, wq);
    viol(qhi - fd.qF[k], wq);
    viol(du.nu_min, gscale);
    viol(du.nu_max, gscale);
    double m = std::abs(r.a[k]);
    if (k < I) {
      r.b[k] = se - du.lambda_min + du.lambda_max;
      const double elo = mk.lower()[n + k], ehi = mk.upper()[n + k];
      const double we = std::max(ehi - elo, 1.0);
      r.complementarity += std::abs((fd.epsF[k] - elo) * du.lambda_min) +
                           std::abs((ehi - fd.epsF[k]) * du.lambda_max);
      viol(fd.epsF[k] - elo, we);
      viol(ehi - fd.epsF[k], we);
      viol(du.lambda_min, gscale);
      viol(du.lambda_max, gscale);
      m = std::max(m, std::abs(r.b[k]));
    }
    m = std::max(m, std::abs(r.d[k]) * gscale);
    for (double c : r.c[k])
      m = std::max(m, std::abs(c) * gscale);
    r.max_stationarity = std::max(r.max_stationarity, m);
  }
  r.feasibility = feas;
  return r;
}

namespace detail {

inline EquilibriumSolution finalize(const Market& mk, State st, const Scales& sc,
                                    const SolverOptions& opt, bool risk_path) {
  const std::size_t n = mk.n_gen(), I = mk.n_conv(), W = mk.n_scen();
  EquilibriumSolution sol;
  sol.risk_phi = mk.phi();
  sol.risk_alpha = mk.alpha();
  sol.risk_averse_path = risk_path;
  sol.profit_scale = sc.profit;
  sol.gradient_scale = sc.gradient;
  sol.tol_comp = opt.tol_comp;
  sol.tol_stat = opt.tol_stat;
  sol.tol_feas = opt.tol_feas;

  // Project tiny box excursions left by the Newton iteration; a flat
  // allowance direction is resolved to the expected own emissions.
  for (std::size_t l = 0; l < mk.n_x(); ++l)
    st.x[l] = clamp_to(st.x[l], mk.lower()[l], mk.upper()[l]);
  sol.eps_flat.assign(I, false);
  for (std::size_t i = 0; i < I; ++i) {
    if (!mk.eps_flat(i))
      continue;
    sol.eps_flat[i] = true;
    st.x[n + i] = clamp_to(mk.expected_emissions(i, st.x), mk.lower()[n + i], mk.upper()[n + i]);
    st.duals[i].lambda_min = st.duals[i].lambda_max = 0.0;
  }

  // Sign constraints on the duals are enforced exactly; Newton leaves them
  // within rounding of feasible.
  const double tail = 1.0 - mk.alpha();
  for (auto& du : st.duals) {
    du.nu_min = std::max(du.nu_min, 0.0);
    du.nu_max = std::max(du.nu_max, 0.0);
    du.lambda_min = std::max(du.lambda_min, 0.0);
    du.lambda_max = std::max(du.lambda_max, 0.0);
    for (std::size_t w = 0; w < du.mu.size(); ++w) {
      const double kappa = mk.phi() * mk.probs()[w] / tail;
      du.mu[w] = clamp_to(du.mu[w], 0.0, kappa);
      du.theta[w] = kappa - du.mu[w];
      du.eta[w] = std::max(du.eta[w], 0.0);
    }
  }

  sol.fd = mk.decision(st.x);
  sol.spot.reserve(W);
  sol.panel.profit.assign(n, std::vector<double>(W));
  for (std::size_t w = 0; w < W; ++w) {
    const auto ev = mk.models()[w].evaluate(sol.fd, false);
    for (std::size_t k = 0; k < n; ++k)
      sol.panel.profit[k][w] = ev.profit[k];
    sol.spot.push_back(ev.spot);
  }
  sol.panel.summarize(mk.probs(), mk.alpha());
  sol.objective.resize(n);
  for (std::size_t k = 0; k < n; ++k)
    sol.objective[k] = objective(sol.panel.expected[k], sol.panel.cvar[k], mk.phi());

  if (!risk_path) {
    // Risk-neutral path carries no CVaR variables; report VaR/shortfalls.
    for (std::size_t k = 0; k < n; ++k) {
      auto& du = st.duals[k];
      du.xi = sol.panel.var[k];
      du.eta.assign(W, 0.0);
      for (std::size_t w = 0; w < W; ++w)
        du.eta[w] = std::max(du.xi - sol.panel.profit[k][w], 0.0);
      du.mu.assign(W, 0.0);
      du.theta.assign(W, 0.0);
    }
  }
  sol.duals = std::move(st.duals);
  return sol;
}

inline EquilibriumSolution solve(const MarketConfig& cfg, const ScenarioSet& set,
                                 const SolverOptions& opt, bool cvar) {
  const Market mk(cfg, set);
  std::vector<TraceRow> trace;
  auto* tr = opt.trace ? &trace : nullptr;
  int sweeps = 0;
  const auto x0 = diagonalize(mk, opt, sweeps, tr);
  const Scales sc = make_scales(mk, x0);
  const State start = extract_duals(mk, x0);

  auto evaluate = [&](const State& st) {
    auto sol = finalize(mk, st, sc, opt, cvar);
    const auto r = stationarity_residuals(sol, cfg, set);
    sol.residual = r.complementarity;
    sol.kkt_residual = r.max_stationarity;
    sol.feasibility = r.feasibility;
    return sol;
  };
  // Stop once the certificate holds with two orders of margin.
  auto done = [&](const State& st) {
    const auto sol = evaluate(st);
    return sol.residual <= 1e-2 * opt.tol_comp * sol.profit_scale &&
           sol.kkt_residual <= 1e-2 * opt.tol_stat * sol.gradient_scale &&
           sol.feasibility <= 1e-2 * opt.tol_feas;
  };

  const KktNewton newton(mk, sc, cvar);
  auto res = newton.solve(start, opt.max_newton, done, tr);
  auto sol = evaluate(res.state);
  sol.sweeps = sweeps;
  sol.newton_steps = res.iterations;
  sol.status = sol.accepted() ? SolveStatus::converged : SolveStatus::non_convergence;
  sol.trace = std::move(trace);
  return sol;
}

} // namespace detail

/// Risk-averse (CVaR) equilibrium of the joint KKT system, any phi in [0,1].
inline EquilibriumSolution solve_equilibrium(const MarketConfig& cfg, const ScenarioSet& scenarios,
                                             const SolverOptions& opt = {}) {
  return detail::solve(cfg, scenarios, opt, true);
}

/// Risk-neutral equilibrium: expected-gradient stationarity with box
/// complementarity only.
inline EquilibriumSolution risk_neutral_equilibrium(const MarketConfig& cfg,
                                                    const ScenarioSet& scenarios,
                                                    const SolverOptions& opt = {}) {
  if (cfg.risk.phi != 0.0)
    throw ModelError("risk_neutral_equilibrium requires phi = 0");
  return detail::solve(cfg, scenarios, opt, false);
}

} // namespace etseq
