#pragma once

// Market primitives shared by every stage of the two-stage futures/spot model.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace etseq {

/// Thrown when a configuration or derived input cannot be used by a solver.
class ModelError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct ConventionalGenerator {
  std::string id;
  double a_mean = 0.0;   // fixed cost [EUR]
  double b_mean = 0.0;   // linear cost [EUR/MWh]
  double c_mean = 0.0;   // quadratic cost [EUR/MWh^2]
  double eta_mean = 0.0; // emission intensity [tCO2/MWh]
  double cv_a = 0.0, cv_b = 0.0, cv_c = 0.0, cv_eta = 0.0;
  double qF_min = 0.0, qF_max = 0.0;     // [MWh]
  double epsF_min = 0.0, epsF_max = 0.0; // [tCO2]
};

struct ResGenerator {
  std::string id;
  double Q_mean = 0.0; // expected total production [MWh]
  double cv_Q = 0.0;
  double qF_min = 0.0;
  double qF_max = 0.0;
  /// When set, the futures cap follows Q_mean (also under RES sweeps).
  bool qF_max_tracks_mean = false;

  double futures_cap() const { return qF_max_tracks_mean ? Q_mean : qF_max; }
};

struct DemandParams {
  double gammaF = 0.0; // futures intercept [EUR/MWh]
  double betaF = 0.0;  // futures slope [EUR/MWh^2]
  double cv_gamma = 0.0, cv_beta = 0.0;
};

struct CarbonParams {
  double pF_co2 = 0.0;      // futures allowance price [EUR/tCO2]
  double pS_co2_mean = 0.0; // spot allowance price mean [EUR/tCO2]
  double cv_pS = 0.0;
};

enum class Competition { cournot, perfect, custom };

/// Conjectural variations. delta per conventional generator (spot), psi per
/// generator in conventional-then-RES order (futures).
struct CompetitionConjecture {
  std::vector<double> delta;
  std::vector<double> psi;
  Competition kind = Competition::custom;

  static CompetitionConjecture cournot(std::size_t n_conv, std::size_t n_res) {
    return {std::vector<double>(n_conv, 0.0), std::vector<double>(n_conv + n_res, 0.0),
            Competition::cournot};
  }

  /// psi = -1/(I+J-1) zeroes the futures price impact 1+(I+J-1)psi.
  static CompetitionConjecture perfect(std::size_t n_conv, std::size_t n_res) {
    const std::size_t n = n_conv + n_res;
    const double psi = n > 1 ? -1.0 / static_cast<double>(n - 1) : 0.0;
    return {std::vector<double>(n_conv, -1.0), std::vector<double>(n, psi),
            Competition::perfect};
  }
};

struct RiskPreference {
  double phi = 0.0;   // weight on CVaR
  double alpha = 0.9; // CVaR confidence level
};

struct MarketConfig {
  std::vector<ConventionalGenerator> conventional;
  std::vector<ResGenerator> res;
  DemandParams demand;
  CarbonParams carbon;
  CompetitionConjecture conjecture;
  RiskPreference risk;
  std::size_t n_scenarios = 1;
  std::uint64_t seed = 0;

  std::size_t n_conv() const { return conventional.size(); }
  std::size_t n_res() const { return res.size(); }
  std::size_t n_gen() const { return conventional.size() + res.size(); }

  void set_competition(Competition c) {
    if (c == Competition::cournot)
      conjecture = CompetitionConjecture::cournot(n_conv(), n_res());
    else if (c == Competition::perfect)
      conjecture = CompetitionConjecture::perfect(n_conv(), n_res());
  }
};

using ValidationReport = std::vector<std::string>;

namespace detail {
inline bool finite_all(std::initializer_list<double> xs) {
  for (double x : xs)
    if (!std::isfinite(x))
      return false;
  return true;
}
} // namespace detail

/// Lists every violated invariant; empty iff the config is admissible.
inline ValidationReport validate(const MarketConfig& cfg) {
  ValidationReport out;
  auto fail = [&out](const std::string& who, const std::string& what) {
    out.push_back(who.empty() ? what : who + ": " + what);
  };

  if (cfg.conventional.empty())
    fail("", "at least one conventional generator is required");
  for (const auto& g : cfg.conventional) {
    const std::string who = "conventional '" + g.id + "'";
    if (!detail::finite_all({g.a_mean, g.b_mean, g.c_mean, g.eta_mean, g.cv_a, g.cv_b, g.cv_c,
                             g.cv_eta, g.qF_min, g.qF_max, g.epsF_min, g.epsF_max}))
      fail(who, "parameters must be finite");
    if (g.a_mean < 0)
      fail(who, "fixed cost must be nonnegative");
    if (g.b_mean < 0)
      fail(who, "linear cost must be nonnegative");
    if (!(g.c_mean > 0))
      fail(who, "quadratic cost must be positive");
    if (g.eta_mean < 0)
      fail(who, "emission intensity must be nonnegative");
    if (g.cv_a < 0 || g.cv_b < 0 || g.cv_c < 0 || g.cv_eta < 0)
      fail(who, "coefficients of variation must be nonnegative");
    if (g.qF_min > g.qF_max)
      fail(who, "qF_min exceeds qF_max");
    if (g.epsF_min > g.epsF_max)
      fail(who, "epsF_min exceeds epsF_max");
  }
  for (const auto& r : cfg.res) {
    const std::string who = "res '" + r.id + "'";
    if (!detail::finite_all({r.Q_mean, r.cv_Q, r.qF_min, r.futures_cap()}))
      fail(who, "parameters must be finite");
    if (r.Q_mean < 0)
      fail(who, "mean production must be nonnegative");
    if (r.cv_Q < 0)
      fail(who, "coefficient of variation must be nonnegative");
    if (r.qF_min > r.futures_cap())
      fail(who, "qF_min exceeds qF_max");
  }

  const auto& d = cfg.demand;
  if (!(d.gammaF > 0))
    fail("demand", "futures intercept must be positive");
  if (!(d.betaF > 0))
    fail("demand", "futures slope must be positive");
  if (d.cv_gamma < 0 || d.cv_beta < 0)
    fail("demand", "coefficients of variation must be nonnegative");

  const auto& c = cfg.carbon;
  if (c.pF_co2 < 0)
    fail("carbon", "futures allowance price must be nonnegative");
  if (c.pS_co2_mean < 0)
    fail("carbon", "spot allowance price mean must be nonnegative");
  if (c.cv_pS < 0)
    fail("carbon", "coefficient of variation must be nonnegative");

  const auto& cj = cfg.conjecture;
  if (cj.delta.size() != cfg.n_conv())
    fail("conjecture", "delta must have one entry per conventional generator");
  if (cj.psi.size() != cfg.n_gen())
    fail("conjecture", "psi must have one entry per generator");
  for (double v : cj.delta)
    if (!(v >= -1.0 && v <= 0.0))
      fail("conjecture", "delta must lie in [-1, 0]");
  for (double v : cj.psi)
    if (!(v >= -1.0 && v <= 0.0))
      fail("conjecture", "psi must lie in [-1, 0]");

  const auto& rk = cfg.risk;
  if (!(rk.phi >= 0.0 && rk.phi <= 1.0))
    fail("risk", "phi must lie in [0, 1]");
  if (!(rk.alpha > 0.0 && rk.alpha < 1.0))
    fail("risk", "alpha must lie in (0, 1)");
  if (cfg.n_scenarios < 1)
    fail("run", "at least one scenario is required");
  // Tail must hold at least one scenario; small slack absorbs rounding of (1-alpha).
  else if ((1.0 - rk.alpha) * static_cast<double>(cfg.n_scenarios) < 1.0 - 1e-9)
    fail("risk", "(1-alpha)|Omega| < 1: CVaR tail holds no scenario");
  return out;
}

inline void require_valid(const MarketConfig& cfg) {
  const auto report = validate(cfg);
  if (report.empty())
    return;
  std::ostringstream os;
  os << "invalid market configuration:";
  for (const auto& v : report)
    os << "\n  - " << v;
  throw ModelError(os.str());
}

} // namespace etseq
