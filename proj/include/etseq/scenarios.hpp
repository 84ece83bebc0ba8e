#pragma once

// Scenario sampling: independent truncated normals with sd = mean * CV.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "etseq/model.hpp"

namespace etseq {

struct Scenario {
  std::size_t index = 0;
  double prob = 1.0;
  std::vector<double> a, b, c, eta; // per conventional generator
  std::vector<double> Q;            // per RES generator
  double gammaS = 0.0;
  double betaS = 0.0;
  double pS_co2 = 0.0;

  std::size_t n_conv() const { return c.size(); }
  std::size_t n_res() const { return Q.size(); }
  double total_res() const {
    double s = 0.0;
    for (double q : Q)
      s += q;
    return s;
  }
};

struct ScenarioSet {
  std::vector<Scenario> scenarios;
  std::uint64_t seed = 0;

  std::size_t size() const { return scenarios.size(); }
  const Scenario& operator[](std::size_t w) const { return scenarios[w]; }
  auto begin() const { return scenarios.begin(); }
  auto end() const { return scenarios.end(); }
};

/// gamma_hat = gammaS - betaS * sum_j Q_j. Negative values are legal.
inline double effective_intercept(const Scenario& s) { return s.gammaS - s.betaS * s.total_res(); }

inline constexpr double kSlopeFloor = 1e-6;
inline constexpr double kQuadCostFloor = 1e-9;

namespace detail {

// Stable per-field stream ids, so scenario draws do not depend on |Omega|
// or on how many other generators exist.
enum : std::uint64_t {
  field_gamma = 0,
  field_beta = 1,
  field_pco2 = 2,
  field_conv = 16,     // + 4*i + {a,b,c,eta}
  field_res = 1u << 20 // + j
};

class SubstreamNormal {
public:
  SubstreamNormal(std::uint64_t seed, std::uint64_t scenario, std::uint64_t field) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(scenario),
                      static_cast<std::uint32_t>(scenario >> 32),
                      static_cast<std::uint32_t>(field), static_cast<std::uint32_t>(field >> 32)};
    engine_.seed(seq);
  }
  double operator()() { return dist_(engine_); }

private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Rejects distributions whose truncation would discard more than half the mass.
inline void check_truncation(const std::string& what, double mean, double cv, double floor) {
  const double sd = mean * cv;
  if (sd <= 0.0) {
    if (mean < floor)
      throw ModelError(what + ": mean lies below the physical floor");
    return;
  }
  if (normal_cdf((floor - mean) / sd) > 0.5)
    throw ModelError(what + ": truncation at the floor would discard more than half the mass");
}

inline double draw_truncated(std::uint64_t seed, std::uint64_t scenario, std::uint64_t field,
                             double mean, double cv, double floor) {
  const double sd = mean * cv;
  if (sd <= 0.0)
    return mean;
  SubstreamNormal z(seed, scenario, field);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    const double x = mean + sd * z();
    if (x >= floor)
      return x;
  }
  throw ModelError("truncated normal sampling did not terminate");
}

} // namespace detail

inline ScenarioSet sample_scenarios(const MarketConfig& cfg) {
  require_valid(cfg);
  using namespace detail;
  const auto& d = cfg.demand;
  const auto& cb = cfg.carbon;
  check_truncation("spot demand slope", d.betaF, d.cv_beta, kSlopeFloor);
  check_truncation("spot demand intercept", d.gammaF, d.cv_gamma, 0.0);
  check_truncation("spot allowance price", cb.pS_co2_mean, cb.cv_pS, 0.0);
  for (const auto& g : cfg.conventional) {
    check_truncation(g.id + " fixed cost", g.a_mean, g.cv_a, 0.0);
    check_truncation(g.id + " linear cost", g.b_mean, g.cv_b, 0.0);
    check_truncation(g.id + " quadratic cost", g.c_mean, g.cv_c, kQuadCostFloor);
    check_truncation(g.id + " emission intensity", g.eta_mean, g.cv_eta, 0.0);
  }
  for (const auto& r : cfg.res)
    check_truncation(r.id + " production", r.Q_mean, r.cv_Q, 0.0);

  ScenarioSet set;
  set.seed = cfg.seed;
  const std::size_t n = cfg.n_scenarios;
  set.scenarios.resize(n);
  const double prob = 1.0 / static_cast<double>(n);
  for (std::size_t w = 0; w < n; ++w) {
    Scenario& s = set.scenarios[w];
    s.index = w;
    s.prob = prob;
    s.gammaS = draw_truncated(cfg.seed, w, field_gamma, d.gammaF, d.cv_gamma, 0.0);
    s.betaS = draw_truncated(cfg.seed, w, field_beta, d.betaF, d.cv_beta, kSlopeFloor);
    s.pS_co2 = draw_truncated(cfg.seed, w, field_pco2, cb.pS_co2_mean, cb.cv_pS, 0.0);
    const std::size_t I = cfg.n_conv();
    s.a.resize(I);
    s.b.resize(I);
    s.c.resize(I);
    s.eta.resize(I);
    for (std::size_t i = 0; i < I; ++i) {
      const auto& g = cfg.conventional[i];
      const std::uint64_t base = field_conv + 4 * i;
      s.a[i] = draw_truncated(cfg.seed, w, base + 0, g.a_mean, g.cv_a, 0.0);
      s.b[i] = draw_truncated(cfg.seed, w, base + 1, g.b_mean, g.cv_b, 0.0);
      s.c[i] = draw_truncated(cfg.seed, w, base + 2, g.c_mean, g.cv_c, kQuadCostFloor);
      s.eta[i] = draw_truncated(cfg.seed, w, base + 3, g.eta_mean, g.cv_eta, 0.0);
    }
    s.Q.resize(cfg.n_res());
    for (std::size_t j = 0; j < cfg.n_res(); ++j) {
      const auto& r = cfg.res[j];
      s.Q[j] = draw_truncated(cfg.seed, w, field_res + j, r.Q_mean, r.cv_Q, 0.0);
    }
  }
  return set;
}

/// One row per scenario x generator.
inline void write_scenarios_csv(std::ostream& os, const ScenarioSet& set,
                                const MarketConfig& cfg) {
  const auto old_precision = os.precision(9);
  os << "scenario,prob,generator,kind,a,b,c,eta,Q,gammaS,betaS,pS_co2\n";
  for (const auto& s : set) {
    for (std::size_t i = 0; i < s.n_conv(); ++i)
      os << s.index << ',' << s.prob << ',' << cfg.conventional[i].id << ",conventional,"
         << s.a[i] << ',' << s.b[i] << ',' << s.c[i] << ',' << s.eta[i] << ",," << s.gammaS
         << ',' << s.betaS << ',' << s.pS_co2 << '\n';
    for (std::size_t j = 0; j < s.n_res(); ++j)
      os << s.index << ',' << s.prob << ',' << cfg.res[j].id << ",res,,,,," << s.Q[j] << ','
         << s.gammaS << ',' << s.betaS << ',' << s.pS_co2 << '\n';
  }
  os.precision(old_precision);
}

} // namespace etseq
