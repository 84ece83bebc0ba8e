#pragma once

// Result files: CSV tables with 9 significant digits and JSON documents.
// Every file carries the hash of the configuration that produced it.

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "etseq/config_io.hpp"
#include "etseq/equilibrium.hpp"
#include "etseq/sensitivity.hpp"

namespace etseq {

inline std::string fmt9(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

namespace detail {
inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos)
    return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"')
      out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + '"';
}

inline std::vector<std::string> generator_ids(const MarketConfig& cfg) {
  std::vector<std::string> ids;
  for (const auto& g : cfg.conventional)
    ids.push_back(g.id);
  for (const auto& r : cfg.res)
    ids.push_back(r.id);
  return ids;
}
} // namespace detail

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows,
                            const MarketConfig& cfg, SweepParameter param) {
  const auto ids = detail::generator_ids(cfg);
  const std::size_t I = cfg.n_conv();
  os << "config_hash," << to_string(param)
     << ",status,residual,kkt_residual,feasibility,pF,pS,pS_spot_only,conv_qF,conv_qS,"
        "conv_total,res_qF,res_qS,res_total,conv_profit,conv_cvar,res_profit,res_cvar,"
        "emissions,emissions_pooled,spot_only_conv_q,spot_only_res_q,spot_only_emissions";
  for (std::size_t k = 0; k < ids.size(); ++k) {
    os << ",qF_" << ids[k] << ",qS_" << ids[k] << ",profit_" << ids[k] << ",cvar_" << ids[k];
    if (k < I)
      os << ",epsF_" << ids[k] << ",epsS_" << ids[k];
  }
  os << ",error\n";
  const std::string hash = config_hash(cfg);
  for (const auto& r : rows) {
    os << hash << ',' << fmt9(r.value) << ',' << (r.solved ? to_string(r.status) : "skipped");
    for (double v : {r.residual, r.kkt_residual, r.feasibility, r.pF, r.pS, r.pS_spot_only,
                     r.conv_qF, r.conv_qS, r.conv_total, r.res_qF, r.res_qS, r.res_total,
                     r.conv_profit, r.conv_cvar, r.res_profit, r.res_cvar, r.emissions,
                     r.emissions_pooled, r.spot_only_conv_q, r.spot_only_res_q, r.spot_only_emissions})
      os << ',' << fmt9(v);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto at = [](const std::vector<double>& v, std::size_t i) {
        return i < v.size() ? fmt9(v[i]) : std::string();
      };
      os << ',' << at(r.qF, k) << ',' << at(r.qS, k) << ',' << at(r.profit, k) << ','
         << at(r.cvar, k);
      if (k < I)
        os << ',' << at(r.epsF, k) << ',' << at(r.epsS, k);
    }
    os << ',' << detail::csv_escape(r.error) << '\n';
  }
}

inline void write_stability_csv(std::ostream& os, const StabilityTable& t,
                                const MarketConfig& cfg) {
  const auto ids = detail::generator_ids(cfg);
  os << "config_hash,scenarios,status,residual,kkt_residual,pF,pS,pS_spot_only,emissions";
  for (const auto& id : ids)
    os << ",profit_" << id;
  os << ",spread_pF,spread_pS,error\n";
  const std::string hash = config_hash(cfg);
  for (const auto& row : t.rows) {
    const auto& r = row.outcome;
    os << hash << ',' << row.n_scenarios << ',' << (r.error.empty() ? to_string(r.status) : "error");
    for (double v : {r.residual, r.kkt_residual, r.pF, r.pS, r.pS_spot_only, r.emissions})
      os << ',' << fmt9(v);
    for (std::size_t k = 0; k < ids.size(); ++k)
      os << ',' << (k < r.profit.size() ? fmt9(r.profit[k]) : std::string());
    os << ',' << fmt9(t.spread_pF) << ',' << fmt9(t.spread_pS) << ','
       << detail::csv_escape(r.error) << '\n';
  }
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace,
                            const std::string& hash) {
  os << "config_hash,phase,iteration,residual,step\n";
  for (const auto& t : trace)
    os << hash << ',' << t.phase << ',' << t.iteration << ',' << fmt9(t.residual) << ','
       << fmt9(t.step) << '\n';
}

/// Per-generator table of one equilibrium.
inline void write_solution_csv(std::ostream& os, const EquilibriumSolution& sol,
                               const MarketConfig& cfg, const ScenarioSet& set) {
  const auto ids = detail::generator_ids(cfg);
  const auto row = summarize_equilibrium(sol, set);
  const std::size_t I = cfg.n_conv();
  os << "config_hash,generator,kind,qF,qS,epsF,epsS,expected_profit,cvar,var,objective,pF,pS,"
        "eps_flat\n";
  const std::string hash = config_hash(cfg);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const bool conv = k < I;
    os << hash << ',' << ids[k] << ',' << (conv ? "conventional" : "res") << ','
       << fmt9(row.qF[k]) << ',' << fmt9(row.qS[k]) << ',' << (conv ? fmt9(row.epsF[k]) : "")
       << ',' << (conv ? fmt9(row.epsS[k]) : "") << ',' << fmt9(sol.panel.expected[k]) << ','
       << fmt9(sol.panel.cvar[k]) << ',' << fmt9(sol.panel.var[k]) << ','
       << fmt9(sol.objective[k]) << ',' << fmt9(row.pF) << ',' << fmt9(row.pS) << ','
       << (conv && sol.eps_flat[k] ? "1" : "0") << '\n';
  }
}

/// Full equilibrium document, including per-scenario spot outcomes.
inline nlohmann::ordered_json solution_json(const EquilibriumSolution& sol,
                                            const MarketConfig& cfg, const ScenarioSet& set) {
  using nlohmann::ordered_json;
  const auto ids = detail::generator_ids(cfg);
  const std::size_t I = cfg.n_conv();
  ordered_json j;
  j["config_hash"] = config_hash(cfg);
  j["status"] = to_string(sol.status);
  j["risk"] = {{"phi", sol.risk_phi}, {"alpha", sol.risk_alpha},
               {"path", sol.risk_averse_path ? "cvar" : "risk_neutral"}};
  j["certificate"] = {{"residual", sol.residual},
                      {"kkt_residual", sol.kkt_residual},
                      {"feasibility", sol.feasibility},
                      {"profit_scale", sol.profit_scale},
                      {"gradient_scale", sol.gradient_scale},
                      {"tol_comp", sol.tol_comp},
                      {"tol_stat", sol.tol_stat},
                      {"sweeps", sol.sweeps},
                      {"newton_steps", sol.newton_steps}};
  j["pF"] = sol.fd.pF;
  ordered_json gens = ordered_json::array();
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& du = sol.duals[k];
    ordered_json g = {{"id", ids[k]},
                      {"kind", k < I ? "conventional" : "res"},
                      {"qF", sol.fd.qF[k]},
                      {"expected_profit", sol.panel.expected[k]},
                      {"cvar", sol.panel.cvar[k]},
                      {"var", sol.panel.var[k]},
                      {"objective", sol.objective[k]},
                      {"xi", du.xi},
                      {"nu_min", du.nu_min},
                      {"nu_max", du.nu_max}};
    if (k < I) {
      g["epsF"] = sol.fd.epsF[k];
      g["eps_flat"] = static_cast<bool>(sol.eps_flat[k]);
      g["lambda_min"] = du.lambda_min;
      g["lambda_max"] = du.lambda_max;
    }
    gens.push_back(std::move(g));
  }
  j["generators"] = std::move(gens);
  ordered_json scen = ordered_json::array();
  for (std::size_t w = 0; w < sol.spot.size(); ++w) {
    const auto& sp = sol.spot[w];
    ordered_json profits = ordered_json::array();
    for (std::size_t k = 0; k < ids.size(); ++k)
      profits.push_back(sol.panel.profit[k][w]);
    scen.push_back({{"index", set[w].index},
                    {"prob", set[w].prob},
                    {"pS", sp.pS},
                    {"qS_conv", sp.qS_conv},
                    {"qS_res", sp.qS_res},
                    {"epsS", sp.epsS},
                    {"profit", profits}});
  }
  j["scenarios"] = std::move(scen);
  return j;
}

} // namespace etseq
