#pragma once

// INI-style market configuration files.
//
//   [run]            scenarios, seed
//   [demand]         gammaF, betaF, cv_gamma, cv_beta
//   [carbon]         pF_co2, pS_co2_mean, cv_pS
//   [competition]    preset = cournot | perfect | custom; delta, psi (lists)
//   [risk]           phi, alpha
//   [conventional.<id>]  a, b, c, eta, cv_a, cv_b, cv_c, cv_eta,
//                        qF_min, qF_max, epsF_min, epsF_max
//   [res.<id>]       Q_mean, cv_Q, qF_min, qF_max (number or "auto")

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "etseq/model.hpp"

namespace etseq {

/// Three conventional generators and one RES generator.
inline MarketConfig default_config() {
  MarketConfig cfg;
  const char* ids[] = {"g1", "g2", "g3"};
  const double a[] = {35, 45, 50}, b[] = {27, 35, 43}, c[] = {0.015, 0.008, 0.013};
  const double eta[] = {0.67, 0.50, 0.49};
  const double eps_max[] = {20000, 23000, 19000}, q_max[] = {21000, 21000, 25000};
  for (int i = 0; i < 3; ++i) {
    ConventionalGenerator g;
    g.id = ids[i];
    g.a_mean = a[i];
    g.b_mean = b[i];
    g.c_mean = c[i];
    g.eta_mean = eta[i];
    g.cv_a = 0.10;
    g.cv_b = 0.13;
    g.cv_c = 0.15;
    g.cv_eta = 0.05;
    g.qF_max = q_max[i];
    g.epsF_max = eps_max[i];
    cfg.conventional.push_back(g);
  }
  ResGenerator r;
  r.id = "res1";
  r.Q_mean = 5000;
  r.cv_Q = 0.057;
  r.qF_max = 5000;
  r.qF_max_tracks_mean = true;
  cfg.res.push_back(r);
  cfg.demand = {180.0, 0.005, 0.15, 0.057};
  cfg.carbon = {25.0, 25.0, 0.16};
  cfg.set_competition(Competition::cournot);
  cfg.risk = {0.0, 0.9};
  cfg.n_scenarios = 125;
  cfg.seed = 7;
  return cfg;
}

namespace detail {

inline std::vector<double> parse_list(const std::string& text, const std::string& key) {
  std::vector<double> out;
  std::string s = text;
  for (char& ch : s)
    if (ch == ',')
      ch = ' ';
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size())
        throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ModelError("config: '" + key + "' must be a list of numbers");
    }
  }
  return out;
}

inline double get_num(const boost::property_tree::ptree& sec, const std::string& section,
                      const std::string& key, double fallback) {
  const auto v = sec.get_optional<std::string>(key);
  if (!v)
    return fallback;
  try {
    std::size_t used = 0;
    const double x = std::stod(*v, &used);
    if (used != v->size())
      throw std::invalid_argument(*v);
    return x;
  } catch (const std::exception&) {
    throw ModelError("config: [" + section + "] " + key + " = '" + *v + "' is not a number");
  }
}

inline void reject_unknown(const boost::property_tree::ptree& sec, const std::string& section,
                           std::initializer_list<const char*> known) {
  for (const auto& [key, _] : sec) {
    bool ok = false;
    for (const char* k : known)
      ok = ok || key == k;
    if (!ok)
      throw ModelError("config: unknown key '" + key + "' in [" + section + "]");
  }
}

} // namespace detail

/// Parses a configuration; keys missing from the file keep their defaults
/// only for scalar sections. Generators are taken from the file when it
/// declares any.
inline MarketConfig parse_config(std::istream& is) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ModelError(std::string("config: ") + e.what());
  }
  MarketConfig cfg = default_config();
  std::vector<ConventionalGenerator> conv;
  std::vector<ResGenerator> res;
  std::string preset = "cournot";
  std::vector<double> delta, psi;
  bool have_delta = false, have_psi = false;

  for (const auto& [name, sec] : tree) {
    using detail::get_num;
    if (name == "run") {
      detail::reject_unknown(sec, name, {"scenarios", "seed"});
      const double n = get_num(sec, name, "scenarios", static_cast<double>(cfg.n_scenarios));
      const double seed = get_num(sec, name, "seed", static_cast<double>(cfg.seed));
      if (n < 0 || seed < 0)
        throw ModelError("config: [run] scenarios and seed must be nonnegative");
      cfg.n_scenarios = static_cast<std::size_t>(n);
      cfg.seed = static_cast<std::uint64_t>(seed);
    } else if (name == "demand") {
      detail::reject_unknown(sec, name, {"gammaF", "betaF", "cv_gamma", "cv_beta"});
      cfg.demand.gammaF = get_num(sec, name, "gammaF", cfg.demand.gammaF);
      cfg.demand.betaF = get_num(sec, name, "betaF", cfg.demand.betaF);
      cfg.demand.cv_gamma = get_num(sec, name, "cv_gamma", cfg.demand.cv_gamma);
      cfg.demand.cv_beta = get_num(sec, name, "cv_beta", cfg.demand.cv_beta);
    } else if (name == "carbon") {
      detail::reject_unknown(sec, name, {"pF_co2", "pS_co2_mean", "cv_pS"});
      cfg.carbon.pF_co2 = get_num(sec, name, "pF_co2", cfg.carbon.pF_co2);
      cfg.carbon.pS_co2_mean = get_num(sec, name, "pS_co2_mean", cfg.carbon.pS_co2_mean);
      cfg.carbon.cv_pS = get_num(sec, name, "cv_pS", cfg.carbon.cv_pS);
    } else if (name == "competition") {
      detail::reject_unknown(sec, name, {"preset", "delta", "psi"});
      preset = sec.get<std::string>("preset", "cournot");
      if (auto d = sec.get_optional<std::string>("delta")) {
        delta = detail::parse_list(*d, "delta");
        have_delta = true;
      }
      if (auto p = sec.get_optional<std::string>("psi")) {
        psi = detail::parse_list(*p, "psi");
        have_psi = true;
      }
    } else if (name == "risk") {
      detail::reject_unknown(sec, name, {"phi", "alpha"});
      cfg.risk.phi = get_num(sec, name, "phi", cfg.risk.phi);
      cfg.risk.alpha = get_num(sec, name, "alpha", cfg.risk.alpha);
    } else if (name.rfind("conventional.", 0) == 0) {
      detail::reject_unknown(sec, name,
                             {"a", "b", "c", "eta", "cv_a", "cv_b", "cv_c", "cv_eta", "qF_min",
                              "qF_max", "epsF_min", "epsF_max"});
      ConventionalGenerator g;
      g.id = name.substr(13);
      g.a_mean = get_num(sec, name, "a", 0.0);
      g.b_mean = get_num(sec, name, "b", 0.0);
      g.c_mean = get_num(sec, name, "c", 0.0);
      g.eta_mean = get_num(sec, name, "eta", 0.0);
      g.cv_a = get_num(sec, name, "cv_a", 0.0);
      g.cv_b = get_num(sec, name, "cv_b", 0.0);
      g.cv_c = get_num(sec, name, "cv_c", 0.0);
      g.cv_eta = get_num(sec, name, "cv_eta", 0.0);
      g.qF_min = get_num(sec, name, "qF_min", 0.0);
      g.qF_max = get_num(sec, name, "qF_max", 0.0);
      g.epsF_min = get_num(sec, name, "epsF_min", 0.0);
      g.epsF_max = get_num(sec, name, "epsF_max", 0.0);
      conv.push_back(g);
    } else if (name.rfind("res.", 0) == 0) {
      detail::reject_unknown(sec, name, {"Q_mean", "cv_Q", "qF_min", "qF_max"});
      ResGenerator r;
      r.id = name.substr(4);
      r.Q_mean = get_num(sec, name, "Q_mean", 0.0);
      r.cv_Q = get_num(sec, name, "cv_Q", 0.0);
      r.qF_min = get_num(sec, name, "qF_min", 0.0);
      const auto cap = sec.get<std::string>("qF_max", "auto");
      if (cap == "auto") {
        r.qF_max_tracks_mean = true;
        r.qF_max = r.Q_mean;
      } else {
        r.qF_max = get_num(sec, name, "qF_max", 0.0);
      }
      res.push_back(r);
    } else {
      throw ModelError("config: unknown section [" + name + "]");
    }
  }
  if (!conv.empty() || !res.empty()) {
    cfg.conventional = conv;
    cfg.res = res;
  }

  if (preset == "cournot") {
    cfg.set_competition(Competition::cournot);
  } else if (preset == "perfect") {
    cfg.set_competition(Competition::perfect);
  } else if (preset == "custom") {
    cfg.conjecture.kind = Competition::custom;
    cfg.conjecture.delta = have_delta ? delta : std::vector<double>(cfg.n_conv(), 0.0);
    cfg.conjecture.psi = have_psi ? psi : std::vector<double>(cfg.n_gen(), 0.0);
  } else {
    throw ModelError("config: [competition] preset must be cournot, perfect or custom");
  }
  if (preset != "custom" && (have_delta || have_psi))
    throw ModelError("config: delta/psi are only read with preset = custom");
  return cfg;
}

inline MarketConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw ModelError("config: cannot open '" + path + "'");
  return parse_config(in);
}

inline const char* to_string(Competition c) {
  switch (c) {
  case Competition::cournot:
    return "cournot";
  case Competition::perfect:
    return "perfect";
  default:
    return "custom";
  }
}

/// Canonical text form; round-trips through parse_config.
inline std::string write_config(const MarketConfig& cfg) {
  std::ostringstream os;
  os << std::setprecision(17);
  auto list = [&os](const std::vector<double>& v) {
    for (std::size_t k = 0; k < v.size(); ++k)
      os << (k ? ", " : "") << v[k];
  };
  os << "[run]\nscenarios = " << cfg.n_scenarios << "\nseed = " << cfg.seed << "\n\n";
  os << "[demand]\ngammaF = " << cfg.demand.gammaF << "\nbetaF = " << cfg.demand.betaF
     << "\ncv_gamma = " << cfg.demand.cv_gamma << "\ncv_beta = " << cfg.demand.cv_beta << "\n\n";
  os << "[carbon]\npF_co2 = " << cfg.carbon.pF_co2 << "\npS_co2_mean = " << cfg.carbon.pS_co2_mean
     << "\ncv_pS = " << cfg.carbon.cv_pS << "\n\n";
  os << "[competition]\npreset = " << to_string(cfg.conjecture.kind) << '\n';
  if (cfg.conjecture.kind == Competition::custom) {
    os << "delta = ";
    list(cfg.conjecture.delta);
    os << "\npsi = ";
    list(cfg.conjecture.psi);
    os << '\n';
  }
  os << "\n[risk]\nphi = " << cfg.risk.phi << "\nalpha = " << cfg.risk.alpha << "\n";
  for (const auto& g : cfg.conventional)
    os << "\n[conventional." << g.id << "]\na = " << g.a_mean << "\nb = " << g.b_mean
       << "\nc = " << g.c_mean << "\neta = " << g.eta_mean << "\ncv_a = " << g.cv_a
       << "\ncv_b = " << g.cv_b << "\ncv_c = " << g.cv_c << "\ncv_eta = " << g.cv_eta
       << "\nqF_min = " << g.qF_min << "\nqF_max = " << g.qF_max << "\nepsF_min = " << g.epsF_min
       << "\nepsF_max = " << g.epsF_max << '\n';
  for (const auto& r : cfg.res) {
    os << "\n[res." << r.id << "]\nQ_mean = " << r.Q_mean << "\ncv_Q = " << r.cv_Q
       << "\nqF_min = " << r.qF_min << "\nqF_max = ";
    if (r.qF_max_tracks_mean)
      os << "auto";
    else
      os << r.qF_max;
    os << '\n';
  }
  return os.str();
}

/// 64-bit FNV-1a of the canonical form, as 16 hex digits.
inline std::string config_hash(const MarketConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : write_config(cfg)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

} // namespace etseq
