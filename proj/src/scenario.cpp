#include "oid/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace oid {

using nlohmann::json;

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

[[noreturn]] void missing(const std::string& path) {
  throw FormatError("scenario: missing or mistyped field " + path);
}

const json& need(const json& j, const char* key, const std::string& path) {
  auto it = j.find(key);
  if (it == j.end()) missing(path + "." + key);
  return *it;
}

double need_num(const json& j, const char* key, const std::string& path) {
  const json& v = need(j, key, path);
  if (!v.is_number()) missing(path + "." + key);
  return v.get<double>();
}

int need_int(const json& j, const char* key, const std::string& path) {
  const json& v = need(j, key, path);
  if (!v.is_number_integer()) missing(path + "." + key);
  return v.get<int>();
}

std::string need_str(const json& j, const char* key, const std::string& path) {
  const json& v = need(j, key, path);
  if (!v.is_string()) missing(path + "." + key);
  return v.get<std::string>();
}

std::vector<std::vector<double>> need_profile(const json& j, const char* key,
                                              const std::string& path, int houses, int slots) {
  const json& v = need(j, key, path);
  if (!v.is_array() || static_cast<int>(v.size()) != houses)
    throw FormatError("scenario: " + path + "." + key + " must be an array with one row per house");
  std::vector<std::vector<double>> out(houses);
  for (int h = 0; h < houses; ++h) {
    const json& row = v[h];
    if (!row.is_array() || static_cast<int>(row.size()) != slots)
      throw FormatError("scenario: " + path + "." + key + "[" + std::to_string(h) +
                        "] must have one value per slot");
    out[h].reserve(slots);
    for (const auto& x : row) {
      if (!x.is_number()) missing(path + "." + key + " entry");
      out[h].push_back(x.get<double>());
    }
  }
  return out;
}

void validate(const Scenario& s) {
  const int n = s.node_count();
  if (n < 2) throw ModelError("scenario needs at least two nodes");
  if (s.v_base_volts <= 0 || s.s_base_va <= 0) throw ModelError("bases must be positive");
  if (!(s.vmin_pu > 0) || !(s.vmin_pu < s.vmax_pu))
    throw ModelError("voltage limits need 0 < vmin < vmax");
  if (s.roles[0] != "slack") throw ModelError("node 0 must have role slack");
  for (int i = 1; i < n; ++i)
    if (s.roles[i] != "pole" && s.roles[i] != "house")
      throw ModelError("node " + std::to_string(i) + " role must be pole or house");
  if (static_cast<int>(s.lines.size()) != n - 1)
    throw ModelError("a radial feeder on n nodes has exactly n-1 lines");
  for (const auto& l : s.lines) {
    if (l.from < 0 || l.from >= n || l.to < 0 || l.to >= n || l.from == l.to)
      throw ModelError("line endpoints out of range");
    if (l.length_m <= 0) throw ModelError("line length must be positive");
    if (l.r_ohm_per_km < 0 || l.x_ohm_per_km < 0) throw ModelError("line impedance must be nonnegative");
    if (l.r_ohm_per_km == 0 && l.x_ohm_per_km == 0) throw ModelError("line impedance must be nonzero");
  }
  int prev = 0;
  int house_roles = 0;
  for (int i = 0; i < n; ++i) house_roles += (s.roles[i] == "house");
  if (house_roles != s.house_count())
    throw ModelError("houses array does not match nodes with role house");
  for (const auto& h : s.houses) {
    if (h.node <= prev) throw ModelError("houses must be listed in ascending node order");
    prev = h.node;
    if (h.node >= n || s.roles[h.node] != "house")
      throw ModelError("house entry refers to a non-house node");
    if (h.dc_rating_kw < 0) throw ModelError("dc rating must be nonnegative");
    if (!(h.derating > 0) || h.derating > 1) throw ModelError("derating must be in (0,1]");
    if (h.oversize_fraction < 0) throw ModelError("oversize fraction must be nonnegative");
    if (!(h.min_power_factor > 0) || h.min_power_factor > 1)
      throw ModelError("min power factor must be in (0,1]");
    if (!(h.load_power_factor > 0) || h.load_power_factor > 1)
      throw ModelError("load power factor must be in (0,1]");
  }
  if (s.n_slots < 1) throw ModelError("scenario needs at least one slot");
  const auto check_prof = [&](const std::vector<std::vector<double>>& p, const char* what) {
    if (static_cast<int>(p.size()) != s.house_count())
      throw ModelError(std::string(what) + " profile must have one row per house");
    for (const auto& row : p) {
      if (static_cast<int>(row.size()) != s.n_slots)
        throw ModelError(std::string(what) + " profile row length must equal slots");
      for (double v : row)
        if (v < 0) throw ModelError(std::string(what) + " profile values must be nonnegative");
    }
  };
  check_prof(s.p_av_kw, "p_av");
  check_prof(s.p_load_kw, "p_load");
  if (static_cast<int>(s.cost.a.size()) != s.house_count() ||
      static_cast<int>(s.cost.b.size()) != s.house_count())
    throw ModelError("cost coefficient arrays must have one entry per house");
  for (double a : s.cost.a)
    if (a < 0) throw ModelError("quadratic cost coefficients must be nonnegative");
  if (s.cost.loss_weight < 0 || s.cost.lambda < 0)
    throw ModelError("cost weights must be nonnegative");
  if (!(s.admm.kappa > 0)) throw ModelError("kappa must be positive");
  if (!(s.admm.epsilon > 0)) throw ModelError("epsilon must be positive");
  if (s.admm.max_iters < 1) throw ModelError("max_iters must be positive");
  if (s.clusters) {
    for (const auto& c : *s.clusters)
      for (int id : c)
        if (id < 0 || id >= n) throw ModelError("cluster node id out of range");
  }
  if (s.generator && s.generator->sigma_w < 0) throw ModelError("sigma_w must be nonnegative");
}

json to_json(const Scenario& s) {
  json j;
  j["schema_version"] = s.schema_version;
  j["name"] = s.name;
  j["base"] = {{"v_volts", s.v_base_volts}, {"s_va", s.s_base_va}};
  j["limits"] = {{"vmin_pu", s.vmin_pu}, {"vmax_pu", s.vmax_pu}};
  json nodes = json::array();
  for (int i = 0; i < s.node_count(); ++i)
    nodes.push_back({{"id", i}, {"role", s.roles[i]}});
  j["nodes"] = std::move(nodes);
  json lines = json::array();
  for (const auto& l : s.lines)
    lines.push_back({{"from", l.from},
                     {"to", l.to},
                     {"r_ohm_per_km", l.r_ohm_per_km},
                     {"x_ohm_per_km", l.x_ohm_per_km},
                     {"length_m", l.length_m},
                     {"b_shunt_s", l.b_shunt_s}});
  j["lines"] = std::move(lines);
  json houses = json::array();
  for (const auto& h : s.houses)
    houses.push_back({{"node", h.node},
                      {"dc_rating_kw", h.dc_rating_kw},
                      {"derating", h.derating},
                      {"oversize_fraction", h.oversize_fraction},
                      {"min_power_factor", h.min_power_factor},
                      {"load_power_factor", h.load_power_factor}});
  j["houses"] = std::move(houses);
  j["cost"] = {{"loss_weight", s.cost.loss_weight},
               {"lambda", s.cost.lambda},
               {"a", s.cost.a},
               {"b", s.cost.b}};
  j["admm"] = {{"kappa", s.admm.kappa},
               {"epsilon", s.admm.epsilon},
               {"max_iters", s.admm.max_iters}};
  j["slots"] = s.n_slots;
  j["profiles"] = {{"p_av_kw", s.p_av_kw}, {"p_load_kw", s.p_load_kw}};
  if (s.generator) {
    const auto& g = *s.generator;
    j["generator"] = {{"seed", g.seed},
                      {"sigma_w", g.sigma_w},
                      {"sunrise_hour", g.sunrise_hour},
                      {"sunset_hour", g.sunset_hour},
                      {"peak_hour", g.peak_hour}};
  }
  if (s.clusters) j["clusters"] = *s.clusters;
  return j;
}

Scenario from_json(const json& j) {
  Scenario s;
  s.schema_version = need_int(j, "schema_version", "");
  if (s.schema_version != 1) throw FormatError("scenario: unsupported schema_version");
  s.name = need_str(j, "name", "");
  const json& base = need(j, "base", "");
  s.v_base_volts = need_num(base, "v_volts", "base");
  s.s_base_va = need_num(base, "s_va", "base");
  const json& lim = need(j, "limits", "");
  s.vmin_pu = need_num(lim, "vmin_pu", "limits");
  s.vmax_pu = need_num(lim, "vmax_pu", "limits");

  const json& nodes = need(j, "nodes", "");
  if (!nodes.is_array() || nodes.empty()) missing("nodes");
  s.roles.resize(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::string p = "nodes[" + std::to_string(i) + "]";
    const int id = need_int(nodes[i], "id", p);
    if (id != static_cast<int>(i))
      throw FormatError("scenario: " + p + ".id must equal its index");
    s.roles[i] = need_str(nodes[i], "role", p);
  }
  const json& lines = need(j, "lines", "");
  if (!lines.is_array()) missing("lines");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string p = "lines[" + std::to_string(i) + "]";
    ScenarioLine l;
    l.from = need_int(lines[i], "from", p);
    l.to = need_int(lines[i], "to", p);
    l.r_ohm_per_km = need_num(lines[i], "r_ohm_per_km", p);
    l.x_ohm_per_km = need_num(lines[i], "x_ohm_per_km", p);
    l.length_m = need_num(lines[i], "length_m", p);
    l.b_shunt_s = lines[i].value("b_shunt_s", 0.0);
    s.lines.push_back(l);
  }
  const json& houses = need(j, "houses", "");
  if (!houses.is_array()) missing("houses");
  for (std::size_t i = 0; i < houses.size(); ++i) {
    const std::string p = "houses[" + std::to_string(i) + "]";
    ScenarioHouse h;
    h.node = need_int(houses[i], "node", p);
    h.dc_rating_kw = need_num(houses[i], "dc_rating_kw", p);
    h.derating = need_num(houses[i], "derating", p);
    h.oversize_fraction = need_num(houses[i], "oversize_fraction", p);
    h.min_power_factor = need_num(houses[i], "min_power_factor", p);
    h.load_power_factor = need_num(houses[i], "load_power_factor", p);
    s.houses.push_back(h);
  }
  const json& cost = need(j, "cost", "");
  s.cost.loss_weight = need_num(cost, "loss_weight", "cost");
  s.cost.lambda = need_num(cost, "lambda", "cost");
  const json& ca = need(cost, "a", "cost");
  const json& cb = need(cost, "b", "cost");
  if (!ca.is_array() || !cb.is_array()) missing("cost.a / cost.b");
  s.cost.a = ca.get<std::vector<double>>();
  s.cost.b = cb.get<std::vector<double>>();
  const json& admm = need(j, "admm", "");
  s.admm.kappa = need_num(admm, "kappa", "admm");
  s.admm.epsilon = need_num(admm, "epsilon", "admm");
  s.admm.max_iters = need_int(admm, "max_iters", "admm");
  s.n_slots = need_int(j, "slots", "");
  const json& prof = need(j, "profiles", "");
  s.p_av_kw = need_profile(prof, "p_av_kw", "profiles", static_cast<int>(s.houses.size()), s.n_slots);
  s.p_load_kw =
      need_profile(prof, "p_load_kw", "profiles", static_cast<int>(s.houses.size()), s.n_slots);
  if (auto it = j.find("generator"); it != j.end()) {
    GeneratorSpec g;
    g.seed = need(*it, "seed", "generator").get<std::uint64_t>();
    g.sigma_w = need_num(*it, "sigma_w", "generator");
    g.sunrise_hour = need_num(*it, "sunrise_hour", "generator");
    g.sunset_hour = need_num(*it, "sunset_hour", "generator");
    g.peak_hour = need_num(*it, "peak_hour", "generator");
    s.generator = g;
  }
  if (auto it = j.find("clusters"); it != j.end()) {
    if (!it->is_array()) missing("clusters");
    s.clusters = it->get<std::vector<std::vector<int>>>();
  }
  validate(s);
  return s;
}

}  // namespace

Scenario parse_scenario(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("scenario: invalid JSON: ") + e.what());
  }
  try {
    return from_json(j);
  } catch (const json::exception& e) {
    throw FormatError(std::string("scenario: ") + e.what());
  }
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("scenario: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

std::string scenario_to_text(const Scenario& s) {
  validate(s);
  return to_json(s).dump(2) + "\n";
}

void save_scenario(const Scenario& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("scenario: cannot write " + path);
  out << scenario_to_text(s);
}

std::string scenario_hash(const Scenario& s) {
  const std::string canon = to_json(s).dump();
  const std::uint64_t h = fnv1a64(canon.data(), canon.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double clear_sky_shape(double hour, const GeneratorSpec& g) {
  if (hour <= g.sunrise_hour || hour >= g.sunset_hour) return 0.0;
  const double span = hour < g.peak_hour ? g.peak_hour - g.sunrise_hour
                                         : g.sunset_hour - g.peak_hour;
  const double u = (hour - g.peak_hour) / span;
  return 0.5 * (1.0 + std::cos(M_PI * u));
}

std::vector<double> default_base_load_kw(int n_slots) {
  std::vector<double> out(n_slots);
  for (int t = 0; t < n_slots; ++t) {
    const double h = static_cast<double>(t);
    const double morning = 0.35 * std::exp(-0.5 * std::pow((h - 8.0) / 2.0, 2));
    const double evening = 0.75 * std::exp(-0.5 * std::pow((h - 19.0) / 2.5, 2));
    out[t] = 0.9 + morning + evening;
  }
  return out;
}

void generate_profiles(Scenario& s, const GeneratorSpec& g,
                       const std::vector<double>& base_load_kw) {
  if (static_cast<int>(base_load_kw.size()) != s.n_slots)
    throw ModelError("base load curve must have one value per slot");
  if (g.sigma_w < 0) throw ModelError("sigma_w must be nonnegative");
  std::mt19937_64 rng(g.seed);
  std::normal_distribution<double> noise(0.0, g.sigma_w);
  const int nh = s.house_count();
  s.p_av_kw.assign(nh, std::vector<double>(s.n_slots, 0.0));
  s.p_load_kw.assign(nh, std::vector<double>(s.n_slots, 0.0));
  for (int h = 0; h < nh; ++h) {
    const auto& hs = s.houses[h];
    for (int t = 0; t < s.n_slots; ++t) {
      const double w = g.sigma_w > 0 ? noise(rng) : 0.0;
      s.p_load_kw[h][t] = std::max(0.0, base_load_kw[t] + w / 1000.0);
      s.p_av_kw[h][t] = hs.dc_rating_kw * hs.derating * clear_sky_shape(static_cast<double>(t), g);
    }
  }
  s.generator = g;
}

TimeSlice time_slice(const Scenario& s, int slot) {
  if (slot < 0 || slot >= s.n_slots) throw ModelError("slot index out of range");
  TimeSlice ts;
  const int nh = s.house_count();
  ts.p_av.resize(nh);
  ts.p_load.resize(nh);
  ts.q_load.resize(nh);
  const double to_pu = 1000.0 / s.s_base_va;
  for (int h = 0; h < nh; ++h) {
    const auto& hs = s.houses[h];
    ts.p_av[h] = s.p_av_kw[h][slot] * to_pu;
    ts.p_load[h] = s.p_load_kw[h][slot] * to_pu;
    ts.q_load[h] = ts.p_load[h] * std::tan(std::acos(hs.load_power_factor));
  }
  return ts;
}

FeederModel make_feeder(const Scenario& s, int slot) {
  validate(s);
  const TimeSlice ts = time_slice(s, slot);
  const double z_base = s.v_base_volts * s.v_base_volts / s.s_base_va;
  std::vector<Node> nodes;
  nodes.reserve(s.node_count());
  int hidx = 0;
  for (int i = 0; i < s.node_count(); ++i) {
    Node nd;
    nd.id = i;
    if (s.roles[i] == "slack") {
      nd.role = NodeRole::Slack;
    } else if (s.roles[i] == "pole") {
      nd.role = NodeRole::Pole;
    } else {
      nd.role = NodeRole::House;
      const auto& hs = s.houses[hidx];
      if (hs.node != i) throw ModelError("house list out of sync with roles");
      HousePayload p;
      p.inverter.S = (1.0 + hs.oversize_fraction) * hs.dc_rating_kw * hs.derating * 1000.0 /
                     s.s_base_va;
      p.inverter.P_av = ts.p_av[hidx];
      p.inverter.theta = std::acos(hs.min_power_factor);
      p.load.P_load = ts.p_load[hidx];
      p.load.Q_load = ts.q_load[hidx];
      nd.house = p;
      ++hidx;
    }
    nodes.push_back(std::move(nd));
  }
  std::vector<Line> lines;
  lines.reserve(s.lines.size());
  for (const auto& l : s.lines) {
    const cplx z_ohm = cplx(l.r_ohm_per_km, l.x_ohm_per_km) * (l.length_m / 1000.0);
    Line ln;
    ln.m = l.from;
    ln.n = l.to;
    ln.y_series = z_base / z_ohm;
    ln.y_shunt = cplx(0.0, l.b_shunt_s * z_base);
    lines.push_back(ln);
  }
  return FeederModel(std::move(nodes), std::move(lines));
}

void write_profiles_csv(const Scenario& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << "slot,house,p_av_kw,p_load_kw,q_load_kvar\n";
  char buf[160];
  for (int t = 0; t < s.n_slots; ++t)
    for (int h = 0; h < s.house_count(); ++h) {
      const auto& hs = s.houses[h];
      const double q = s.p_load_kw[h][t] * std::tan(std::acos(hs.load_power_factor));
      std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g\n", t, hs.node, s.p_av_kw[h][t],
                    s.p_load_kw[h][t], q);
      out << buf;
    }
}

Scenario bundled_scenario() {
  Scenario s;
  s.name = "feeder19";
  s.roles.assign(19, "house");
  s.roles[0] = "slack";
  for (int pole : {2, 5, 8, 11, 14, 17}) s.roles[pole] = "pole";

  const auto line = [](int from, int to, double len_m) {
    ScenarioLine l;
    l.from = from;
    l.to = to;
    l.r_ohm_per_km = 0.55;
    l.x_ohm_per_km = 0.35;
    l.length_m = len_m;
    return l;
  };
  for (int k = 0; k < 6; ++k) s.lines.push_back(line(k == 0 ? 0 : 3 * k - 1, 3 * k + 2, 50.0));
  const int pole_of[12] = {2, 2, 5, 5, 8, 8, 11, 11, 14, 14, 17, 17};
  const int house_node[12] = {1, 3, 4, 6, 7, 9, 10, 12, 13, 15, 16, 18};
  const double dc[12] = {5.52, 5.70, 8.00, 8.00, 8.00, 5.70, 8.00, 5.70, 5.52, 5.52, 5.70, 8.00};
  for (int k = 0; k < 12; ++k) s.lines.push_back(line(pole_of[k], house_node[k], 20.0));
  for (int k = 0; k < 12; ++k) {
    ScenarioHouse h;
    h.node = house_node[k];
    h.dc_rating_kw = dc[k];
    h.derating = 0.77;
    s.houses.push_back(h);
  }
  std::sort(s.houses.begin(), s.houses.end(),
            [](const ScenarioHouse& a, const ScenarioHouse& b) { return a.node < b.node; });
  std::sort(s.lines.begin(), s.lines.end(), [](const ScenarioLine& a, const ScenarioLine& b) {
    return a.from != b.from ? a.from < b.from : a.to < b.to;
  });
  s.cost.lambda = 0.8;
  s.cost.a.assign(12, 0.0);
  s.cost.b.assign(12, 0.1);
  s.clusters = {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, {10, 11, 12, 13, 14, 15, 16, 17, 18}};
  generate_profiles(s, GeneratorSpec{}, default_base_load_kw(s.n_slots));
  return s;
}

}  // namespace oid
