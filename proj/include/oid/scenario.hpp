#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oid/feeder.hpp"

namespace oid {

// Synthetic profile generator settings. The irradiance shape is a raised
// cosine between sunrise and sunset peaking at `peak_hour`; loads are a
// shared base curve perturbed per house and slot by N(0, sigma_w^2) watts,
// clipped at zero.
struct GeneratorSpec {
  std::uint64_t seed = 1;
  double sigma_w = 200.0;
  double sunrise_hour = 6.0;
  double sunset_hour = 20.0;
  double peak_hour = 13.0;
};

struct ScenarioLine {
  int from = 0;
  int to = 0;
  double r_ohm_per_km = 0.0;
  double x_ohm_per_km = 0.0;
  double length_m = 0.0;
  double b_shunt_s = 0.0;  // total shunt susceptance at each end, siemens
};

struct ScenarioHouse {
  int node = 0;
  double dc_rating_kw = 0.0;
  double derating = 1.0;           // ac output fraction of dc rating
  double oversize_fraction = 0.1;  // inverter kVA margin over peak ac power
  double min_power_factor = 0.85;
  double load_power_factor = 0.9;
};

struct AdmmSettings {
  double kappa = 1.0;
  double epsilon = 1e-6;  // threshold on the squared consensus residual
  int max_iters = 2000;
};

struct CostSettings {
  double loss_weight = 1.0;
  double lambda = 0.0;
  std::vector<double> a;  // per house, curtailment cost a P^2 + b P
  std::vector<double> b;
};

// Full scenario: feeder geometry in physical units plus per-slot profiles.
// Profiles are stored materialized (kW per house per slot); `generator`
// records how bundled data was produced and drives regeneration.
struct Scenario {
  int schema_version = 1;
  std::string name;
  double v_base_volts = 240.0;
  double s_base_va = 10000.0;
  double vmin_pu = 0.917;
  double vmax_pu = 1.042;
  std::vector<std::string> roles;  // per node id: "slack" | "pole" | "house"
  std::vector<ScenarioLine> lines;
  std::vector<ScenarioHouse> houses;  // ascending node id
  int n_slots = 24;
  std::vector<std::vector<double>> p_av_kw;    // [house][slot]
  std::vector<std::vector<double>> p_load_kw;  // [house][slot]
  CostSettings cost;
  AdmmSettings admm;
  std::optional<GeneratorSpec> generator;
  std::optional<std::vector<std::vector<int>>> clusters;

  int node_count() const { return static_cast<int>(roles.size()); }
  int house_count() const { return static_cast<int>(houses.size()); }
};

// Per-slot view in per-unit. Vectors are indexed like Scenario::houses.
struct TimeSlice {
  std::vector<double> p_av;
  std::vector<double> p_load;
  std::vector<double> q_load;
};

// Loading / saving. load_scenario throws FormatError naming the offending
// field on schema violations and ModelError on invariant breaches; the
// save/load pair round-trips field-exactly.
Scenario load_scenario(const std::string& path);
Scenario parse_scenario(const std::string& json_text);
std::string scenario_to_text(const Scenario& s);
void save_scenario(const Scenario& s, const std::string& path);

// FNV-1a over the canonical serialized form (sorted keys), hex string.
std::string scenario_hash(const Scenario& s);

// Irradiance shape in [0,1] at an hour of day (0 outside daylight).
double clear_sky_shape(double hour, const GeneratorSpec& g);

// Shared evening-peaking base load in kW, one value per slot.
std::vector<double> default_base_load_kw(int n_slots);

// Fills p_av_kw / p_load_kw for every house from the generator settings
// and records them in s.generator. Deterministic given the seed.
void generate_profiles(Scenario& s, const GeneratorSpec& g,
                       const std::vector<double>& base_load_kw);

TimeSlice time_slice(const Scenario& s, int slot);

// Realizes one slot as a solver-ready model: admittances in per-unit,
// inverter limits S = (1 + oversize) * derating * dc rating.
FeederModel make_feeder(const Scenario& s, int slot);

// CSV dump, header: slot,house,p_av_kw,p_load_kw,q_load_kvar.
void write_profiles_csv(const Scenario& s, const std::string& path);

// The bundled 19-node feeder (6-pole backbone, 12 houses, 2 clusters),
// identical to scenarios/feeder19.json in-repo.
Scenario bundled_scenario();

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 1469598103934665603ull);

}  // namespace oid
