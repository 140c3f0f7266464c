// Workbench front end: validate scenarios, run the central or decentralized
// dispatchers, sweep the sparsity weight, and replay message logs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oid/harness.hpp"
#include "oid/logging.hpp"
#include "oid/parallel.hpp"

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitNotConverged = 2;
constexpr int kExitUsage = 64;

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double round9(double v) { return std::stod(fmt9(v)); }

struct CommonOpts {
  std::string scenario_path;
  std::optional<double> lambda, kappa, eps;
  std::optional<int> max_iters;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
};

void add_overrides(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--scenario", o.scenario_path, "scenario file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--lambda", o.lambda, "override the sparsity weight");
  cmd->add_option("--kappa", o.kappa, "override the consensus weight");
  cmd->add_option("--eps", o.eps, "override the termination threshold");
  cmd->add_option("--max-iters", o.max_iters, "override the iteration cap");
  cmd->add_option("--seed", o.seed, "regenerate profiles with this seed");
  cmd->add_option("--out", o.out_dir, "output directory");
}

oid::Scenario load_with_overrides(const CommonOpts& o) {
  oid::Scenario s = oid::load_scenario(o.scenario_path);
  if (o.seed) {
    oid::GeneratorSpec g = s.generator.value_or(oid::GeneratorSpec{});
    g.seed = *o.seed;
    oid::generate_profiles(s, g, oid::default_base_load_kw(s.n_slots));
  }
  if (o.lambda) s.cost.lambda = *o.lambda;
  if (o.kappa) s.admm.kappa = *o.kappa;
  if (o.eps) s.admm.epsilon = *o.eps;
  if (o.max_iters) s.admm.max_iters = *o.max_iters;
  return s;
}

std::optional<std::vector<std::vector<int>>> load_partition(const std::string& path) {
  if (path.empty()) return std::nullopt;
  std::ifstream in(path);
  if (!in) throw oid::FormatError("cannot open partition file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw oid::FormatError(std::string("partition file: ") + e.what());
  }
  if (!j.is_array()) throw oid::FormatError("partition file must hold an array of node lists");
  std::vector<std::vector<int>> part;
  for (const auto& c : j) {
    if (!c.is_array()) throw oid::FormatError("partition file must hold an array of node lists");
    part.emplace_back();
    for (const auto& v : c) part.back().push_back(v.get<int>());
  }
  return part;
}

double voltage_mag_at(const oid::DispatchResult& d, int node) {
  if (d.v.size() > static_cast<Eigen::Index>(node)) return std::abs(d.v(node));
  if (d.V.rows() > static_cast<Eigen::Index>(node))
    return std::sqrt(std::max(0.0, d.V(node, node).real()));
  return std::numeric_limits<double>::quiet_NaN();
}

// one run per requested slot; slots execute concurrently
struct SlotRun {
  int slot = 0;
  oid::SimulationResult sim;
};

json summarize_slot(const oid::Scenario& s, const SlotRun& r) {
  const oid::FeederModel f = oid::make_feeder(s, r.slot);
  const auto& d = r.sim.dispatch;
  json out;
  out["slot"] = r.slot;
  out["iterations"] = d.iterations;
  out["converged"] = d.converged;
  out["residual"] = round9(d.residual);
  out["objective"] = round9(d.objective);
  out["loss"] = round9(d.loss_term);
  out["regularizer"] = round9(d.regularizer_term);
  out["customer_cost"] = round9(d.customer_term);
  out["rank_ratio"] = round9(d.rank_tightness);
  out["dispatched"] = oid::count_dispatched(d, 1e-4);
  json sp = json::array();
  for (std::size_t k = 0; k < d.setpoints.size(); ++k) {
    sp.push_back({{"house", f.houses()[k]},
                  {"p_c", round9(d.setpoints[k].P_c)},
                  {"q_c", round9(d.setpoints[k].Q_c)},
                  {"v_mag", round9(voltage_mag_at(d, f.houses()[k]))}});
  }
  out["setpoints"] = std::move(sp);
  return out;
}

void write_dispatch_csv(const oid::Scenario& s, const std::vector<SlotRun>& runs,
                        const std::string& path) {
  std::ofstream out(path);
  if (!out) throw oid::FormatError("cannot write " + path);
  out << "slot,house,p_c,q_c,v_mag\n";
  for (const auto& r : runs) {
    const oid::FeederModel f = oid::make_feeder(s, r.slot);
    const auto& d = r.sim.dispatch;
    for (std::size_t k = 0; k < d.setpoints.size(); ++k)
      out << r.slot << ',' << f.houses()[k] << ',' << fmt9(d.setpoints[k].P_c) << ','
          << fmt9(d.setpoints[k].Q_c) << ','
          << fmt9(voltage_mag_at(d, f.houses()[k])) << '\n';
  }
}

void write_convergence_csv(const oid::Scenario& s, const std::vector<SlotRun>& runs,
                           const std::optional<std::vector<std::vector<int>>>& partition,
                           const std::string& path) {
  std::ofstream out(path);
  if (!out) throw oid::FormatError("cannot write " + path);
  out << "slot,iteration,id,error\n";
  std::vector<std::pair<int, int>> border_nodes;
  if (partition) {
    const oid::FeederModel f = oid::make_feeder(s, runs.front().slot);
    const auto part = oid::validate_partition(f, *partition);
    for (const auto& e : part.borders) border_nodes.emplace_back(e.m, e.n);
  }
  for (const auto& r : runs) {
    const oid::FeederModel f = oid::make_feeder(s, r.slot);
    for (const auto& rec : r.sim.history) {
      for (std::size_t k = 0; k < rec.p_err.size(); ++k) {
        out << r.slot << ',' << rec.iteration << ",p" << f.houses()[k] << ','
            << fmt9(rec.p_err[k]) << '\n';
        out << r.slot << ',' << rec.iteration << ",q" << f.houses()[k] << ','
            << fmt9(rec.q_err[k]) << '\n';
      }
      for (std::size_t e = 0; e < rec.border_err.size(); ++e) {
        out << r.slot << ',' << rec.iteration << ",b" << border_nodes[e].first << '-'
            << border_nodes[e].second << ',' << fmt9(rec.border_err[e]) << '\n';
      }
    }
  }
}

// compares against a previous run's summary left in the same directory
json cross_check(const json& mine, const std::string& summary_path) {
  std::ifstream in(summary_path);
  if (!in) return nullptr;
  json prev;
  try {
    in >> prev;
  } catch (const json::exception&) {
    return nullptr;
  }
  if (!prev.contains("scenario_hash") || !prev.contains("algorithm")) return nullptr;
  if (prev["scenario_hash"] != mine["scenario_hash"]) return nullptr;
  if (prev["algorithm"] == mine["algorithm"]) return nullptr;
  double max_dp = 0.0, max_dq = 0.0;
  int compared = 0;
  for (const auto& slot : mine["slots"]) {
    for (const auto& pslot : prev["slots"]) {
      if (pslot["slot"] != slot["slot"]) continue;
      const auto& a = slot["setpoints"];
      const auto& b = pslot["setpoints"];
      if (a.size() != b.size()) continue;
      for (std::size_t k = 0; k < a.size(); ++k) {
        max_dp = std::max(max_dp, std::abs(a[k]["p_c"].get<double>() -
                                           b[k]["p_c"].get<double>()));
        max_dq = std::max(max_dq, std::abs(a[k]["q_c"].get<double>() -
                                           b[k]["q_c"].get<double>()));
      }
      ++compared;
    }
  }
  if (!compared) return nullptr;
  return json{{"against", prev["algorithm"]},
              {"slots_compared", compared},
              {"max_dp", round9(max_dp)},
              {"max_dq", round9(max_dq)}};
}

int cmd_run(const CommonOpts& opts, const std::string& algo_name, int slot, bool all_slots,
            const std::string& partition_path, const std::string& log_path,
            double ratio_tol) {
  const oid::Scenario s = load_with_overrides(opts);
  oid::SimConfig cfg;
  if (algo_name == "central")
    cfg.algo = oid::Algo::Central;
  else if (algo_name == "doid1")
    cfg.algo = oid::Algo::Doid1;
  else
    cfg.algo = oid::Algo::Doid2;
  cfg.ratio_tol = ratio_tol;
  cfg.partition = load_partition(partition_path);
  if (cfg.algo == oid::Algo::Doid2 && !cfg.partition && !s.clusters) {
    std::cerr << "doid2 needs --partition or a scenario with clusters\n";
    return kExitUsage;
  }

  std::vector<int> slots;
  if (all_slots)
    for (int t = 0; t < s.n_slots; ++t) slots.push_back(t);
  else
    slots.push_back(slot);

  std::vector<SlotRun> runs(slots.size());
  std::exception_ptr first_error;
  oid::par::for_each(slots.size(), [&](std::size_t i) {
    try {
      oid::SimConfig c = cfg;
      c.slot = slots[i];
      if (!log_path.empty() && slots.size() == 1) c.log_path = log_path;
      runs[i].slot = slots[i];
      runs[i].sim = oid::run_simulation(s, c);
    } catch (...) {
      if (!first_error) first_error = std::current_exception();
    }
  });
  if (first_error) std::rethrow_exception(first_error);

  write_dispatch_csv(s, runs, opts.out_dir + "/dispatch.csv");
  if (cfg.algo != oid::Algo::Central)
    write_convergence_csv(s, runs,
                          cfg.algo == oid::Algo::Doid2
                              ? (cfg.partition ? cfg.partition : s.clusters)
                              : std::nullopt,
                          opts.out_dir + "/convergence.csv");

  json summary;
  summary["algorithm"] = algo_name;
  summary["scenario"] = s.name;
  summary["scenario_hash"] = oid::scenario_hash(s);
  summary["config_hash"] = runs.front().sim.config_hash;
  summary["lambda"] = round9(s.cost.lambda);
  summary["kappa"] = round9(s.admm.kappa);
  summary["epsilon"] = round9(s.admm.epsilon);
  json jslots = json::array();
  bool all_converged = true;
  for (const auto& r : runs) {
    jslots.push_back(summarize_slot(s, r));
    all_converged = all_converged && r.sim.dispatch.converged;
  }
  summary["slots"] = std::move(jslots);
  const std::string summary_path = opts.out_dir + "/summary.json";
  const json check = cross_check(summary, summary_path);
  if (!check.is_null()) summary["cross_check"] = check;
  std::ofstream out(summary_path);
  if (!out) throw oid::FormatError("cannot write " + summary_path);
  out << summary.dump(2) << '\n';

  if (!all_converged) {
    std::cerr << "warning: consensus not reached within the iteration cap\n";
    return kExitNotConverged;
  }
  oid::log::info("run complete, outputs in " + opts.out_dir);
  return kExitOk;
}

int cmd_sweep(const CommonOpts& opts, int slot, std::vector<double> lambdas) {
  oid::Scenario s = load_with_overrides(opts);
  if (lambdas.empty()) lambdas = {0.0, 0.2, 0.4, 0.8, 1.6};
  const oid::FeederModel f = oid::make_feeder(s, slot);

  struct Row {
    double lambda, objective, loss;
    int dispatched;
  };
  std::vector<Row> rows(lambdas.size());
  std::exception_ptr first_error;
  oid::par::for_each(lambdas.size(), [&](std::size_t i) {
    try {
      oid::CostSpec cost = oid::cost_of(s);
      cost.lambda = lambdas[i];
      const oid::DispatchResult d = oid::solve_central(f, cost, s.vmin_pu, s.vmax_pu);
      rows[i] = Row{lambdas[i], d.objective, d.loss_term, oid::count_dispatched(d, 1e-4)};
    } catch (...) {
      if (!first_error) first_error = std::current_exception();
    }
  });
  if (first_error) std::rethrow_exception(first_error);

  const std::string path = opts.out_dir + "/lambda_sweep.csv";
  std::ofstream out(path);
  if (!out) throw oid::FormatError("cannot write " + path);
  out << "lambda,dispatched,objective,loss\n";
  for (const auto& r : rows)
    out << fmt9(r.lambda) << ',' << r.dispatched << ',' << fmt9(r.objective) << ','
        << fmt9(r.loss) << '\n';
  return kExitOk;
}

int cmd_validate(const std::string& scenario_path, const std::string& partition_path) {
  const oid::Scenario s = oid::load_scenario(scenario_path);
  const oid::FeederModel f = oid::make_feeder(s, 0);
  std::cout << "scenario: " << s.name << '\n'
            << "hash: " << oid::scenario_hash(s) << '\n'
            << "nodes: " << s.node_count() << " (" << f.houses().size() << " houses, "
            << f.poles().size() << " poles)\n"
            << "slots: " << s.n_slots << '\n';
  auto partition = load_partition(partition_path);
  if (!partition && s.clusters) partition = s.clusters;
  if (partition) {
    const auto part = oid::validate_partition(f, *partition);
    std::cout << "clusters: " << part.cluster_count() << ", borders:";
    for (const auto& e : part.borders)
      std::cout << " (" << e.m << ',' << e.n << ')';
    std::cout << '\n';
  }
  std::cout << "ok\n";
  return kExitOk;
}

int cmd_replay(const CommonOpts& opts, const std::string& algo_name, int slot,
               const std::string& partition_path, const std::string& log_path) {
  const oid::Scenario s = load_with_overrides(opts);
  oid::SimConfig cfg;
  cfg.algo = algo_name == "central" ? oid::Algo::Central
             : algo_name == "doid1" ? oid::Algo::Doid1
                                    : oid::Algo::Doid2;
  cfg.slot = slot;
  cfg.partition = load_partition(partition_path);
  const oid::SimulationResult r = oid::inject_message_log(s, cfg, log_path);
  std::cout << "replay ok: " << r.messages_per_round.size() - 1 << " rounds, "
            << r.dispatch.iterations << " iterations\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"optimal PV inverter dispatch workbench"};
  app.require_subcommand(1);

  CommonOpts run_opts;
  std::string run_algo;
  int run_slot = 12;
  bool run_all_slots = false;
  std::string run_partition, run_log;
  double run_ratio_tol = 1e-6;
  CLI::App* run = app.add_subcommand("run", "solve one scenario");
  add_overrides(run, run_opts);
  run->add_option("--algo", run_algo, "central|doid1|doid2")
      ->required()
      ->check(CLI::IsMember({"central", "doid1", "doid2"}));
  auto* slot_opt = run->add_option("--slot", run_slot, "time slot index");
  run->add_flag("--all-slots", run_all_slots, "run every slot")->excludes(slot_opt);
  run->add_option("--partition", run_partition, "cluster partition file (doid2)")
      ->check(CLI::ExistingFile);
  run->add_option("--log", run_log, "write the message log here (single slot only)");
  run->add_option("--ratio-tol", run_ratio_tol, "rank-1 acceptance ratio");

  CommonOpts sweep_opts;
  int sweep_slot = 12;
  std::vector<double> sweep_lambdas;
  CLI::App* sweep = app.add_subcommand("sweep-lambda", "centralized sparsity sweep");
  add_overrides(sweep, sweep_opts);
  sweep->add_option("--slot", sweep_slot, "time slot index");
  sweep->add_option("--lambdas", sweep_lambdas, "weights to sweep")->delimiter(',');

  std::string val_scenario, val_partition;
  CLI::App* val = app.add_subcommand("validate", "check a scenario file");
  val->add_option("--scenario", val_scenario, "scenario file")
      ->required()
      ->check(CLI::ExistingFile);
  val->add_option("--partition", val_partition, "cluster partition file")
      ->check(CLI::ExistingFile);

  CommonOpts replay_opts;
  std::string replay_algo = "doid1";
  int replay_slot = 12;
  std::string replay_partition, replay_log;
  CLI::App* rep = app.add_subcommand("replay", "verify a message log bit for bit");
  add_overrides(rep, replay_opts);
  rep->add_option("--algo", replay_algo, "central|doid1|doid2")
      ->check(CLI::IsMember({"central", "doid1", "doid2"}));
  rep->add_option("--slot", replay_slot, "time slot index");
  rep->add_option("--partition", replay_partition, "cluster partition file")
      ->check(CLI::ExistingFile);
  rep->add_option("--log", replay_log, "message log to verify")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (run->parsed())
      return cmd_run(run_opts, run_algo, run_slot, run_all_slots, run_partition, run_log,
                     run_ratio_tol);
    if (sweep->parsed()) return cmd_sweep(sweep_opts, sweep_slot, sweep_lambdas);
    if (val->parsed()) return cmd_validate(val_scenario, val_partition);
    if (rep->parsed())
      return cmd_replay(replay_opts, replay_algo, replay_slot, replay_partition, replay_log);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitUsage;
}
