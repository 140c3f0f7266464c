#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oid/clusters.hpp"
#include "oid/scenario.hpp"

namespace oid {

enum class Algo { Central, Doid1, Doid2 };
const char* to_string(Algo a);

enum class AgentKind : std::uint8_t { Utility = 0, Cem = 1, Customer = 2 };

struct AgentId {
  AgentKind kind = AgentKind::Utility;
  std::uint32_t id = 0;  // cluster index for Cem, house node id for Customer

  bool operator==(const AgentId&) const = default;
};

enum class PayloadTag : std::uint8_t {
  NetLoadReport = 0,  // customer -> dispatcher: (P_av - P_load, Q_load)
  SetpointCopy = 1,   // dispatcher -> customer: (p_bar, q_bar)
  SetpointValue = 2,  // customer -> dispatcher: (p, q)
  BorderBlock = 3,    // CEM -> neighbor CEM: 2x2 border block, Re row-major then Im
};

struct Message {
  AgentId from, to;
  std::uint32_t round = 0;
  PayloadTag tag = PayloadTag::NetLoadReport;
  std::vector<double> data;
};

// Legality matrix for one message: payload size, sender/receiver kinds, and
// (given a partition) cluster membership and tree adjacency. Throws
// ProtocolError naming the sender, receiver, and round. The bus applies this
// to every posted message; exposed so the rules themselves are testable.
void validate_message(const Message& m, const ClusterPartition* partition);

struct SimConfig {
  Algo algo = Algo::Central;
  int slot = 12;
  // overrides the scenario's cluster list when present (Doid2 only)
  std::optional<std::vector<std::vector<int>>> partition;
  std::string log_path;  // empty: no message log written
  double ratio_tol = 1e-6;
  std::optional<SolverSettings> subproblem;
};

struct SimulationResult {
  DispatchResult dispatch;
  std::vector<IterationRecord> history;     // empty for Central
  std::vector<std::size_t> messages_per_round;  // [0] = reports
  std::uint64_t config_hash = 0;
  bool converged = true;
};

// Hash guarding replays: any change to the scenario, the algorithm, or the
// consensus configuration changes the hash.
std::uint64_t run_config_hash(const Scenario& s, Algo algo, int slot,
                              const std::optional<std::vector<std::vector<int>>>& partition);

CostSpec cost_of(const Scenario& s);
AdmmConfig admm_of(const Scenario& s);

// Drives utility/CEM/customer agents through synchronous message rounds.
// Every exchanged value travels as a Message through a legality-checking bus
// (ProtocolError on any payload a sender may not address to a receiver);
// consensus traces are computed from the message stream alone. With a
// log_path set, the full stream is written in the replayable binary format.
SimulationResult run_simulation(const Scenario& s, const SimConfig& cfg);

// Verifies the header hash against (scenario, cfg), structurally checks the
// records, re-runs the simulation, and compares the regenerated stream byte
// for byte. Any corruption, truncation, or config mismatch -> FormatError
// with the offending byte offset where applicable.
SimulationResult inject_message_log(const Scenario& s, const SimConfig& cfg,
                                    const std::string& path);

}  // namespace oid
