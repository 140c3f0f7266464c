#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "oid/harness.hpp"

using oid::AgentId;
using oid::AgentKind;
using oid::Message;
using oid::PayloadTag;

namespace {

// slack - house - pole - house feeder with four slots; slot 2 has enough sun
// to make the dispatch nontrivial
oid::Scenario tiny_scenario() {
  oid::Scenario s;
  s.name = "tiny4";
  s.roles = {"slack", "house", "pole", "house"};
  const auto line = [](int from, int to) {
    oid::ScenarioLine l;
    l.from = from;
    l.to = to;
    l.r_ohm_per_km = 0.55;
    l.x_ohm_per_km = 0.35;
    l.length_m = 50.0;
    return l;
  };
  s.lines = {line(0, 1), line(1, 2), line(2, 3)};
  oid::ScenarioHouse h1, h3;
  h1.node = 1;
  h1.dc_rating_kw = 8.0;
  h1.derating = 0.77;
  h3.node = 3;
  h3.dc_rating_kw = 5.7;
  h3.derating = 0.77;
  s.houses = {h1, h3};
  s.n_slots = 4;
  s.p_av_kw = {{0.0, 2.0, 6.0, 0.0}, {0.0, 1.5, 4.3, 0.0}};
  s.p_load_kw = {{1.2, 1.0, 1.1, 1.4}, {0.9, 0.8, 1.0, 1.3}};
  s.cost.lambda = 0.05;
  s.cost.a = {0.0, 0.0};
  s.cost.b = {0.1, 0.1};
  s.admm.kappa = 1.0;
  s.admm.epsilon = 1e-9;
  s.admm.max_iters = 800;
  s.clusters = std::vector<std::vector<int>>{{0, 1}, {2, 3}};
  return s;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& p) : path(p) { std::remove(path.c_str()); }
  ~TempFile() { std::remove(path.c_str()); }
};

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::string protocol_text(const Message& m, const oid::ClusterPartition* part) {
  try {
    oid::validate_message(m, part);
  } catch (const oid::ProtocolError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("message legality matrix") {
  const AgentId util{AgentKind::Utility, 0};
  const AgentId cust1{AgentKind::Customer, 1};
  const AgentId cust3{AgentKind::Customer, 3};
  const AgentId cem0{AgentKind::Cem, 0};
  const AgentId cem1{AgentKind::Cem, 1};
  const std::vector<double> pair2{0.1, 0.2};
  const std::vector<double> block8{1, 0, 0, 1, 0, 0, 0, 0};

  SUBCASE("single-dispatcher rules, no partition in force") {
    CHECK(protocol_text({cust1, util, 0, PayloadTag::NetLoadReport, pair2}, nullptr).empty());
    CHECK(protocol_text({cust1, util, 3, PayloadTag::SetpointValue, pair2}, nullptr).empty());
    CHECK(protocol_text({util, cust1, 3, PayloadTag::SetpointCopy, pair2}, nullptr).empty());

    CHECK(protocol_text({cust1, util, 0, PayloadTag::NetLoadReport, {0.1}}, nullptr)
              .find("payload size") != std::string::npos);
    CHECK(protocol_text({cust1, cust3, 1, PayloadTag::SetpointValue, pair2}, nullptr)
              .find("never talk") != std::string::npos);
    CHECK(protocol_text({util, cust1, 1, PayloadTag::NetLoadReport, pair2}, nullptr)
              .find("only customers report") != std::string::npos);
    CHECK(protocol_text({cust1, util, 1, PayloadTag::SetpointCopy, pair2}, nullptr)
              .find("down to customers") != std::string::npos);
    CHECK(!protocol_text({util, util, 1, PayloadTag::SetpointValue, pair2}, nullptr).empty());
    CHECK(!protocol_text({cem0, cem1, 1, PayloadTag::BorderBlock, block8}, nullptr).empty());
    // errors carry the routing context
    const auto text = protocol_text({cust1, cust3, 7, PayloadTag::SetpointValue, pair2}, nullptr);
    CHECK(text.find("round 7") != std::string::npos);
    CHECK(text.find("customer 1") != std::string::npos);
    CHECK(text.find("customer 3") != std::string::npos);
  }

  SUBCASE("cluster rules route through the serving CEM") {
    const oid::Scenario s = tiny_scenario();
    const oid::FeederModel f = oid::make_feeder(s, 2);
    const auto part = oid::validate_partition(f, *s.clusters);

    CHECK(protocol_text({cust1, cem0, 0, PayloadTag::NetLoadReport, pair2}, &part).empty());
    CHECK(protocol_text({cust3, cem1, 2, PayloadTag::SetpointValue, pair2}, &part).empty());
    CHECK(protocol_text({cem1, cust3, 2, PayloadTag::SetpointCopy, pair2}, &part).empty());
    CHECK(protocol_text({cem0, cem1, 1, PayloadTag::BorderBlock, block8}, &part).empty());
    CHECK(protocol_text({cem1, cem0, 1, PayloadTag::BorderBlock, block8}, &part).empty());

    CHECK(protocol_text({cust1, cem1, 0, PayloadTag::NetLoadReport, pair2}, &part)
              .find("wrong cluster") != std::string::npos);
    CHECK(protocol_text({cem1, cust1, 1, PayloadTag::SetpointCopy, pair2}, &part)
              .find("wrong cluster") != std::string::npos);
    CHECK(protocol_text({cem0, cem1, 1, PayloadTag::BorderBlock, pair2}, &part)
              .find("payload size") != std::string::npos);
    CHECK(protocol_text({util, cem1, 1, PayloadTag::BorderBlock, block8}, &part)
              .find("CEM to CEM") != std::string::npos);
  }

  SUBCASE("border blocks may only cross tree-adjacent clusters") {
    // six-node chain cut into three clusters: 0-1 | 2-3 | 4-5
    oid::HousePayload h;
    h.inverter = {0.5, 0.4, std::acos(0.85)};
    h.load = {0.1, 0.05};
    const oid::FeederModel f(
        {{0, oid::NodeRole::Slack, std::nullopt},
         {1, oid::NodeRole::House, h},
         {2, oid::NodeRole::Pole, std::nullopt},
         {3, oid::NodeRole::House, h},
         {4, oid::NodeRole::Pole, std::nullopt},
         {5, oid::NodeRole::House, h}},
        {{0, 1, 1.0 / oid::cplx(0.005, 0.003), {}},
         {1, 2, 1.0 / oid::cplx(0.005, 0.003), {}},
         {2, 3, 1.0 / oid::cplx(0.005, 0.003), {}},
         {3, 4, 1.0 / oid::cplx(0.005, 0.003), {}},
         {4, 5, 1.0 / oid::cplx(0.005, 0.003), {}}});
    const auto part = oid::validate_partition(f, {{0, 1}, {2, 3}, {4, 5}});
    const AgentId cem2{AgentKind::Cem, 2};
    CHECK(protocol_text({cem0, cem1, 1, PayloadTag::BorderBlock, block8}, &part).empty());
    CHECK(protocol_text({cem1, cem2, 1, PayloadTag::BorderBlock, block8}, &part).empty());
    CHECK(protocol_text({cem0, cem2, 1, PayloadTag::BorderBlock, block8}, &part)
              .find("not tree neighbors") != std::string::npos);
  }
}

TEST_CASE("per-round message counts") {
  const oid::Scenario s = tiny_scenario();

  SUBCASE("central: one report per house, then silence") {
    oid::SimConfig cfg;
    cfg.algo = oid::Algo::Central;
    cfg.slot = 2;
    const auto r = oid::run_simulation(s, cfg);
    REQUIRE(r.messages_per_round.size() == 1);
    CHECK(r.messages_per_round[0] == 2);
    CHECK(r.history.empty());
  }
  SUBCASE("single dispatcher: a copy down and a value up per house per round") {
    oid::SimConfig cfg;
    cfg.algo = oid::Algo::Doid1;
    cfg.slot = 2;
    const auto r = oid::run_simulation(s, cfg);
    REQUIRE(r.converged);
    REQUIRE(r.messages_per_round.size() == r.history.size() + 1);
    CHECK(r.messages_per_round[0] == 2);
    for (std::size_t i = 1; i < r.messages_per_round.size(); ++i)
      CHECK(r.messages_per_round[i] == 4);
  }
  SUBCASE("clusters add two border blocks per border per round") {
    oid::SimConfig cfg;
    cfg.algo = oid::Algo::Doid2;
    cfg.slot = 2;
    const auto r = oid::run_simulation(s, cfg);
    REQUIRE(r.converged);
    REQUIRE(r.messages_per_round.size() == r.history.size() + 1);
    CHECK(r.messages_per_round[0] == 2);
    for (std::size_t i = 1; i < r.messages_per_round.size(); ++i)
      CHECK(r.messages_per_round[i] == 2 * 2 + 2 * 1);
  }
}

TEST_CASE("the message-passing run matches the in-process algorithms") {
  const oid::Scenario s = tiny_scenario();
  const oid::FeederModel f = oid::make_feeder(s, 2);
  const oid::CostSpec cost = oid::cost_of(s);
  const oid::AdmmConfig admm = oid::admm_of(s);

  SUBCASE("central") {
    oid::SimConfig cfg;
    cfg.algo = oid::Algo::Central;
    cfg.slot = 2;
    const auto sim = oid::run_simulation(s, cfg);
    const auto direct = oid::solve_central(f, cost, s.vmin_pu, s.vmax_pu);
    for (int k = 0; k < 2; ++k) {
      CHECK(std::abs(sim.dispatch.setpoints[k].P_c - direct.setpoints[k].P_c) < 1e-9);
      CHECK(std::abs(sim.dispatch.setpoints[k].Q_c - direct.setpoints[k].Q_c) < 1e-9);
    }
  }
  SUBCASE("single dispatcher") {
    oid::SimConfig cfg;
    cfg.algo = oid::Algo::Doid1;
    cfg.slot = 2;
    const auto sim = oid::run_simulation(s, cfg);
    const auto direct = oid::run_algorithm1(f, cost, s.vmin_pu, s.vmax_pu, admm);
    REQUIRE(sim.converged == direct.converged);
    REQUIRE(sim.history.size() == direct.history.size());
    for (std::size_t i = 0; i < sim.history.size(); ++i)
      CHECK(std::abs(sim.history[i].residual - direct.history[i].residual) < 1e-12);
    for (int k = 0; k < 2; ++k) {
      CHECK(std::abs(sim.dispatch.setpoints[k].P_c - direct.dispatch.setpoints[k].P_c) <
            1e-12);
      CHECK(std::abs(sim.dispatch.setpoints[k].Q_c - direct.dispatch.setpoints[k].Q_c) <
            1e-12);
    }
  }
  SUBCASE("clusters") {
    oid::SimConfig cfg;
    cfg.algo = oid::Algo::Doid2;
    cfg.slot = 2;
    const auto sim = oid::run_simulation(s, cfg);
    const auto direct =
        oid::run_algorithm2(f, cost, s.vmin_pu, s.vmax_pu, *s.clusters, admm);
    REQUIRE(sim.converged == direct.converged);
    REQUIRE(sim.history.size() == direct.history.size());
    for (std::size_t i = 0; i < sim.history.size(); ++i) {
      CHECK(std::abs(sim.history[i].residual - direct.history[i].residual) < 1e-12);
      REQUIRE(sim.history[i].border_err.size() == 1);
      CHECK(std::abs(sim.history[i].border_err[0] - direct.history[i].border_err[0]) <
            1e-12);
    }
    for (int k = 0; k < 2; ++k) {
      CHECK(std::abs(sim.dispatch.setpoints[k].P_c - direct.dispatch.setpoints[k].P_c) <
            1e-12);
      CHECK(std::abs(sim.dispatch.setpoints[k].Q_c - direct.dispatch.setpoints[k].Q_c) <
            1e-12);
    }
  }
}

TEST_CASE("config hash tracks every replay-relevant input") {
  const oid::Scenario s = tiny_scenario();
  const auto base = oid::run_config_hash(s, oid::Algo::Doid1, 2, std::nullopt);
  CHECK(base == oid::run_config_hash(s, oid::Algo::Doid1, 2, std::nullopt));
  CHECK(base != oid::run_config_hash(s, oid::Algo::Doid2, 2, std::nullopt));
  CHECK(base != oid::run_config_hash(s, oid::Algo::Doid1, 1, std::nullopt));
  CHECK(base != oid::run_config_hash(s, oid::Algo::Doid1, 2, *s.clusters));
  oid::Scenario t = s;
  t.admm.kappa = 2.0;
  CHECK(base != oid::run_config_hash(t, oid::Algo::Doid1, 2, std::nullopt));
  t = s;
  t.p_load_kw[0][2] += 0.5;
  CHECK(base != oid::run_config_hash(t, oid::Algo::Doid1, 2, std::nullopt));
}

TEST_CASE("binary log replay") {
  const oid::Scenario s = tiny_scenario();
  oid::SimConfig cfg;
  cfg.algo = oid::Algo::Doid2;
  cfg.slot = 2;
  TempFile log("harness_replay_test.oidlog");
  cfg.log_path = log.path;
  const auto ran = oid::run_simulation(s, cfg);
  REQUIRE(ran.converged);
  const auto original = slurp(log.path);
  REQUIRE(original.size() > 16);

  oid::SimConfig recfg = cfg;
  recfg.log_path.clear();

  SUBCASE("an untouched log replays to the identical result") {
    const auto rep = oid::inject_message_log(s, recfg, log.path);
    REQUIRE(rep.history.size() == ran.history.size());
    CHECK(rep.dispatch.setpoints[0].P_c == ran.dispatch.setpoints[0].P_c);
    CHECK(rep.dispatch.setpoints[1].Q_c == ran.dispatch.setpoints[1].Q_c);
    CHECK(rep.config_hash == ran.config_hash);
  }
  SUBCASE("flipping one payload byte is caught with its offset") {
    auto bytes = original;
    bytes[40] ^= 0xff;  // inside the first record's payload
    spit(log.path, bytes);
    try {
      oid::inject_message_log(s, recfg, log.path);
      FAIL("tampered log accepted");
    } catch (const oid::FormatError& e) {
      CHECK(std::string(e.what()).find("diverged at offset 40") != std::string::npos);
    }
  }
  SUBCASE("corrupt structure is rejected before the re-run") {
    auto bytes = original;
    bytes[16 + 4 + 4] = 7;  // sender kind of the first record
    spit(log.path, bytes);
    try {
      oid::inject_message_log(s, recfg, log.path);
      FAIL("corrupt log accepted");
    } catch (const oid::FormatError& e) {
      CHECK(std::string(e.what()).find("agent kind at offset 16") != std::string::npos);
    }
  }
  SUBCASE("truncation is caught with the offset") {
    auto bytes = original;
    bytes.resize(bytes.size() - 5);
    spit(log.path, bytes);
    try {
      oid::inject_message_log(s, recfg, log.path);
      FAIL("truncated log accepted");
    } catch (const oid::FormatError& e) {
      CHECK(std::string(e.what()).find("truncated log at offset") != std::string::npos);
    }
  }
  SUBCASE("valid-looking trailing records are rejected") {
    auto bytes = original;
    std::uint32_t len0 = 0;
    std::memcpy(&len0, bytes.data() + 16, 4);
    bytes.insert(bytes.end(), original.begin() + 16, original.begin() + 16 + 4 + len0);
    spit(log.path, bytes);
    try {
      oid::inject_message_log(s, recfg, log.path);
      FAIL("padded log accepted");
    } catch (const oid::FormatError& e) {
      CHECK(std::string(e.what()).find("trailing bytes at offset " +
                                       std::to_string(original.size())) != std::string::npos);
    }
  }
  SUBCASE("a log never replays under a different configuration") {
    oid::Scenario t = s;
    t.admm.kappa = 0.5;
    try {
      oid::inject_message_log(t, recfg, log.path);
      FAIL("foreign log accepted");
    } catch (const oid::FormatError& e) {
      CHECK(std::string(e.what()).find("config hash mismatch") != std::string::npos);
    }
    oid::SimConfig other = recfg;
    other.slot = 1;
    CHECK_THROWS_AS(oid::inject_message_log(s, other, log.path), oid::FormatError);
  }
  SUBCASE("not a log at all") {
    spit(log.path, {1, 2, 3});
    CHECK_THROWS_AS(oid::inject_message_log(s, recfg, log.path), oid::FormatError);
    std::vector<std::uint8_t> junk(64, 0xab);
    spit(log.path, junk);
    try {
      oid::inject_message_log(s, recfg, log.path);
      FAIL("junk accepted");
    } catch (const oid::FormatError& e) {
      CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }
  }
}

TEST_CASE("simulation input validation") {
  oid::Scenario s = tiny_scenario();
  oid::SimConfig cfg;
  cfg.algo = oid::Algo::Doid1;
  cfg.slot = 99;
  CHECK_THROWS_AS(oid::run_simulation(s, cfg), oid::ModelError);
  cfg.slot = -1;
  CHECK_THROWS_AS(oid::run_simulation(s, cfg), oid::ModelError);

  cfg.algo = oid::Algo::Doid2;
  cfg.slot = 2;
  s.clusters.reset();
  CHECK_THROWS_AS(oid::run_simulation(s, cfg), oid::ModelError);
}

TEST_CASE("algorithm names") {
  CHECK(std::string(oid::to_string(oid::Algo::Central)) == "central");
  CHECK(std::string(oid::to_string(oid::Algo::Doid1)) == "doid1");
  CHECK(std::string(oid::to_string(oid::Algo::Doid2)) == "doid2");
}
