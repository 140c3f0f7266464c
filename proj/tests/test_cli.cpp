#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oid/scenario.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kBin = std::string(OID_BIN_DIR) + "/oid";

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp_text(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CliResult run_cli(const std::string& args, const std::string& env = {}) {
  const std::string out_file = "cli_tmp/stdout.txt", err_file = "cli_tmp/stderr.txt";
  const std::string cmd = env + (env.empty() ? "" : " ") + kBin + " " + args + " > " +
                          out_file + " 2> " + err_file;
  const int raw = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp_text(out_file);
  r.err = slurp_text(err_file);
  return r;
}

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

// created once; individual cases write into their own subdirectories
struct Workspace {
  Workspace() {
    fs::create_directories("cli_tmp");
    oid::save_scenario(tiny_scenario(), "cli_tmp/tiny.json");
    oid::Scenario no_clusters = tiny_scenario();
    no_clusters.clusters.reset();
    oid::save_scenario(no_clusters, "cli_tmp/tiny_nc.json");
    std::ofstream part("cli_tmp/part.json");
    part << "[[0,1],[2,3]]\n";
    std::ofstream bad("cli_tmp/broken.json");
    bad << "{this is not json";
  }
};

const Workspace& workspace() {
  static Workspace w;
  return w;
}

std::vector<std::string> csv_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("usage errors exit with the usage code") {
  workspace();
  CHECK(run_cli("").code == 64);
  CHECK(run_cli("frobnicate").code == 64);
  CHECK(run_cli("run --algo central").code == 64);  // --scenario missing
  CHECK(run_cli("run --scenario cli_tmp/tiny.json").code == 64);  // --algo missing
  CHECK(run_cli("run --scenario cli_tmp/tiny.json --algo kalman").code == 64);
  CHECK(run_cli("run --scenario cli_tmp/missing.json --algo central").code == 64);
  CHECK(run_cli("run --scenario cli_tmp/tiny.json --algo central --slot 1 --all-slots")
            .code == 64);
  CHECK(run_cli("--help").code == 0);
  const auto r =
      run_cli("run --scenario cli_tmp/tiny_nc.json --algo doid2 --slot 2 --out cli_tmp");
  CHECK(r.code == 64);
  CHECK(r.err.find("partition") != std::string::npos);
}

TEST_CASE("broken input files exit with the error code") {
  workspace();
  const auto r = run_cli("run --scenario cli_tmp/broken.json --algo central --out cli_tmp");
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("central run writes dispatch and summary files") {
  workspace();
  fs::create_directories("cli_tmp/central");
  const auto r = run_cli(
      "run --scenario cli_tmp/tiny.json --algo central --slot 2 --out cli_tmp/central");
  REQUIRE(r.code == 0);

  const auto rows = csv_lines("cli_tmp/central/dispatch.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == "slot,house,p_c,q_c,v_mag");
  CHECK(rows[1].rfind("2,1,", 0) == 0);
  CHECK(rows[2].rfind("2,3,", 0) == 0);
  CHECK(!fs::exists("cli_tmp/central/convergence.csv"));

  json summary;
  std::ifstream in("cli_tmp/central/summary.json");
  in >> summary;
  CHECK(summary["algorithm"] == "central");
  CHECK(summary["scenario"] == "tiny4");
  REQUIRE(summary["slots"].size() == 1);
  CHECK(summary["slots"][0]["slot"] == 2);
  CHECK(summary["slots"][0]["converged"] == true);
  CHECK(summary["slots"][0]["rank_ratio"].get<double>() <= 1e-6);
  CHECK(summary["slots"][0]["setpoints"].size() == 2);
  CHECK(!summary.contains("cross_check"));
}

TEST_CASE("a follow-up run cross-checks the previous summary") {
  workspace();
  fs::create_directories("cli_tmp/xcheck");
  REQUIRE(run_cli("run --scenario cli_tmp/tiny.json --algo central --slot 2 "
                  "--out cli_tmp/xcheck")
              .code == 0);
  REQUIRE(run_cli("run --scenario cli_tmp/tiny.json --algo doid1 --slot 2 "
                  "--out cli_tmp/xcheck")
              .code == 0);

  json summary;
  std::ifstream in("cli_tmp/xcheck/summary.json");
  in >> summary;
  CHECK(summary["algorithm"] == "doid1");
  REQUIRE(summary.contains("cross_check"));
  CHECK(summary["cross_check"]["against"] == "central");
  CHECK(summary["cross_check"]["slots_compared"] == 1);
  CHECK(summary["cross_check"]["max_dp"].get<double>() < 1e-3);
  CHECK(summary["cross_check"]["max_dq"].get<double>() < 1e-3);

  const auto conv = csv_lines("cli_tmp/xcheck/convergence.csv");
  REQUIRE(conv.size() > 1);
  CHECK(conv[0] == "slot,iteration,id,error");
  CHECK(conv[1].rfind("2,1,p1,", 0) == 0);
  CHECK(conv[2].rfind("2,1,q1,", 0) == 0);
}

TEST_CASE("cluster run records border traces and uses scenario clusters") {
  workspace();
  fs::create_directories("cli_tmp/doid2");
  const auto r = run_cli(
      "run --scenario cli_tmp/tiny.json --algo doid2 --slot 2 --out cli_tmp/doid2");
  REQUIRE(r.code == 0);
  bool saw_border = false;
  for (const auto& line : csv_lines("cli_tmp/doid2/convergence.csv"))
    if (line.find(",b1-2,") != std::string::npos) saw_border = true;
  CHECK(saw_border);

  // an explicit partition file works on a scenario without clusters
  fs::create_directories("cli_tmp/doid2b");
  CHECK(run_cli("run --scenario cli_tmp/tiny_nc.json --algo doid2 --slot 2 "
                "--partition cli_tmp/part.json --out cli_tmp/doid2b")
            .code == 0);
}

TEST_CASE("all-slots run covers the whole horizon") {
  workspace();
  fs::create_directories("cli_tmp/all");
  REQUIRE(run_cli("run --scenario cli_tmp/tiny.json --algo central --all-slots "
                  "--out cli_tmp/all")
              .code == 0);
  const auto rows = csv_lines("cli_tmp/all/dispatch.csv");
  CHECK(rows.size() == 1 + 4 * 2);
  json summary;
  std::ifstream in("cli_tmp/all/summary.json");
  in >> summary;
  CHECK(summary["slots"].size() == 4);
}

TEST_CASE("iteration cap produces the non-convergence exit code") {
  workspace();
  fs::create_directories("cli_tmp/capped");
  const auto r = run_cli("run --scenario cli_tmp/tiny.json --algo doid1 --slot 2 "
                         "--max-iters 2 --out cli_tmp/capped");
  CHECK(r.code == 2);
  CHECK(r.err.find("not reached") != std::string::npos);
}

TEST_CASE("sparsity sweep writes a monotone participation table") {
  workspace();
  fs::create_directories("cli_tmp/sweep");
  REQUIRE(run_cli("sweep-lambda --scenario cli_tmp/tiny.json --slot 2 "
                  "--lambdas 0,0.4,1.6 --out cli_tmp/sweep")
              .code == 0);
  const auto rows = csv_lines("cli_tmp/sweep/lambda_sweep.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "lambda,dispatched,objective,loss");
  int prev = 1 << 20;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto c1 = rows[i].find(',');
    const auto c2 = rows[i].find(',', c1 + 1);
    const int dispatched = std::stoi(rows[i].substr(c1 + 1, c2 - c1 - 1));
    CHECK(dispatched <= prev);
    prev = dispatched;
  }
}

TEST_CASE("validate prints the scenario fingerprint") {
  workspace();
  const auto r = run_cli("validate --scenario cli_tmp/tiny.json");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("scenario: tiny4") != std::string::npos);
  CHECK(r.out.find("hash: ") != std::string::npos);
  CHECK(r.out.find("nodes: 4 (2 houses, 1 poles)") != std::string::npos);
  CHECK(r.out.find("clusters: 2, borders: (1,2)") != std::string::npos);
  CHECK(r.out.find("ok") != std::string::npos);
}

TEST_CASE("message logs replay through the command line") {
  workspace();
  fs::create_directories("cli_tmp/replay");
  REQUIRE(run_cli("run --scenario cli_tmp/tiny.json --algo doid1 --slot 2 "
                  "--log cli_tmp/replay/run.oidlog --out cli_tmp/replay")
              .code == 0);
  const auto ok = run_cli("replay --scenario cli_tmp/tiny.json --algo doid1 --slot 2 "
                          "--log cli_tmp/replay/run.oidlog");
  REQUIRE(ok.code == 0);
  CHECK(ok.out.find("replay ok") != std::string::npos);

  // a changed consensus weight no longer matches the log's config hash
  const auto bad = run_cli("replay --scenario cli_tmp/tiny.json --algo doid1 --slot 2 "
                           "--kappa 2 --log cli_tmp/replay/run.oidlog");
  CHECK(bad.code == 1);
  CHECK(bad.err.find("config hash mismatch") != std::string::npos);
}

TEST_CASE("identical runs write identical artifacts") {
  workspace();
  fs::create_directories("cli_tmp/det_a");
  fs::create_directories("cli_tmp/det_b");
  const std::string args =
      "run --scenario cli_tmp/tiny.json --algo doid1 --slot 2 --out cli_tmp/";
  REQUIRE(run_cli(args + "det_a").code == 0);
  REQUIRE(run_cli(args + "det_b", "OID_LOG=debug").code == 0);
  CHECK(slurp_text("cli_tmp/det_a/dispatch.csv") == slurp_text("cli_tmp/det_b/dispatch.csv"));
  CHECK(slurp_text("cli_tmp/det_a/convergence.csv") ==
        slurp_text("cli_tmp/det_b/convergence.csv"));
}

TEST_CASE("seed override regenerates the profiles") {
  workspace();
  fs::create_directories("cli_tmp/seed");
  REQUIRE(run_cli("run --scenario cli_tmp/tiny.json --algo central --slot 2 "
                  "--seed 7 --out cli_tmp/seed")
              .code == 0);
  json reseeded, base;
  {
    std::ifstream in("cli_tmp/seed/summary.json");
    in >> reseeded;
  }
  fs::create_directories("cli_tmp/seed0");
  REQUIRE(run_cli("run --scenario cli_tmp/tiny.json --algo central --slot 2 "
                  "--out cli_tmp/seed0")
              .code == 0);
  {
    std::ifstream in("cli_tmp/seed0/summary.json");
    in >> base;
  }
  CHECK(reseeded["scenario_hash"] != base["scenario_hash"]);
}
