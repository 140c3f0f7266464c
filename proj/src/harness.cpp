#include "oid/harness.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "oid/parallel.hpp"

namespace oid {

static_assert(std::endian::native == std::endian::little,
              "message logs are little-endian; big-endian hosts need byte swaps");

const char* to_string(Algo a) {
  switch (a) {
    case Algo::Central: return "central";
    case Algo::Doid1: return "doid1";
    case Algo::Doid2: return "doid2";
  }
  return "?";
}

CostSpec cost_of(const Scenario& s) {
  CostSpec c;
  c.loss_weight = s.cost.loss_weight;
  c.lambda = s.cost.lambda;
  c.a = s.cost.a;
  c.b = s.cost.b;
  return c;
}

AdmmConfig admm_of(const Scenario& s) {
  AdmmConfig c;
  c.kappa = s.admm.kappa;
  c.epsilon = s.admm.epsilon;
  c.max_iters = s.admm.max_iters;
  return c;
}

std::uint64_t run_config_hash(const Scenario& s, Algo algo, int slot,
                              const std::optional<std::vector<std::vector<int>>>& partition) {
  nlohmann::json j;
  j["scenario_hash"] = scenario_hash(s);
  j["algo"] = to_string(algo);
  j["slot"] = slot;
  j["kappa"] = s.admm.kappa;
  j["epsilon"] = s.admm.epsilon;
  j["max_iters"] = s.admm.max_iters;
  j["lambda"] = s.cost.lambda;
  j["loss_weight"] = s.cost.loss_weight;
  j["vmin"] = s.vmin_pu;
  j["vmax"] = s.vmax_pu;
  if (partition)
    j["partition"] = *partition;
  else
    j["partition"] = nullptr;
  const std::string d = j.dump();
  return fnv1a64(d.data(), d.size());
}

namespace {

constexpr char kMagic[8] = {'O', 'I', 'D', 'L', 'O', 'G', '0', '1'};

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  const auto n = b.size();
  b.resize(n + 4);
  std::memcpy(b.data() + n, &v, 4);
}

void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  const auto n = b.size();
  b.resize(n + 8);
  std::memcpy(b.data() + n, &v, 8);
}

void put_f64(std::vector<std::uint8_t>& b, double v) {
  const auto n = b.size();
  b.resize(n + 8);
  std::memcpy(b.data() + n, &v, 8);
}

std::vector<std::uint8_t> encode_stream(const std::vector<Message>& log, std::uint64_t hash) {
  std::vector<std::uint8_t> b;
  b.insert(b.end(), kMagic, kMagic + 8);
  put_u64(b, hash);
  for (const Message& m : log) {
    put_u32(b, static_cast<std::uint32_t>(16 + 8 * m.data.size()));
    put_u32(b, m.round);
    b.push_back(static_cast<std::uint8_t>(m.from.kind));
    put_u32(b, m.from.id);
    b.push_back(static_cast<std::uint8_t>(m.to.kind));
    put_u32(b, m.to.id);
    b.push_back(static_cast<std::uint8_t>(m.tag));
    b.push_back(static_cast<std::uint8_t>(m.data.size()));
    for (double v : m.data) put_f64(b, v);
  }
  return b;
}

std::string describe(const AgentId& a) {
  switch (a.kind) {
    case AgentKind::Utility: return "utility";
    case AgentKind::Cem: return "cem " + std::to_string(a.id);
    case AgentKind::Customer: return "customer " + std::to_string(a.id);
  }
  return "?";
}

// In-memory message exchange. Checks every posted message against the
// algorithm's legal sender/receiver/payload combinations before accepting.
class Bus {
 public:
  explicit Bus(const ClusterPartition* part) : part_(part) {}

  const Message& post(Message m) {
    validate_message(m, part_);
    ++current_;
    log_.push_back(std::move(m));
    return log_.back();
  }

  void end_round() {
    counts_.push_back(current_);
    current_ = 0;
  }

  const std::vector<Message>& log() const { return log_; }
  const std::vector<std::size_t>& counts() const { return counts_; }

 private:
  const ClusterPartition* part_;
  std::vector<Message> log_;
  std::vector<std::size_t> counts_;
  std::size_t current_ = 0;
};

std::vector<double> encode_block(const Eigen::Matrix2cd& V) {
  return {V(0, 0).real(), V(0, 1).real(), V(1, 0).real(), V(1, 1).real(),
          V(0, 0).imag(), V(0, 1).imag(), V(1, 0).imag(), V(1, 1).imag()};
}

Eigen::Matrix2cd decode_block(const std::vector<double>& d) {
  Eigen::Matrix2cd V;
  V << cplx(d[0], d[4]), cplx(d[1], d[5]), cplx(d[2], d[6]), cplx(d[3], d[7]);
  return V;
}

// The dispatcher side rebuilds its network model from the customers' load
// reports; only the line data, ratings, and power-factor limits are public.
// Central dispatch additionally knows the irradiance-derived availability
// (it must bound the curtailment), so it recovers the load from the report.
FeederModel feeder_from_reports(const FeederModel& truth, const std::vector<double>& pnet,
                                const std::vector<double>& qload, bool central) {
  std::vector<Node> nodes = truth.nodes();
  const auto& houses = truth.houses();
  for (std::size_t k = 0; k < houses.size(); ++k) {
    Node& nd = nodes[houses[k]];
    HousePayload p = *nd.house;
    if (central) {
      p.load.P_load = p.inverter.P_av - pnet[k];
      if (p.load.P_load < 0.0) p.load.P_load = 0.0;
    } else if (pnet[k] >= 0.0) {
      p.inverter.P_av = pnet[k];
      p.load.P_load = 0.0;
    } else {
      p.inverter.P_av = 0.0;
      p.load.P_load = -pnet[k];
    }
    p.load.Q_load = qload[k];
    nd.house = p;
  }
  return FeederModel(std::move(nodes), truth.lines());
}

struct CustomerAgent {
  AgentId id;
  std::size_t k = 0;  // position in feeder house order
  HousePayload data;
  double a = 0.0, b = 0.0, kappa = 1.0;
  double gamma = 0.0, mu = 0.0;
  double pbar = 0.0, qbar = 0.0;  // last copy received
  double p = 0.0, q = 0.0;        // last own value

  Message report(AgentId to) const {
    return Message{id, to, 0, PayloadTag::NetLoadReport,
                   {data.inverter.P_av - data.load.P_load, data.load.Q_load}};
  }

  OperatingPoint compute() const {
    const double cp = gamma + 0.5 * kappa * (pbar + p);
    const double cq = mu + 0.5 * kappa * (qbar + q);
    return customer_update(data.inverter, a, b, kappa, cp, cq);
  }

  void commit(const Message& copy, const OperatingPoint& own) {
    pbar = copy.data[0];
    qbar = copy.data[1];
    p = own.P_c;
    q = own.Q_c;
    gamma += 0.5 * kappa * (pbar - p);
    mu += 0.5 * kappa * (qbar - q);
  }
};

struct UtilityAgent {
  double kappa = 1.0;
  std::vector<double> gamma, mu, pb, qb, p, q;
  std::optional<UtilityProblem> problem;
  UtilityProblem::Update last;

  UtilityProblem::Update compute() {
    const std::size_t nh = gamma.size();
    std::vector<double> lin_p(nh), lin_q(nh);
    for (std::size_t k = 0; k < nh; ++k) {
      lin_p[k] = gamma[k] - 0.5 * kappa * (pb[k] + p[k]);
      lin_q[k] = mu[k] - 0.5 * kappa * (qb[k] + q[k]);
    }
    last = problem->solve(lin_p, lin_q);
    return last;
  }

  void commit(const std::vector<const Message*>& values) {
    pb = last.p_bar;
    qb = last.q_bar;
    for (std::size_t k = 0; k < values.size(); ++k) {
      p[k] = values[k]->data[0];
      q[k] = values[k]->data[1];
      gamma[k] += 0.5 * kappa * (pb[k] - p[k]);
      mu[k] += 0.5 * kappa * (qb[k] - q[k]);
    }
  }
};

struct CemAgent {
  int cluster = 0;
  double kappa = 1.0;
  std::vector<std::size_t> house_ks;  // global house indices, problem order
  std::vector<double> gamma, mu, pb, qb, p, q;
  std::vector<int> neighbor;  // per incident border
  std::vector<Eigen::Matrix2cd> own_block, recv_block;
  std::vector<Eigen::Matrix2d> du_re, du_im;  // this side's oriented duals
  std::optional<CemProblem> problem;
  CemProblem::Update last;

  CemProblem::Update compute() {
    const std::size_t nh = gamma.size();
    const std::size_t nb = own_block.size();
    std::vector<double> lin_p(nh), lin_q(nh);
    for (std::size_t k = 0; k < nh; ++k) {
      lin_p[k] = gamma[k] - 0.5 * kappa * (pb[k] + p[k]);
      lin_q[k] = mu[k] - 0.5 * kappa * (qb[k] + q[k]);
    }
    std::vector<Eigen::Matrix2d> mid_re(nb), mid_im(nb);
    for (std::size_t e = 0; e < nb; ++e) {
      const Eigen::Matrix2cd mid = 0.5 * (own_block[e] + recv_block[e]);
      mid_re[e] = mid.real();
      mid_im[e] = mid.imag();
    }
    last = problem->solve(lin_p, lin_q, mid_re, mid_im, du_re, du_im);
    return last;
  }

  void commit(const std::vector<const Message*>& values,
              const std::vector<const Message*>& blocks) {
    pb = last.p_bar;
    qb = last.q_bar;
    for (std::size_t k = 0; k < values.size(); ++k) {
      p[k] = values[k]->data[0];
      q[k] = values[k]->data[1];
      gamma[k] += 0.5 * kappa * (pb[k] - p[k]);
      mu[k] += 0.5 * kappa * (qb[k] - q[k]);
    }
    for (std::size_t e = 0; e < blocks.size(); ++e) {
      own_block[e] = last.border_blocks[e];
      recv_block[e] = decode_block(blocks[e]->data);
      du_re[e] += 0.5 * kappa * (own_block[e].real() - recv_block[e].real());
      du_im[e] += 0.5 * kappa * (own_block[e].imag() - recv_block[e].imag());
    }
  }
};

double customer_cost_of(const CostSpec& cost, const std::vector<double>& p) {
  double c = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k)
    c += cost.a_of(k) * p[k] * p[k] + cost.b_of(k) * p[k];
  return c;
}

SimulationResult simulate(const Scenario& s, const SimConfig& cfg,
                          std::vector<std::uint8_t>* stream) {
  if (cfg.slot < 0 || cfg.slot >= s.n_slots)
    throw ModelError("slot " + std::to_string(cfg.slot) + " outside 0.." +
                     std::to_string(s.n_slots - 1));
  const FeederModel truth = make_feeder(s, cfg.slot);
  const CostSpec cost = cost_of(s);
  const AdmmConfig admm = admm_of(s);
  const SolverSettings sub = cfg.subproblem.value_or(UtilityProblem::admm_subproblem_settings());
  const auto& houses = truth.houses();
  const std::size_t nh = houses.size();

  std::optional<std::vector<std::vector<int>>> raw_partition;
  std::optional<ClusterPartition> part;
  if (cfg.algo == Algo::Doid2) {
    if (cfg.partition)
      raw_partition = *cfg.partition;
    else if (s.clusters)
      raw_partition = *s.clusters;
    else
      throw ModelError("the cluster algorithm needs a partition");
    part = validate_partition(truth, *raw_partition);
  }

  SimulationResult result;
  result.config_hash = run_config_hash(s, cfg.algo, cfg.slot, raw_partition);

  Bus bus(part ? &*part : nullptr);
  const AgentId util{AgentKind::Utility, 0};

  std::vector<CustomerAgent> customers(nh);
  for (std::size_t k = 0; k < nh; ++k) {
    CustomerAgent& c = customers[k];
    c.id = AgentId{AgentKind::Customer, static_cast<std::uint32_t>(houses[k])};
    c.k = k;
    c.data = truth.house(houses[k]);
    c.a = cost.a_of(k);
    c.b = cost.b_of(k);
    c.kappa = admm.kappa;
  }

  // round 0: every customer reports its net load to its dispatcher
  std::vector<double> pnet(nh), qload(nh);
  for (std::size_t k = 0; k < nh; ++k) {
    AgentId to = util;
    if (part)
      to = AgentId{AgentKind::Cem,
                   static_cast<std::uint32_t>(part->cluster_of[houses[k]])};
    const Message& m = bus.post(customers[k].report(to));
    pnet[k] = m.data[0];
    qload[k] = m.data[1];
  }
  bus.end_round();

  const FeederModel net =
      feeder_from_reports(truth, pnet, qload, cfg.algo == Algo::Central);

  if (cfg.algo == Algo::Central) {
    result.dispatch = solve_central(net, cost, s.vmin_pu, s.vmax_pu, cfg.ratio_tol);
    result.converged = true;
  } else if (cfg.algo == Algo::Doid1) {
    UtilityAgent agent;
    agent.kappa = admm.kappa;
    agent.gamma.assign(nh, 0.0);
    agent.mu.assign(nh, 0.0);
    agent.pb.assign(nh, 0.0);
    agent.qb.assign(nh, 0.0);
    agent.p.assign(nh, 0.0);
    agent.q.assign(nh, 0.0);
    agent.problem.emplace(net, cost, s.vmin_pu, s.vmax_pu, admm.kappa, sub);

    for (int round = 1; round <= admm.max_iters; ++round) {
      const auto t0 = std::chrono::steady_clock::now();
      const UtilityProblem::Update u = agent.compute();
      std::vector<OperatingPoint> own(nh);
      par::for_each(nh, [&](std::size_t k) { own[k] = customers[k].compute(); });

      std::vector<const Message*> copies(nh), values(nh);
      for (std::size_t k = 0; k < nh; ++k)
        copies[k] = &bus.post(Message{util, customers[k].id,
                                      static_cast<std::uint32_t>(round),
                                      PayloadTag::SetpointCopy,
                                      {u.p_bar[k], u.q_bar[k]}});
      for (std::size_t k = 0; k < nh; ++k)
        values[k] = &bus.post(Message{customers[k].id, util,
                                      static_cast<std::uint32_t>(round),
                                      PayloadTag::SetpointValue,
                                      {own[k].P_c, own[k].Q_c}});
      agent.commit(values);
      for (std::size_t k = 0; k < nh; ++k) customers[k].commit(*copies[k], own[k]);

      // consensus trace straight from this round's message stream
      IterationRecord rec;
      rec.iteration = round;
      rec.p_err.resize(nh);
      rec.q_err.resize(nh);
      double residual = 0.0;
      for (std::size_t k = 0; k < nh; ++k) {
        rec.p_err[k] = std::abs(copies[k]->data[0] - values[k]->data[0]);
        rec.q_err[k] = std::abs(copies[k]->data[1] - values[k]->data[1]);
        residual += rec.p_err[k] * rec.p_err[k] + rec.q_err[k] * rec.q_err[k];
      }
      rec.residual = residual;
      rec.objective =
          objective_value(cost, u.loss_term, u.reg_term, customer_cost_of(cost, agent.p));
      rec.voltage_violation = u.voltage_violation;
      rec.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.history.push_back(std::move(rec));
      bus.end_round();
      if (residual <= admm.epsilon) {
        result.converged = true;
        break;
      }
      if (round == admm.max_iters) result.converged = false;
    }

    DispatchResult& r = result.dispatch;
    r.V = agent.last.V;
    r.rank_tightness = rank_ratio(r.V);
    if (r.rank_tightness <= cfg.ratio_tol) r.v = rank1_extract(r.V, cfg.ratio_tol);
    r.setpoints.resize(nh);
    r.regularizer_term = 0.0;
    for (std::size_t k = 0; k < nh; ++k) {
      r.setpoints[k] = OperatingPoint{agent.p[k], agent.q[k]};
      r.regularizer_term += std::hypot(agent.p[k], agent.q[k]);
    }
    r.loss_term = agent.last.loss_term;
    r.customer_term = customer_cost_of(cost, agent.p);
    r.objective = objective_value(cost, r.loss_term, r.regularizer_term, r.customer_term);
    r.iterations = static_cast<int>(result.history.size());
    r.residual = result.history.empty() ? 0.0 : result.history.back().residual;
    r.converged = result.converged;
  } else {
    const int nc = part->cluster_count();
    const std::size_t nb = part->borders.size();
    const auto losses = split_loss(truth, *part);

    std::vector<CemAgent> cems(nc);
    for (int a = 0; a < nc; ++a) {
      CemAgent& c = cems[a];
      c.cluster = a;
      c.kappa = admm.kappa;
      c.problem.emplace(net, cost, s.vmin_pu, s.vmax_pu, admm.kappa, *part, a, losses[a],
                        sub);
      for (int pos : c.problem->house_pos()) c.house_ks.push_back(pos);
      const std::size_t hn = c.house_ks.size();
      c.gamma.assign(hn, 0.0);
      c.mu.assign(hn, 0.0);
      c.pb.assign(hn, 0.0);
      c.qb.assign(hn, 0.0);
      c.p.assign(hn, 0.0);
      c.q.assign(hn, 0.0);
      for (int e : part->incident[a]) {
        const auto& edge = part->borders[e];
        c.neighbor.push_back(edge.a == a ? edge.j : edge.a);
        c.own_block.push_back(Eigen::Matrix2cd::Zero());
        c.recv_block.push_back(Eigen::Matrix2cd::Zero());
        c.du_re.push_back(Eigen::Matrix2d::Zero());
        c.du_im.push_back(Eigen::Matrix2d::Zero());
      }
    }
    // house node -> (cluster, slot) for routing values
    std::vector<int> cluster_of_house(nh), slot_of_house(nh);
    for (int a = 0; a < nc; ++a)
      for (std::size_t j = 0; j < cems[a].house_ks.size(); ++j) {
        cluster_of_house[cems[a].house_ks[j]] = a;
        slot_of_house[cems[a].house_ks[j]] = static_cast<int>(j);
      }
    // border id -> slot in each side's incident list
    std::vector<std::array<int, 2>> bslot(nb);
    for (std::size_t e = 0; e < nb; ++e) {
      const auto& inc_a = part->incident[part->borders[e].a];
      const auto& inc_j = part->incident[part->borders[e].j];
      bslot[e][0] = static_cast<int>(
          std::find(inc_a.begin(), inc_a.end(), static_cast<int>(e)) - inc_a.begin());
      bslot[e][1] = static_cast<int>(
          std::find(inc_j.begin(), inc_j.end(), static_cast<int>(e)) - inc_j.begin());
    }

    for (int round = 1; round <= admm.max_iters; ++round) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<CemProblem::Update> ups(nc);
      par::for_each(static_cast<std::size_t>(nc),
                    [&](std::size_t a) { ups[a] = cems[a].compute(); });
      std::vector<OperatingPoint> own(nh);
      par::for_each(nh, [&](std::size_t k) { own[k] = customers[k].compute(); });

      std::vector<const Message*> copies(nh), values(nh);
      for (int a = 0; a < nc; ++a) {
        const AgentId cem_id{AgentKind::Cem, static_cast<std::uint32_t>(a)};
        for (std::size_t j = 0; j < cems[a].house_ks.size(); ++j) {
          const std::size_t k = cems[a].house_ks[j];
          copies[k] = &bus.post(Message{cem_id, customers[k].id,
                                        static_cast<std::uint32_t>(round),
                                        PayloadTag::SetpointCopy,
                                        {ups[a].p_bar[j], ups[a].q_bar[j]}});
        }
      }
      std::vector<std::vector<const Message*>> inbound(nc);
      for (int a = 0; a < nc; ++a) inbound[a].resize(part->incident[a].size());
      for (std::size_t e = 0; e < nb; ++e) {
        const auto& edge = part->borders[e];
        const AgentId ida{AgentKind::Cem, static_cast<std::uint32_t>(edge.a)};
        const AgentId idj{AgentKind::Cem, static_cast<std::uint32_t>(edge.j)};
        const Message& fwd = bus.post(Message{
            ida, idj, static_cast<std::uint32_t>(round), PayloadTag::BorderBlock,
            encode_block(ups[edge.a].border_blocks[bslot[e][0]])});
        const Message& rev = bus.post(Message{
            idj, ida, static_cast<std::uint32_t>(round), PayloadTag::BorderBlock,
            encode_block(ups[edge.j].border_blocks[bslot[e][1]])});
        inbound[edge.j][bslot[e][1]] = &fwd;
        inbound[edge.a][bslot[e][0]] = &rev;
      }
      for (std::size_t k = 0; k < nh; ++k) {
        const AgentId cem_id{AgentKind::Cem,
                             static_cast<std::uint32_t>(cluster_of_house[k])};
        values[k] = &bus.post(Message{customers[k].id, cem_id,
                                      static_cast<std::uint32_t>(round),
                                      PayloadTag::SetpointValue,
                                      {own[k].P_c, own[k].Q_c}});
      }

      for (int a = 0; a < nc; ++a) {
        std::vector<const Message*> vals(cems[a].house_ks.size());
        for (std::size_t j = 0; j < vals.size(); ++j) vals[j] = values[cems[a].house_ks[j]];
        cems[a].commit(vals, inbound[a]);
      }
      for (std::size_t k = 0; k < nh; ++k) customers[k].commit(*copies[k], own[k]);

      IterationRecord rec;
      rec.iteration = round;
      rec.p_err.resize(nh);
      rec.q_err.resize(nh);
      rec.border_err.resize(nb);
      double residual = 0.0;
      for (std::size_t k = 0; k < nh; ++k) {
        rec.p_err[k] = std::abs(copies[k]->data[0] - values[k]->data[0]);
        rec.q_err[k] = std::abs(copies[k]->data[1] - values[k]->data[1]);
        residual += rec.p_err[k] * rec.p_err[k] + rec.q_err[k] * rec.q_err[k];
      }
      for (std::size_t e = 0; e < nb; ++e) {
        const Eigen::Matrix2cd gap =
            decode_block(inbound[part->borders[e].j][bslot[e][1]]->data) -
            decode_block(inbound[part->borders[e].a][bslot[e][0]]->data);
        rec.border_err[e] = gap.norm();
        residual += gap.squaredNorm();
      }
      double loss = 0.0, reg = 0.0, violation = 0.0;
      std::vector<double> pvals(nh);
      for (std::size_t k = 0; k < nh; ++k) pvals[k] = values[k]->data[0];
      for (const auto& u : ups) {
        loss += u.loss_term;
        reg += u.reg_term;
        violation = std::max(violation, u.voltage_violation);
      }
      rec.residual = residual;
      rec.objective = objective_value(cost, loss, reg, customer_cost_of(cost, pvals));
      rec.voltage_violation = violation;
      rec.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.history.push_back(std::move(rec));
      bus.end_round();
      if (residual <= admm.epsilon) {
        result.converged = true;
        break;
      }
      if (round == admm.max_iters) result.converged = false;
    }

    DispatchResult& r = result.dispatch;
    std::vector<Eigen::MatrixXcd> cluster_V(nc);
    double worst = 0.0;
    for (int a = 0; a < nc; ++a) {
      cluster_V[a] = cems[a].last.V;
      worst = std::max(worst, rank_ratio(cluster_V[a]));
    }
    r.rank_tightness = worst;
    if (worst <= cfg.ratio_tol) {
      try {
        r.v = reassemble_voltages(*part, cluster_V, cfg.ratio_tol);
        r.V = r.v * r.v.adjoint();
      } catch (const Error&) {
        r.v.resize(0);
        r.V.resize(0, 0);
      }
    }
    r.setpoints.resize(nh);
    r.loss_term = 0.0;
    r.regularizer_term = 0.0;
    std::vector<double> pvals(nh);
    for (std::size_t k = 0; k < nh; ++k) {
      const int a = cluster_of_house[k];
      const int j = slot_of_house[k];
      r.setpoints[k] = OperatingPoint{cems[a].p[j], cems[a].q[j]};
      pvals[k] = cems[a].p[j];
      r.regularizer_term += std::hypot(cems[a].p[j], cems[a].q[j]);
    }
    for (int a = 0; a < nc; ++a) r.loss_term += cems[a].last.loss_term;
    r.customer_term = customer_cost_of(cost, pvals);
    r.objective = objective_value(cost, r.loss_term, r.regularizer_term, r.customer_term);
    r.iterations = static_cast<int>(result.history.size());
    r.residual = result.history.empty() ? 0.0 : result.history.back().residual;
    r.converged = result.converged;
  }

  result.messages_per_round = bus.counts();
  if (stream) *stream = encode_stream(bus.log(), result.config_hash);
  return result;
}

}  // namespace

void validate_message(const Message& m, const ClusterPartition* part) {
  const auto fail = [&](const std::string& why) {
    throw ProtocolError("round " + std::to_string(m.round) + ": " + describe(m.from) +
                        " may not send this payload to " + describe(m.to) + " (" + why + ")");
  };
  const auto cem_serves = [&](std::uint32_t cluster, std::uint32_t house_node) {
    return part && house_node < part->cluster_of.size() &&
           part->cluster_of[house_node] == static_cast<int>(cluster);
  };
  const auto cem_adjacent = [&](std::uint32_t a, std::uint32_t j) {
    if (!part) return false;
    for (const auto& e : part->borders) {
      const auto lo = static_cast<std::uint32_t>(std::min(e.a, e.j));
      const auto hi = static_cast<std::uint32_t>(std::max(e.a, e.j));
      if (lo == std::min(a, j) && hi == std::max(a, j)) return true;
    }
    return false;
  };

  const std::size_t want = (m.tag == PayloadTag::BorderBlock) ? 8 : 2;
  if (m.data.size() != want) fail("wrong payload size");
  if (m.from.kind == AgentKind::Customer && m.to.kind == AgentKind::Customer)
    fail("customers never talk to each other");
  switch (m.tag) {
    case PayloadTag::NetLoadReport:
    case PayloadTag::SetpointValue:
      if (m.from.kind != AgentKind::Customer) fail("only customers report");
      if (m.to.kind == AgentKind::Cem) {
        if (!cem_serves(m.to.id, m.from.id)) fail("wrong cluster");
      } else if (m.to.kind != AgentKind::Utility) {
        fail("reports go up to the dispatcher");
      }
      break;
    case PayloadTag::SetpointCopy:
      if (m.to.kind != AgentKind::Customer) fail("copies go down to customers");
      if (m.from.kind == AgentKind::Cem) {
        if (!cem_serves(m.from.id, m.to.id)) fail("wrong cluster");
      } else if (m.from.kind != AgentKind::Utility) {
        fail("copies come from the dispatcher");
      }
      break;
    case PayloadTag::BorderBlock:
      if (m.from.kind != AgentKind::Cem || m.to.kind != AgentKind::Cem)
        fail("border blocks are CEM to CEM");
      if (!cem_adjacent(m.from.id, m.to.id)) fail("clusters are not tree neighbors");
      break;
  }
}

SimulationResult run_simulation(const Scenario& s, const SimConfig& cfg) {
  if (cfg.log_path.empty()) return simulate(s, cfg, nullptr);
  std::vector<std::uint8_t> bytes;
  SimulationResult result = simulate(s, cfg, &bytes);
  std::ofstream out(cfg.log_path, std::ios::binary);
  if (!out) throw FormatError("cannot open log file " + cfg.log_path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to log file " + cfg.log_path);
  return result;
}

SimulationResult inject_message_log(const Scenario& s, const SimConfig& cfg,
                                    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open log file " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw FormatError("log too short to hold a header");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("bad log magic");

  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + 8, 8);
  std::optional<std::vector<std::vector<int>>> raw_partition;
  if (cfg.algo == Algo::Doid2) {
    if (cfg.partition)
      raw_partition = *cfg.partition;
    else if (s.clusters)
      raw_partition = *s.clusters;
  }
  const std::uint64_t expected = run_config_hash(s, cfg.algo, cfg.slot, raw_partition);
  if (stored != expected) throw FormatError("config hash mismatch: log does not belong here");

  // structural walk before the expensive re-run
  std::size_t off = 16;
  while (off < bytes.size()) {
    if (bytes.size() - off < 4)
      throw FormatError("truncated log at offset " + std::to_string(off));
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + off, 4);
    if (len < 16 || (len - 16) % 8 != 0)
      throw FormatError("corrupt record length at offset " + std::to_string(off));
    if (off + 4 + len > bytes.size())
      throw FormatError("truncated log at offset " + std::to_string(off));
    const std::uint8_t* body = bytes.data() + off + 4;
    if (body[4] > 2 || body[9] > 2)
      throw FormatError("corrupt agent kind at offset " + std::to_string(off));
    if (body[14] > 3) throw FormatError("corrupt payload tag at offset " + std::to_string(off));
    if (body[15] != (len - 16) / 8)
      throw FormatError("record count disagrees with length at offset " + std::to_string(off));
    off += 4 + len;
  }

  SimConfig rerun = cfg;
  rerun.log_path.clear();
  std::vector<std::uint8_t> fresh;
  SimulationResult result = simulate(s, rerun, &fresh);
  const std::size_t n = std::min(fresh.size(), bytes.size());
  for (std::size_t i = 0; i < n; ++i)
    if (fresh[i] != bytes[i])
      throw FormatError("replay diverged at offset " + std::to_string(i));
  if (fresh.size() != bytes.size())
    throw FormatError(bytes.size() < fresh.size()
                          ? "truncated log at offset " + std::to_string(bytes.size())
                          : "trailing bytes at offset " + std::to_string(fresh.size()));
  return result;
}

}  // namespace oid
