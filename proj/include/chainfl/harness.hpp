#pragma once

// Scenario orchestration: builds one data-identical world per (config, seed)
// and runs ChainFL, FedAvg or AsynFL over it, producing metrics rows, a
// JSON-lines trace and (for ChainFL) a DAG export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainfl/config.hpp"
#include "chainfl/device.hpp"
#include "chainfl/error.hpp"
#include "chainfl/fl_task.hpp"
#include "chainfl/mainchain.hpp"
#include "chainfl/model_math.hpp"
#include "chainfl/rng.hpp"
#include "chainfl/simnet.hpp"
#include "chainfl/store.hpp"
#include "chainfl/subchain.hpp"

namespace chainfl {

struct MetricsRow {
  Paradigm paradigm = Paradigm::chainfl;
  std::uint64_t seed = 0;
  int global_epoch = 0;
  std::uint64_t gradients = 0;
  SimTime sim_time = 0.0;
  MetricKind metric_kind = MetricKind::loss;
  double metric_value = 0.0;
  double loss = 0.0;
};

struct RunResult {
  Paradigm paradigm = Paradigm::chainfl;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
  ParamVector final_model;
  std::uint64_t gradients = 0;
  std::uint64_t trainings = 0;
  SimTime sim_time = 0.0;
  bool stopped = false;  // termination condition reached
  std::vector<std::string> errors;
  Trace trace;
  std::string dag_export;
  std::vector<ContentHash> planted;
  std::vector<int> completed_iterations;  // per shard
};

// ---------------------------------------------------------------------------
// World

struct World {
  ScenarioConfig cfg;
  SyntheticTask task;
  TaskSpec spec;
  std::vector<DeviceAgent> devices;
};

inline SimTime default_round_timeout(const ScenarioConfig& cfg) {
  // Honest turnaround: compute plus the model download and the upload hop.
  const SimTime turnaround = static_cast<SimTime>(cfg.E) * cfg.compute_delay + 2.0 * cfg.latency.intra_shard.hi;
  return 3.0 * turnaround;
}

inline World build_world(const ScenarioConfig& cfg) {
  World w;
  w.cfg = cfg;
  const auto& t = cfg.task;
  const PartitionScheme scheme = t.partition.value_or(PartitionScheme::iid_random);
  if (t.kind == TaskKind::regression) {
    w.task = generate_synthetic_regression(cfg.seed, t.n_devices, t.samples_per_device, t.dim, t.noise_sd, scheme);
  } else {
    w.task = generate_synthetic_classification(cfg.seed, t.n_devices, t.samples_per_device, t.dim, t.n_classes,
                                               t.separation, scheme);
  }
  w.spec = w.task.spec;
  w.spec.hp = HyperParams{cfg.mu, cfg.E, cfg.B};
  w.spec.rounds_per_iteration = cfg.R;
  w.spec.eta = cfg.eta;
  w.spec.lambda = cfg.lambda;
  w.spec.a_tau_policy = cfg.a_tau;
  w.spec.termination = cfg.termination;
  w.spec.quorum_fraction = cfg.quorum_fraction;
  w.spec.round_timeout = cfg.round_timeout.value_or(default_round_timeout(cfg));
  w.spec.test_set_ref = dataset_hash(w.task.test);
  w.spec.validate();

  const std::size_t n = t.n_devices;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng roles = make_stream(cfg.seed, "harness.roles");
  std::shuffle(order.begin(), order.end(), roles);
  const auto n_mal = static_cast<std::size_t>(std::llround(cfg.M_d * static_cast<double>(n)));
  const auto n_str = std::min(n - n_mal, static_cast<std::size_t>(std::llround(cfg.straggler_ratio * static_cast<double>(n))));

  w.devices.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& d = w.devices[i];
    d.profile.device_id = i;
    d.profile.dataset = w.task.plan.assignments[i];
    d.profile.compute_delay = cfg.compute_delay;
  }
  for (std::size_t k = 0; k < n_mal; ++k) w.devices[order[k]].behavior = Malicious{cfg.attack};
  for (std::size_t k = n_mal; k < n_mal + n_str; ++k) w.devices[order[k]].behavior = Straggler{cfg.straggler_delay};
  return w;
}

// Metric reported in rows: the termination metric when one is set,
// otherwise accuracy for classifiers and mean loss for regressors.
inline MetricKind row_metric_kind(const ScenarioConfig& cfg) {
  if (const auto* m = std::get_if<MetricThreshold>(&cfg.termination)) return m->kind;
  return cfg.task.kind == TaskKind::classification ? MetricKind::accuracy : MetricKind::loss;
}

inline MetricsRow evaluate_row(const World& w, const ParamVector& model, int epoch, std::uint64_t gradients, SimTime t) {
  MetricsRow row;
  row.paradigm = w.cfg.paradigm;
  row.seed = w.cfg.seed;
  row.global_epoch = epoch;
  row.gradients = gradients;
  row.sim_time = t;
  row.metric_kind = row_metric_kind(w.cfg);
  row.loss = evaluate_loss(model, w.task.test, w.spec.loss_kind).value;
  switch (row.metric_kind) {
    case MetricKind::accuracy: row.metric_value = accuracy(model, w.task.test).value; break;
    case MetricKind::loss: row.metric_value = row.loss; break;
    // Cross-entropy is in nats; perplexity is 2 to the entropy in bits.
    case MetricKind::perplexity: row.metric_value = std::exp2(row.loss / std::log(2.0)); break;
  }
  return row;
}

inline bool should_stop(const World& w, const MetricsRow& row) {
  if (check_stop(w.spec.termination, MetricValue{row.metric_kind, row.metric_value}, row.global_epoch)) return true;
  return w.cfg.gradient_budget && row.gradients >= *w.cfg.gradient_budget;
}

inline Simulator::Options sim_options(const ScenarioConfig& cfg) {
  Simulator::Options o;
  o.seed = cfg.seed;
  o.latency = cfg.latency;
  o.wall_budget_seconds = cfg.wall_budget_seconds;
  return o;
}

inline nlohmann::json short_ids(const std::vector<ContentHash>& ids) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& id : ids) out.push_back(id.hex().substr(0, 16));
  return out;
}

// ---------------------------------------------------------------------------
// ChainFL

inline RunResult run_chainfl(const ScenarioConfig& cfg_in) {
  ScenarioConfig cfg = cfg_in;
  cfg.paradigm = Paradigm::chainfl;
  World w = build_world(cfg);
  Simulator sim(sim_options(cfg));
  MemoryStore store;
  RunResult res;
  res.paradigm = Paradigm::chainfl;
  res.seed = cfg.seed;

  const ContentHash init_hash = store.put_params(w.spec.init_params);
  DagLedger ledger({cfg.F.value_or(std::numeric_limits<SimTime>::infinity()), cfg.freshness_policy});
  ledger.create_genesis(w.spec, w.spec.test_set_ref, init_hash, 0.0);
  sim.trace().record(0.0, "main", "genesis", {{"tx_id", ledger.genesis_id().hex().substr(0, 16)}});

  std::vector<Rng> tip_rngs;
  for (int s = 0; s < cfg.M; ++s) tip_rngs.push_back(make_stream(cfg.seed, "mainchain.tips", static_cast<std::uint64_t>(s)));
  Rng plant_rng = make_stream(cfg.seed, "harness.planted");

  int submissions = 0;
  int requests = 0;
  int epoch = 0;
  bool stop_decided = false;
  std::vector<SimTime> last_submit(static_cast<std::size_t>(cfg.M), 0.0);
  std::vector<SimTime> durations;
  std::vector<std::unique_ptr<Shard>> shards;

  auto schedule_prune = [&](SimTime after) {
    if (!std::isfinite(after)) return;
    sim.timer("main", after, "prune", [&] {
      const auto pruned = ledger.prune_expired(sim.now());
      if (!pruned.empty()) sim.trace().record(sim.now(), "main", "pruned", {{"tx_ids", short_ids(pruned)}});
    });
  };

  auto global_epoch = [&] {
    ++epoch;
    const auto gm = aggregate_global(ledger, cfg.lambda_global(), sim.now(), w.task.test, w.spec.loss_kind, store);
    const MetricsRow row = evaluate_row(w, gm.w_bim, epoch, res.gradients, sim.now());
    res.rows.push_back(row);
    res.final_model = gm.w_bim;
    sim.trace().record(sim.now(), "main", "global_epoch",
                       {{"epoch", epoch}, {"tips", short_ids(gm.approve_set)}, {"metric", row.metric_value},
                        {"loss", row.loss}, {"gradients", row.gradients}});
    if (should_stop(w, row)) {
      stop_decided = true;
      res.stopped = true;
      sim.trace().record(sim.now(), "main", "stop", {{"epoch", epoch}});
      for (auto& sh : shards) {
        for (int i = 0; i < cfg.b; ++i) {
          Shard* target = sh.get();
          sim.send("main", target->node_name(i), Link::shard_to_mainchain, "stop", [target, i] { target->deliver_stop(i); });
        }
      }
    }
  };

  auto plant = [&] {
    std::normal_distribution<double> noise(0.0, cfg.planted.sd);
    for (int k = 0; k < cfg.planted.count; ++k) {
      ParamVector bad(w.spec.model_dim);
      for (std::size_t i = 0; i < bad.dim(); ++i) bad[i] = noise(plant_rng);
      MainchainTx tx;
      tx.sender_shard_id = "planted" + std::to_string(k);
      tx.task_id = w.spec.task_id_root;
      tx.params_hash = store.put_params(bad);
      tx.approves = {ledger.genesis_id()};
      tx.timestamp = sim.now();
      const auto& stored = ledger.submit_tx(std::move(tx), sim.now());
      res.planted.push_back(stored.tx_id);
      sim.trace().record(sim.now(), "main", "planted", {{"tx_id", stored.tx_id.hex().substr(0, 16)}});
    }
    schedule_prune(ledger.options().freshness);
  };

  auto handle_request = [&](Shard& shard, int node, std::uint64_t term, std::optional<MainchainTx> submission) {
    const auto s = static_cast<std::size_t>(shard.id());
    if (submission) {
      // Approvals of tips pruned since they were read are dropped.
      std::vector<ContentHash> kept;
      for (const auto& a : submission->approves) {
        if (ledger.record(a).status != TipStatus::pruned) kept.push_back(a);
      }
      if (kept.empty()) {
        if (auto la = ledger.latest_approved()) kept.push_back(*la);
      }
      submission->approves = kept;
      const auto& stored = ledger.submit_tx(*submission, sim.now());
      sim.trace().record(sim.now(), "main", "tx_submitted",
                         {{"tx_id", stored.tx_id.hex().substr(0, 16)}, {"sender", stored.sender_shard_id},
                          {"approves", short_ids(stored.approves)}});
      durations.push_back(sim.now() - last_submit[s]);
      last_submit[s] = sim.now();
      if (!cfg.F) {
        std::vector<SimTime> d = durations;
        std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
        ledger.set_freshness(4.0 * d[d.size() / 2]);
      }
      schedule_prune(ledger.options().freshness);
      ++submissions;
      if (!stop_decided && submissions % cfg.M == 0) global_epoch();
    }
    BimReply reply;
    if (stop_decided) {
      reply.stop = true;
    } else if (!submission && shard.completed_iterations() == 0) {
      reply.w_bim_hash = ledger.tx(ledger.take_genesis(sim.now())).params_hash;
      reply.approve_set = {ledger.genesis_id()};
      sim.trace().record(sim.now(), "main", "tips_requested",
                         {{"shard", shard.id()}, {"tips", short_ids(reply.approve_set)}, {"genesis", true}});
    } else {
      const auto tips = ledger.request_tips(cfg.eta, sim.now(), tip_rngs[s]);
      const auto bim = build_basic_iteration_model(ledger, tips, cfg.lambda, w.task.test, w.spec.loss_kind, store);
      reply.w_bim_hash = store.put_params(bim.w_bim);
      reply.approve_set = bim.approve_set;
      nlohmann::json scores = nlohmann::json::array();
      for (const auto& [id, sc] : bim.scores) scores.push_back({id.hex().substr(0, 16), sc});
      sim.trace().record(sim.now(), "main", "tips_requested",
                         {{"shard", shard.id()}, {"tips", short_ids(tips)}, {"approve_set", short_ids(bim.approve_set)},
                          {"scores", scores}});
    }
    ++requests;
    if (cfg.planted.count > 0 && requests == cfg.planted.after_request) plant();
    Shard* target = &shard;
    sim.send("main", shard.node_name(node), Link::shard_to_mainchain, "bim_reply",
             [target, node, term, reply] { target->deliver_bim(node, term, reply); });
  };

  Shard::Hooks hooks;
  hooks.request_bim = [&](Shard& shard, int node, std::optional<MainchainTx> submission) {
    const auto term = shard.nodes()[static_cast<std::size_t>(node)].term;
    Shard* target = &shard;
    sim.send(shard.node_name(node), "main", Link::shard_to_mainchain, "bim_request",
             [&handle_request, target, node, term, sub = std::move(submission)] { handle_request(*target, node, term, sub); });
  };
  hooks.on_training = [&](const DeviceAgent&, int g) {
    res.gradients += static_cast<std::uint64_t>(g);
    ++res.trainings;
  };
  hooks.on_failure = [&](Shard& shard, const std::string& why) {
    res.errors.push_back(shard.name() + ": iteration error at t=" + std::to_string(sim.now()) + ": " + why +
                         " (trace line " + std::to_string(sim.trace().lines().size()) + ")");
  };

  std::vector<std::vector<DeviceAgent*>> pools(static_cast<std::size_t>(cfg.M));
  for (auto& d : w.devices) pools[d.profile.device_id % static_cast<std::uint64_t>(cfg.M)].push_back(&d);
  for (int s = 0; s < cfg.M; ++s) {
    shards.push_back(std::make_unique<Shard>(s, cfg.shard, w.spec, w.task.test, pools[static_cast<std::size_t>(s)], sim,
                                             store, hooks));
  }
  sim.inject_fault(cfg.faults);
  for (auto& sh : shards) sh->start();

  sim.run_until(
      [&] {
        return std::all_of(shards.begin(), shards.end(), [](const auto& sh) { return sh->stopped() || sh->failed(); });
      },
      cfg.max_sim_time);

  res.sim_time = sim.now();
  for (auto& sh : shards) res.completed_iterations.push_back(sh->completed_iterations());
  if (res.final_model.dim() == 0) res.final_model = w.spec.init_params;
  if (const auto bad = ledger.check_invariants(); !bad.empty()) res.errors.push_back("DAG invariant violated: " + bad);
  std::ostringstream dag;
  ledger.export_dag(dag);
  res.dag_export = dag.str();
  res.trace = sim.trace();
  return res;
}

// ---------------------------------------------------------------------------
// FedAvg: synchronous rounds over the whole pool, no validation.

inline RunResult run_fedavg(const ScenarioConfig& cfg_in) {
  ScenarioConfig cfg = cfg_in;
  cfg.paradigm = Paradigm::fedavg;
  World w = build_world(cfg);
  MemoryStore store;
  Trace trace;
  RunResult res;
  res.paradigm = Paradigm::fedavg;
  res.seed = cfg.seed;

  // Shares shard 0's selection stream.
  Rng select_rng = make_stream(cfg.seed, "subchain.select", 0);
  Rng walk_rng = make_stream(cfg.seed, "device.status", 0);
  ParamVector global = w.spec.init_params;
  SimTime now = 0.0;
  const auto max_epochs = std::get_if<MaxGlobalEpochs>(&cfg.termination);

  for (int epoch = 1;; ++epoch) {
    std::vector<StatusRecord> statuses;
    for (auto& d : w.devices) {
      walk_status(d.profile, cfg.shard.status_walk_sd, walk_rng);
      statuses.push_back(report_status(d.profile, now));
    }
    auto chosen = select_devices(statuses, cfg.S_d, cfg.shard.battery_min, cfg.shard.network_min, select_rng);
    if (!chosen) {
      res.errors.push_back("fedavg: fewer than S_d eligible devices at epoch " + std::to_string(epoch));
      break;
    }
    const ContentHash global_hash = store.put_params(global);
    const RoundTicket ticket{w.spec.task_id_root, epoch - 1, 0, 0};
    std::vector<std::pair<std::string, WeightedModel>> updates;
    SimTime slowest = 0.0;
    for (auto id : *chosen) {
      auto& agent = w.devices[id];
      Rng rng = training_stream(cfg.seed, agent);
      ++agent.trainings;
      auto up = run_local_update(agent.profile, agent.behavior, global, w.spec, ticket, store, rng, now);
      res.gradients += static_cast<std::uint64_t>(up.gradients);
      ++res.trainings;
      slowest = std::max(slowest, up.delivery_delay);
      updates.emplace_back(up.tx.sender_id, WeightedModel{store.get_params(up.tx.params_hash), up.tx.dataset_size});
    }
    std::sort(updates.begin(), updates.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<WeightedModel> models;
    for (auto& [_, m] : updates) models.push_back(std::move(m));
    global = weighted_aggregate(models);
    now += slowest + 2.0 * cfg.latency.intra_shard.hi;
    const MetricsRow row = evaluate_row(w, global, epoch, res.gradients, now);
    res.rows.push_back(row);
    trace.record(now, "server", "global_epoch",
                 {{"epoch", epoch}, {"from", global_hash.hex().substr(0, 16)}, {"devices", *chosen},
                  {"metric", row.metric_value}, {"loss", row.loss}});
    if (should_stop(w, row)) {
      res.stopped = true;
      break;
    }
    if (now > cfg.max_sim_time || (max_epochs && epoch >= max_epochs->n)) break;
  }
  res.final_model = global;
  res.sim_time = now;
  res.trace = std::move(trace);
  return res;
}

// ---------------------------------------------------------------------------
// AsynFL: S_d concurrent workers; each arrival is averaged in at one half.

inline RunResult run_asynfl(const ScenarioConfig& cfg_in) {
  ScenarioConfig cfg = cfg_in;
  cfg.paradigm = Paradigm::asynfl;
  World w = build_world(cfg);
  Simulator sim(sim_options(cfg));
  MemoryStore store;
  RunResult res;
  res.paradigm = Paradigm::asynfl;
  res.seed = cfg.seed;

  Rng select_rng = make_stream(cfg.seed, "subchain.select", 0);
  Rng pick_rng = make_stream(cfg.seed, "asynfl.pick");
  ParamVector global = w.spec.init_params;
  std::vector<bool> busy(w.devices.size(), false);
  int arrivals = 0;
  bool stop = false;
  const std::string server = "server";

  std::function<void(std::size_t)> dispatch = [&](std::size_t id) {
    busy[id] = true;
    DeviceAgent* agent = &w.devices[id];
    const ParamVector snapshot = global;
    const int version = arrivals;
    sim.send(server, agent->profile.name(), Link::intra_shard, "model", [&, agent, snapshot, version] {
      Rng rng = training_stream(cfg.seed, *agent);
      ++agent->trainings;
      const RoundTicket ticket{w.spec.task_id_root, version, 0, 0};
      auto up = run_local_update(agent->profile, agent->behavior, snapshot, w.spec, ticket, store, rng, sim.now());
      const std::string dev = agent->profile.name();
      sim.timer(dev, up.delivery_delay, "trained", [&, agent, dev, up, version] {
        res.gradients += static_cast<std::uint64_t>(up.gradients);
        ++res.trainings;
        sim.send(dev, server, Link::intra_shard, "local_model", [&, agent, up, version] {
          if (stop) return;
          global = asynfl_update(global, store.get_params(up.tx.params_hash));
          ++arrivals;
          busy[agent->profile.device_id] = false;
          const MetricsRow row = evaluate_row(w, global, arrivals, res.gradients, sim.now());
          res.rows.push_back(row);
          sim.trace().record(sim.now(), server, "arrival",
                             {{"epoch", arrivals}, {"device", agent->profile.device_id}, {"trained_on", version},
                              {"metric", row.metric_value}, {"loss", row.loss}});
          if (should_stop(w, row)) {
            stop = true;
            res.stopped = true;
            return;
          }
          std::vector<std::size_t> idle;
          for (std::size_t k = 0; k < busy.size(); ++k) {
            if (!busy[k] && w.devices[k].profile.dataset.size() > 0) idle.push_back(k);
          }
          if (idle.empty()) return;
          dispatch(idle[std::uniform_int_distribution<std::size_t>(0, idle.size() - 1)(pick_rng)]);
        });
      });
    });
  };

  std::vector<StatusRecord> statuses;
  for (auto& d : w.devices) statuses.push_back(report_status(d.profile, 0.0));
  auto first = select_devices(statuses, cfg.S_d, cfg.shard.battery_min, cfg.shard.network_min, select_rng);
  if (!first) {
    res.errors.push_back("asynfl: fewer than S_d eligible devices");
  } else {
    for (auto id : *first) dispatch(id);
  }
  const auto max_epochs = std::get_if<MaxGlobalEpochs>(&cfg.termination);
  sim.run_until([&] { return stop || (max_epochs && arrivals >= max_epochs->n); }, cfg.max_sim_time);
  res.final_model = global;
  res.sim_time = sim.now();
  res.trace = sim.trace();
  return res;
}

inline RunResult run_scenario(const ScenarioConfig& cfg) {
  switch (cfg.paradigm) {
    case Paradigm::chainfl: return run_chainfl(cfg);
    case Paradigm::fedavg: return run_fedavg(cfg);
    case Paradigm::asynfl: return run_asynfl(cfg);
  }
  throw error(errc::config, "unknown paradigm");
}

// ---------------------------------------------------------------------------
// Output

inline constexpr const char* kMetricsHeader = "paradigm,seed,global_epoch,gradients,sim_time,metric_kind,metric_value,loss";

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_metrics(const std::vector<MetricsRow>& rows, std::ostream& out) {
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    out << to_string(r.paradigm) << ',' << r.seed << ',' << r.global_epoch << ',' << r.gradients << ','
        << format_double(r.sim_time) << ',' << to_string(r.metric_kind) << ',' << format_double(r.metric_value) << ','
        << format_double(r.loss) << '\n';
  }
}

inline void write_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw error(errc::io, "cannot write " + path.string());
  body(out);
  if (!out) throw error(errc::io, "write failed for " + path.string());
}

inline void emit_metrics(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  write_file(path, [&](std::ostream& o) { write_metrics(rows, o); });
}

inline nlohmann::ordered_json summarize(const RunResult& r) {
  nlohmann::ordered_json j;
  j["paradigm"] = to_string(r.paradigm);
  j["seed"] = r.seed;
  j["global_epochs"] = r.rows.empty() ? 0 : r.rows.back().global_epoch;
  j["gradients"] = r.gradients;
  j["trainings"] = r.trainings;
  j["sim_time"] = r.sim_time;
  j["stopped"] = r.stopped;
  if (!r.rows.empty()) {
    j["final_metric_kind"] = to_string(r.rows.back().metric_kind);
    j["final_metric"] = r.rows.back().metric_value;
    j["final_loss"] = r.rows.back().loss;
  }
  j["completed_iterations"] = r.completed_iterations;
  j["errors"] = r.errors;
  return j;
}

// Writes metrics.csv, trace.jsonl, summary.json and (ChainFL) dag.jsonl.
inline void write_run_outputs(const RunResult& r, const std::filesystem::path& dir) {
  emit_metrics(r.rows, dir / "metrics.csv");
  write_file(dir / "trace.jsonl", [&](std::ostream& o) { r.trace.write(o); });
  if (r.paradigm == Paradigm::chainfl) write_file(dir / "dag.jsonl", [&](std::ostream& o) { o << r.dag_export; });
  write_file(dir / "summary.json", [&](std::ostream& o) { o << summarize(r).dump(2) << '\n'; });
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepAxis {
  std::string key;  // top-level or dotted config key, e.g. "M_d" or "task.noise_sd"
  std::vector<nlohmann::json> values;
};

struct SweepPoint {
  std::string label;
  ScenarioConfig cfg;
};

inline void set_dotted(nlohmann::json& doc, const std::string& key, const nlohmann::json& value) {
  nlohmann::json* cur = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      return;
    }
    cur = &(*cur)[part];
    start = dot + 1;
  }
}

inline std::string value_label(const nlohmann::json& v) {
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  for (char& c : s) {
    if (c == '/' || c == ' ' || c == ',' || c == '"') c = '_';
  }
  return s;
}

// Cartesian product of the axes for every paradigm; each point re-validated.
inline std::vector<SweepPoint> expand_sweep(const nlohmann::json& base, const std::vector<SweepAxis>& axes,
                                            const std::vector<Paradigm>& paradigms) {
  std::vector<std::pair<std::string, nlohmann::json>> combos{{"", base}};
  for (const auto& axis : axes) {
    if (axis.values.empty()) throw error(errc::config, "sweep axis '" + axis.key + "' has no values");
    std::vector<std::pair<std::string, nlohmann::json>> next;
    for (const auto& [label, doc] : combos) {
      for (const auto& v : axis.values) {
        nlohmann::json d = doc;
        set_dotted(d, axis.key, v);
        next.emplace_back(label + (label.empty() ? "" : "__") + axis.key + "=" + value_label(v), std::move(d));
      }
    }
    combos = std::move(next);
  }
  std::vector<SweepPoint> out;
  for (auto p : paradigms) {
    for (const auto& [label, doc] : combos) {
      nlohmann::json d = doc;
      d["paradigm"] = to_string(p);
      out.push_back({std::string(to_string(p)) + (label.empty() ? "" : "__" + label), parse_scenario(d)});
    }
  }
  return out;
}

// Runs every point (up to `jobs` at once), writing <label>.csv per point and
// summary.csv with all rows prefixed by their label.
inline std::vector<RunResult> run_sweep(const std::vector<SweepPoint>& points, const std::filesystem::path& out_dir,
                                        int jobs = 1) {
  std::vector<RunResult> results(points.size());
  std::vector<std::string> failures(points.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= points.size()) return;
        i = next++;
      }
      try {
        results[i] = run_scenario(points[i].cfg);
      } catch (const std::exception& e) {
        failures[i] = points[i].label + ": " + e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int k = 0; k < std::max(1, jobs); ++k) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& f : failures) {
    if (!f.empty()) throw error(errc::iteration_failed, f);
  }
  for (std::size_t i = 0; i < points.size(); ++i) emit_metrics(results[i].rows, out_dir / (points[i].label + ".csv"));
  write_file(out_dir / "summary.csv", [&](std::ostream& o) {
    o << "run," << kMetricsHeader << '\n';
    for (std::size_t i = 0; i < points.size(); ++i) {
      std::ostringstream body;
      write_metrics(results[i].rows, body);
      std::istringstream lines(body.str());
      std::string line;
      std::getline(lines, line);  // per-run header
      while (std::getline(lines, line)) o << points[i].label << ',' << line << '\n';
    }
  });
  return results;
}

}  // namespace chainfl
