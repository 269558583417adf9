#pragma once

// Scenario configuration: one JSON document per experiment. Unknown keys
// are rejected with the dotted path of the offending field.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainfl/device.hpp"
#include "chainfl/error.hpp"
#include "chainfl/fl_task.hpp"
#include "chainfl/mainchain.hpp"
#include "chainfl/simnet.hpp"
#include "chainfl/subchain.hpp"

namespace chainfl {

enum class Paradigm { chainfl, fedavg, asynfl };

inline const char* to_string(Paradigm p) {
  switch (p) {
    case Paradigm::chainfl: return "chainfl";
    case Paradigm::fedavg: return "fedavg";
    case Paradigm::asynfl: return "asynfl";
  }
  return "unknown";
}

inline Paradigm paradigm_from_string(const std::string& s) {
  if (s == "chainfl" || s == "ChainFL") return Paradigm::chainfl;
  if (s == "fedavg" || s == "FedAvg") return Paradigm::fedavg;
  if (s == "asynfl" || s == "AsynFL") return Paradigm::asynfl;
  throw error(errc::config, "paradigm: unknown value '" + s + "' (expected chainfl, fedavg or asynfl)");
}

enum class TaskKind { regression, classification };

struct TaskDescriptor {
  TaskKind kind = TaskKind::regression;
  std::size_t n_devices = 60;
  std::size_t samples_per_device = 20;
  std::size_t dim = 5;
  std::size_t n_classes = 3;
  double noise_sd = 0.0;
  double separation = 3.0;
  std::optional<PartitionScheme> partition;  // defaults per task kind
};

// Low-accuracy mainchain transactions injected right after the k-th tip request.
struct PlantedSpec {
  int count = 0;
  int after_request = 1;
  double sd = 10.0;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  Paradigm paradigm = Paradigm::chainfl;
  TaskDescriptor task;

  int M = 3;
  int S_d = 10;
  int b = 3;
  int B = 10;
  int E = 5;
  double mu = 0.05;
  int R = 1;
  int eta = 3;
  int lambda = 2;
  std::optional<int> lambda_g;  // defaults to lambda
  // Freshness: nullopt = 4x median observed shard-iteration duration.
  std::optional<SimTime> F;
  FreshnessPolicy freshness_policy = FreshnessPolicy::indefinite;

  double M_d = 0.0;
  Attack attack = GaussianNoise{10.0};
  double straggler_ratio = 0.0;
  SimTime straggler_delay = 20.0;
  SimTime compute_delay = 1.0;

  ATauPolicy a_tau = BasicRoundModelMetric{};
  Termination termination = MaxGlobalEpochs{150};
  std::optional<std::uint64_t> gradient_budget;
  double quorum_fraction = 2.0 / 3.0;
  std::optional<SimTime> round_timeout;  // default 3x median honest compute time

  LatencyModel latency;
  std::vector<FaultSpec> faults;
  ShardConfig shard;  // b and S_d are mirrored from the top-level fields
  PlantedSpec planted;

  SimTime max_sim_time = 1e6;
  double wall_budget_seconds = 0.0;

  int lambda_global() const { return lambda_g.value_or(lambda); }

  // Field-level checks; throws errc::config naming the field.
  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw error(errc::config, field + ": " + why); };
    if (M < 1) fail("M", "must be >= 1");
    if (S_d < 1) fail("S_d", "must be >= 1");
    if (b < 3 || b % 2 == 0) fail("b", "must be odd and >= 3");
    if (B < 1) fail("B", "must be >= 1");
    if (E < 1) fail("E", "must be >= 1");
    if (!(mu > 0.0) || !std::isfinite(mu)) fail("mu", "must be a positive finite number");
    if (R < 1) fail("R", "must be >= 1");
    if (eta < 1) fail("eta", "must be >= 1");
    if (lambda < 1) fail("lambda", "must be >= 1");
    if (lambda >= eta) fail("lambda", "must be < eta (got lambda=" + std::to_string(lambda) + ", eta=" + std::to_string(eta) + ")");
    if (lambda_g && *lambda_g < 1) fail("lambda_g", "must be >= 1");
    if (F && !(*F > 0.0)) fail("F", "must be > 0");
    if (M_d < 0.0 || M_d >= 1.0) fail("M_d", "must lie in [0, 1)");
    if (straggler_ratio < 0.0 || straggler_ratio > 1.0) fail("straggler_ratio", "must lie in [0, 1]");
    if (M_d + straggler_ratio > 1.0) fail("straggler_ratio", "M_d + straggler_ratio must be <= 1");
    if (!(straggler_delay > 0.0)) fail("straggler_delay", "must be > 0");
    if (compute_delay < 0.0) fail("compute_delay", "must be >= 0");
    if (quorum_fraction <= 0.0 || quorum_fraction > 1.0) fail("quorum_fraction", "must lie in (0, 1]");
    if (round_timeout && !(*round_timeout > 0.0)) fail("round_timeout", "must be > 0");
    if (task.n_devices == 0) fail("task.n_devices", "must be >= 1");
    if (task.samples_per_device == 0) fail("task.samples_per_device", "must be >= 1");
    if (task.dim == 0) fail("task.dim", "must be >= 1");
    if (task.kind == TaskKind::classification && task.n_classes < 2) fail("task.n_classes", "must be >= 2");
    if (task.noise_sd < 0.0) fail("task.noise_sd", "must be >= 0");
    const std::size_t per_shard = task.n_devices / static_cast<std::size_t>(M);
    if (paradigm == Paradigm::chainfl && per_shard < static_cast<std::size_t>(S_d)) {
      fail("S_d", "each of the M shards owns " + std::to_string(per_shard) + " devices, fewer than S_d");
    }
    if (paradigm != Paradigm::chainfl && task.n_devices < static_cast<std::size_t>(S_d)) {
      fail("S_d", "exceeds task.n_devices");
    }
    if (const auto* g = std::get_if<GaussianNoise>(&attack); g && !(g->sd > 0.0)) fail("attack.sd", "must be > 0");
    if (const auto* m = std::get_if<MetricThreshold>(&termination)) {
      if (task.kind == TaskKind::regression && m->kind == MetricKind::accuracy) {
        fail("termination.metric", "accuracy is undefined for a regression task");
      }
    }
    if (planted.count < 0) fail("planted.count", "must be >= 0");
    if (planted.after_request < 1) fail("planted.after_request", "must be >= 1");
    if (!(planted.sd > 0.0)) fail("planted.sd", "must be > 0");
    if (!(max_sim_time > 0.0)) fail("max_sim_time", "must be > 0");
    try {
      latency.validate();
    } catch (const error& e) {
      fail("latency", e.detail());
    }
    ShardConfig sc = shard;
    sc.b = b;
    sc.s_d = S_d;
    try {
      sc.validate();
    } catch (const error& e) {
      fail("shard", e.detail());
    }
    for (std::size_t i = 0; i < faults.size(); ++i) {
      const auto& f = faults[i];
      const std::string where = "faults[" + std::to_string(i) + "]";
      if (f.crash_at < 0.0) fail(where + ".crash_at", "must be >= 0");
      if (f.recover_at >= 0.0 && f.recover_at < f.crash_at) fail(where + ".recover_at", "precedes crash_at");
    }
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw error(errc::config, (where.empty() ? std::string("config") : where) + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw error(errc::config, (where.empty() ? "" : where + ".") + key + ": unknown key");
  }
}

template <class T>
T get_field(const nlohmann::json& obj, const char* key, const std::string& where, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw error(errc::config, (where.empty() ? "" : where + ".") + key + ": wrong type");
  }
}

inline std::pair<double, double> bounds(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw error(errc::config, where + ": expected [lo, hi]");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace detail

inline ScenarioConfig parse_scenario(const nlohmann::json& j) {
  using detail::get_field;
  detail::reject_unknown(j, "", {"seed", "paradigm", "task", "M", "S_d", "b", "B", "E", "mu", "R", "eta", "lambda",
                                 "lambda_g", "F", "freshness_policy", "M_d", "attack", "straggler_ratio",
                                 "straggler_delay", "compute_delay", "a_tau", "termination", "gradient_budget",
                                 "quorum_fraction", "round_timeout", "latency", "faults", "shard", "planted",
                                 "max_sim_time", "wall_budget_seconds", "description"});
  ScenarioConfig c;
  c.seed = get_field<std::uint64_t>(j, "seed", "", c.seed);
  if (j.contains("paradigm")) c.paradigm = paradigm_from_string(get_field<std::string>(j, "paradigm", "", ""));

  if (j.contains("task")) {
    const auto& t = j["task"];
    detail::reject_unknown(t, "task", {"kind", "n_devices", "samples_per_device", "dim", "n_classes", "noise_sd",
                                       "separation", "partition"});
    const auto kind = get_field<std::string>(t, "kind", "task", "regression");
    if (kind == "regression") {
      c.task.kind = TaskKind::regression;
    } else if (kind == "classification") {
      c.task.kind = TaskKind::classification;
    } else {
      throw error(errc::config, "task.kind: unknown value '" + kind + "'");
    }
    c.task.n_devices = get_field<std::size_t>(t, "n_devices", "task", c.task.n_devices);
    c.task.samples_per_device = get_field<std::size_t>(t, "samples_per_device", "task", c.task.samples_per_device);
    c.task.dim = get_field<std::size_t>(t, "dim", "task", c.task.dim);
    c.task.n_classes = get_field<std::size_t>(t, "n_classes", "task", c.task.n_classes);
    c.task.noise_sd = get_field<double>(t, "noise_sd", "task", c.task.noise_sd);
    c.task.separation = get_field<double>(t, "separation", "task", c.task.separation);
    if (t.contains("partition")) {
      const auto p = get_field<std::string>(t, "partition", "task", "");
      if (p == "iid") {
        c.task.partition = PartitionScheme::iid_random;
      } else if (p == "noniid") {
        c.task.partition = PartitionScheme::noniid_sorted;
      } else {
        throw error(errc::config, "task.partition: expected 'iid' or 'noniid'");
      }
    }
  }

  c.M = get_field<int>(j, "M", "", c.M);
  c.S_d = get_field<int>(j, "S_d", "", c.S_d);
  c.b = get_field<int>(j, "b", "", c.b);
  c.B = get_field<int>(j, "B", "", c.B);
  c.E = get_field<int>(j, "E", "", c.E);
  c.mu = get_field<double>(j, "mu", "", c.mu);
  c.R = get_field<int>(j, "R", "", c.R);
  c.eta = get_field<int>(j, "eta", "", c.eta);
  c.lambda = get_field<int>(j, "lambda", "", c.lambda);
  if (j.contains("lambda_g") && !j["lambda_g"].is_null()) c.lambda_g = get_field<int>(j, "lambda_g", "", 0);
  if (j.contains("F")) {
    const auto& f = j["F"];
    if (f.is_string() && f.get<std::string>() == "inf") {
      c.F = std::numeric_limits<SimTime>::infinity();
    } else if (f.is_string() && f.get<std::string>() == "auto") {
      c.F.reset();
    } else if (f.is_number()) {
      c.F = f.get<double>();
    } else {
      throw error(errc::config, "F: expected a number, \"auto\" or \"inf\"");
    }
  }
  if (j.contains("freshness_policy")) {
    const auto p = get_field<std::string>(j, "freshness_policy", "", "");
    if (p == "indefinite") {
      c.freshness_policy = FreshnessPolicy::indefinite;
    } else if (p == "extend_deadline") {
      c.freshness_policy = FreshnessPolicy::extend_deadline;
    } else {
      throw error(errc::config, "freshness_policy: expected 'indefinite' or 'extend_deadline'");
    }
  }
  c.M_d = get_field<double>(j, "M_d", "", c.M_d);
  if (j.contains("attack")) {
    const auto& a = j["attack"];
    detail::reject_unknown(a, "attack", {"type", "sd", "factor"});
    const auto type = get_field<std::string>(a, "type", "attack", "gaussian");
    if (type == "gaussian") {
      c.attack = GaussianNoise{get_field<double>(a, "sd", "attack", 10.0)};
    } else if (type == "sign_flip") {
      c.attack = SignFlip{};
    } else if (type == "scale") {
      c.attack = Scale{get_field<double>(a, "factor", "attack", 10.0)};
    } else {
      throw error(errc::config, "attack.type: expected gaussian, sign_flip or scale");
    }
  }
  c.straggler_ratio = get_field<double>(j, "straggler_ratio", "", c.straggler_ratio);
  c.straggler_delay = get_field<double>(j, "straggler_delay", "", c.straggler_delay);
  c.compute_delay = get_field<double>(j, "compute_delay", "", c.compute_delay);

  if (j.contains("a_tau")) {
    const auto& a = j["a_tau"];
    if (a.is_number()) {
      c.a_tau = FixedThreshold{a.get<double>()};
    } else if (a.is_string() && a.get<std::string>() == "basic_round_model") {
      c.a_tau = BasicRoundModelMetric{};
    } else {
      throw error(errc::config, "a_tau: expected a number or \"basic_round_model\"");
    }
  }
  if (j.contains("termination")) {
    const auto& t = j["termination"];
    detail::reject_unknown(t, "termination", {"max_global_epochs", "metric", "threshold"});
    if (t.contains("max_global_epochs")) {
      if (t.contains("metric")) throw error(errc::config, "termination: give either max_global_epochs or metric");
      c.termination = MaxGlobalEpochs{get_field<int>(t, "max_global_epochs", "termination", 150)};
      if (std::get<MaxGlobalEpochs>(c.termination).n < 1) {
        throw error(errc::config, "termination.max_global_epochs: must be >= 1");
      }
    } else if (t.contains("metric")) {
      if (!t.contains("threshold")) throw error(errc::config, "termination.threshold: required with metric");
      c.termination = MetricThreshold{metric_kind_from_string(get_field<std::string>(t, "metric", "termination", "")),
                                      get_field<double>(t, "threshold", "termination", 0.0)};
    } else {
      throw error(errc::config, "termination: expected max_global_epochs or metric");
    }
  }
  if (j.contains("gradient_budget") && !j["gradient_budget"].is_null()) {
    c.gradient_budget = get_field<std::uint64_t>(j, "gradient_budget", "", 0);
  }
  c.quorum_fraction = get_field<double>(j, "quorum_fraction", "", c.quorum_fraction);
  if (j.contains("round_timeout") && !j["round_timeout"].is_null()) {
    c.round_timeout = get_field<double>(j, "round_timeout", "", 0.0);
  }
  if (j.contains("latency")) {
    const auto& l = j["latency"];
    detail::reject_unknown(l, "latency", {"intra_shard", "shard_to_mainchain"});
    if (l.contains("intra_shard")) {
      auto [lo, hi] = detail::bounds(l["intra_shard"], "latency.intra_shard");
      c.latency.intra_shard = {lo, hi};
    }
    if (l.contains("shard_to_mainchain")) {
      auto [lo, hi] = detail::bounds(l["shard_to_mainchain"], "latency.shard_to_mainchain");
      c.latency.shard_to_mainchain = {lo, hi};
    }
  }
  if (j.contains("faults")) {
    if (!j["faults"].is_array()) throw error(errc::config, "faults: expected an array");
    for (std::size_t i = 0; i < j["faults"].size(); ++i) {
      const auto& f = j["faults"][i];
      const std::string where = "faults[" + std::to_string(i) + "]";
      detail::reject_unknown(f, where, {"node", "crash_at", "recover_at"});
      if (!f.contains("node") || !f.contains("crash_at")) throw error(errc::config, where + ": node and crash_at are required");
      c.faults.push_back({get_field<std::string>(f, "node", where, ""), get_field<double>(f, "crash_at", where, 0.0),
                          get_field<double>(f, "recover_at", where, -1.0)});
    }
  }
  if (j.contains("shard")) {
    const auto& s = j["shard"];
    detail::reject_unknown(s, "shard", {"battery_min", "network_min", "heartbeat_interval", "heartbeat_timeout",
                                        "block_threshold", "block_period", "replication_timeout", "postpone_delay",
                                        "max_retries", "status_walk_sd"});
    auto& sc = c.shard;
    sc.battery_min = get_field<double>(s, "battery_min", "shard", sc.battery_min);
    sc.network_min = get_field<double>(s, "network_min", "shard", sc.network_min);
    sc.heartbeat_interval = get_field<double>(s, "heartbeat_interval", "shard", sc.heartbeat_interval);
    sc.heartbeat_timeout = get_field<double>(s, "heartbeat_timeout", "shard", sc.heartbeat_timeout);
    sc.block_threshold = get_field<std::size_t>(s, "block_threshold", "shard", sc.block_threshold);
    sc.block_period = get_field<double>(s, "block_period", "shard", sc.block_period);
    sc.replication_timeout = get_field<double>(s, "replication_timeout", "shard", sc.replication_timeout);
    sc.postpone_delay = get_field<double>(s, "postpone_delay", "shard", sc.postpone_delay);
    sc.max_retries = get_field<int>(s, "max_retries", "shard", sc.max_retries);
    sc.status_walk_sd = get_field<double>(s, "status_walk_sd", "shard", sc.status_walk_sd);
  }
  if (j.contains("planted")) {
    const auto& p = j["planted"];
    detail::reject_unknown(p, "planted", {"count", "after_request", "sd"});
    c.planted.count = get_field<int>(p, "count", "planted", 0);
    c.planted.after_request = get_field<int>(p, "after_request", "planted", 1);
    c.planted.sd = get_field<double>(p, "sd", "planted", 10.0);
  }
  c.max_sim_time = get_field<double>(j, "max_sim_time", "", c.max_sim_time);
  c.wall_budget_seconds = get_field<double>(j, "wall_budget_seconds", "", c.wall_budget_seconds);
  c.shard.b = c.b;
  c.shard.s_d = c.S_d;
  c.validate();
  return c;
}

inline ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error(errc::config, path + ": cannot open");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw error(errc::config, path + ": " + e.what());
  }
  return parse_scenario(j);
}

inline nlohmann::ordered_json to_json(const ScenarioConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["paradigm"] = to_string(c.paradigm);
  nlohmann::ordered_json t;
  t["kind"] = c.task.kind == TaskKind::regression ? "regression" : "classification";
  t["n_devices"] = c.task.n_devices;
  t["samples_per_device"] = c.task.samples_per_device;
  t["dim"] = c.task.dim;
  t["n_classes"] = c.task.n_classes;
  t["noise_sd"] = c.task.noise_sd;
  t["separation"] = c.task.separation;
  if (c.task.partition) t["partition"] = *c.task.partition == PartitionScheme::iid_random ? "iid" : "noniid";
  j["task"] = t;
  j["M"] = c.M;
  j["S_d"] = c.S_d;
  j["b"] = c.b;
  j["B"] = c.B;
  j["E"] = c.E;
  j["mu"] = c.mu;
  j["R"] = c.R;
  j["eta"] = c.eta;
  j["lambda"] = c.lambda;
  if (c.lambda_g) j["lambda_g"] = *c.lambda_g;
  if (c.F) {
    if (std::isinf(*c.F)) {
      j["F"] = "inf";
    } else {
      j["F"] = *c.F;
    }
  }
  j["freshness_policy"] = c.freshness_policy == FreshnessPolicy::indefinite ? "indefinite" : "extend_deadline";
  j["M_d"] = c.M_d;
  nlohmann::ordered_json a;
  if (const auto* g = std::get_if<GaussianNoise>(&c.attack)) {
    a["type"] = "gaussian";
    a["sd"] = g->sd;
  } else if (std::holds_alternative<SignFlip>(c.attack)) {
    a["type"] = "sign_flip";
  } else {
    a["type"] = "scale";
    a["factor"] = std::get<Scale>(c.attack).factor;
  }
  j["attack"] = a;
  j["straggler_ratio"] = c.straggler_ratio;
  j["straggler_delay"] = c.straggler_delay;
  j["compute_delay"] = c.compute_delay;
  if (const auto* f = std::get_if<FixedThreshold>(&c.a_tau)) {
    j["a_tau"] = f->value;
  } else {
    j["a_tau"] = "basic_round_model";
  }
  if (const auto* m = std::get_if<MaxGlobalEpochs>(&c.termination)) {
    j["termination"] = {{"max_global_epochs", m->n}};
  } else {
    const auto& mt = std::get<MetricThreshold>(c.termination);
    j["termination"] = {{"metric", to_string(mt.kind)}, {"threshold", mt.value}};
  }
  if (c.gradient_budget) j["gradient_budget"] = *c.gradient_budget;
  j["quorum_fraction"] = c.quorum_fraction;
  if (c.round_timeout) j["round_timeout"] = *c.round_timeout;
  j["latency"] = {{"intra_shard", {c.latency.intra_shard.lo, c.latency.intra_shard.hi}},
                  {"shard_to_mainchain", {c.latency.shard_to_mainchain.lo, c.latency.shard_to_mainchain.hi}}};
  nlohmann::json faults = nlohmann::json::array();
  for (const auto& f : c.faults) faults.push_back({{"node", f.node}, {"crash_at", f.crash_at}, {"recover_at", f.recover_at}});
  j["faults"] = faults;
  j["shard"] = {{"battery_min", c.shard.battery_min},
                {"network_min", c.shard.network_min},
                {"heartbeat_interval", c.shard.heartbeat_interval},
                {"heartbeat_timeout", c.shard.heartbeat_timeout},
                {"block_threshold", c.shard.block_threshold},
                {"block_period", c.shard.block_period},
                {"replication_timeout", c.shard.replication_timeout},
                {"postpone_delay", c.shard.postpone_delay},
                {"max_retries", c.shard.max_retries},
                {"status_walk_sd", c.shard.status_walk_sd}};
  j["planted"] = {{"count", c.planted.count}, {"after_request", c.planted.after_request}, {"sd", c.planted.sd}};
  j["max_sim_time"] = c.max_sim_time;
  j["wall_budget_seconds"] = c.wall_budget_seconds;
  return j;
}

}  // namespace chainfl
