#pragma once

// Deterministic discrete-event engine. One Simulator owns the virtual clock,
// the event heap, crash state of every registered node, per-sender latency
// streams and the JSON-lines trace. A run is a pure function of its inputs.

#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <queue>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainfl/error.hpp"
#include "chainfl/rng.hpp"
#include "chainfl/store.hpp"

namespace chainfl {

using SimTime = double;

enum class EventKind { deliver, timer, crash, recover };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::deliver: return "deliver";
    case EventKind::timer: return "timer";
    case EventKind::crash: return "crash";
    case EventKind::recover: return "recover";
  }
  return "unknown";
}

struct SimEvent {
  SimTime fire_at = 0.0;
  std::uint64_t seq = 0;  // assigned by schedule()
  EventKind kind = EventKind::timer;
  std::string entity;  // destination, timer owner, or faulted node
  std::string tag;
  std::string payload;  // digested into the trace
  std::function<void()> action;
  std::uint64_t incarnation = 0;  // entity incarnation when scheduled
};

struct UniformLatency {
  SimTime lo = 1.0;
  SimTime hi = 2.0;
};

enum class Link { intra_shard, shard_to_mainchain };

struct LatencyModel {
  UniformLatency intra_shard{1.0, 2.0};
  UniformLatency shard_to_mainchain{2.0, 5.0};

  void validate() const {
    for (const auto* u : {&intra_shard, &shard_to_mainchain}) {
      if (!(u->lo > 0.0) || u->hi < u->lo) throw error(errc::config, "latency bounds must satisfy 0 < lo <= hi");
    }
  }
};

struct FaultSpec {
  std::string node;
  SimTime crash_at = 0.0;
  // Negative: never recovers.
  SimTime recover_at = -1.0;
};

class Trace {
 public:
  void record(SimTime t, const std::string& entity, const std::string& kind, const nlohmann::json& payload) {
    const std::string body = payload.dump();
    nlohmann::ordered_json line;
    line["t"] = t;
    line["entity"] = entity;
    line["kind"] = kind;
    line["payload_digest"] = ContentHash::of(body).hex().substr(0, 16);
    line["payload"] = payload;
    lines_.push_back(line.dump());
  }

  const std::vector<std::string>& lines() const noexcept { return lines_; }

  std::vector<nlohmann::json> records_of(const std::string& kind) const {
    std::vector<nlohmann::json> out;
    for (const auto& l : lines_) {
      auto j = nlohmann::json::parse(l);
      if (j["kind"] == kind) out.push_back(std::move(j));
    }
    return out;
  }

  void write(std::ostream& out) const {
    for (const auto& l : lines_) out << l << '\n';
  }

 private:
  std::vector<std::string> lines_;
};

class Simulator {
 public:
  struct Options {
    std::uint64_t seed = 0;
    LatencyModel latency;
    bool trace_events = false;  // one trace line per dispatched event
    double wall_budget_seconds = 0.0;  // 0 disables the watchdog
  };

  Simulator() : Simulator(Options{}) {}
  explicit Simulator(Options opts) : opts_(std::move(opts)) { opts_.latency.validate(); }

  SimTime now() const noexcept { return now_; }
  std::uint64_t seed() const noexcept { return opts_.seed; }
  Trace& trace() noexcept { return trace_; }
  const Trace& trace() const noexcept { return trace_; }
  std::size_t pending() const noexcept { return queue_.size(); }
  std::uint64_t dispatched() const noexcept { return dispatched_; }

  void schedule(SimEvent ev) {
    if (ev.fire_at < now_) {
      throw error(errc::contract_violation, "event '" + ev.tag + "' scheduled in the past");
    }
    ev.seq = next_seq_++;
    ev.incarnation = incarnation(ev.entity);
    queue_.push(std::move(ev));
  }

  void deliver(const std::string& dst, SimTime delay, std::string tag, std::function<void()> action,
               std::string payload = {}) {
    schedule(SimEvent{now_ + delay, 0, EventKind::deliver, dst, std::move(tag), std::move(payload), std::move(action), 0});
  }

  void timer(const std::string& owner, SimTime delay, std::string tag, std::function<void()> action) {
    schedule(SimEvent{now_ + delay, 0, EventKind::timer, owner, std::move(tag), {}, std::move(action), 0});
  }

  // Sends with a latency drawn from the sender's own stream.
  void send(const std::string& src, const std::string& dst, Link link, std::string tag, std::function<void()> action,
            std::string payload = {}) {
    deliver(dst, sample_latency(src, link), std::move(tag), std::move(action), std::move(payload));
  }

  SimTime sample_latency(const std::string& src, Link link) {
    const auto& u = link == Link::intra_shard ? opts_.latency.intra_shard : opts_.latency.shard_to_mainchain;
    auto it = latency_rngs_.find(src);
    if (it == latency_rngs_.end()) {
      it = latency_rngs_.emplace(src, make_stream(opts_.seed, "simnet.latency", detail::fnv1a(src))).first;
    }
    if (u.hi == u.lo) return u.lo;
    return std::uniform_real_distribution<double>(u.lo, u.hi)(it->second);
  }

  void register_node(const std::string& node, std::function<void()> on_crash = {}, std::function<void()> on_recover = {}) {
    auto& n = nodes_[node];
    n.on_crash = std::move(on_crash);
    n.on_recover = std::move(on_recover);
  }

  bool is_crashed(const std::string& node) const {
    auto it = nodes_.find(node);
    return it != nodes_.end() && it->second.crashed;
  }

  void inject_fault(const std::vector<FaultSpec>& faults) {
    for (const auto& f : faults) {
      if (!nodes_.count(f.node)) throw error(errc::config, "fault targets unknown node '" + f.node + "'");
      schedule_fault(f.node, f.crash_at, EventKind::crash);
      if (f.recover_at >= 0.0) {
        if (f.recover_at < f.crash_at) throw error(errc::config, "recovery precedes crash for '" + f.node + "'");
        schedule_fault(f.node, f.recover_at, EventKind::recover);
      }
    }
  }

  // Pops events in (fire_at, seq) order until `stop` holds, the next event
  // lies beyond t_max, or the queue drains.
  SimTime run_until(const std::function<bool()>& stop = {}, SimTime t_max = std::numeric_limits<SimTime>::infinity()) {
    const auto wall_start = std::chrono::steady_clock::now();
    while (!queue_.empty()) {
      if (stop && stop()) break;
      if (queue_.top().fire_at > t_max) {
        now_ = t_max;
        break;
      }
      SimEvent ev = queue_.top();
      queue_.pop();
      now_ = ev.fire_at;
      dispatch(ev);
      if (opts_.wall_budget_seconds > 0.0) {
        const std::chrono::duration<double> spent = std::chrono::steady_clock::now() - wall_start;
        if (spent.count() > opts_.wall_budget_seconds) {
          throw error(errc::watchdog, "run exceeded wall budget at t=" + std::to_string(now_));
        }
      }
    }
    return now_;
  }

  SimTime run_until(SimTime t_max) { return run_until({}, t_max); }

 private:
  struct NodeState {
    bool crashed = false;
    std::uint64_t incarnation = 0;
    std::function<void()> on_crash;
    std::function<void()> on_recover;
  };

  struct Later {
    bool operator()(const SimEvent& a, const SimEvent& b) const {
      if (a.fire_at != b.fire_at) return a.fire_at > b.fire_at;
      return a.seq > b.seq;
    }
  };

  std::uint64_t incarnation(const std::string& entity) const {
    auto it = nodes_.find(entity);
    return it == nodes_.end() ? 0 : it->second.incarnation;
  }

  void schedule_fault(const std::string& node, SimTime at, EventKind kind) {
    SimEvent ev;
    ev.fire_at = at;
    ev.kind = kind;
    ev.entity = node;
    ev.tag = to_string(kind);
    schedule(std::move(ev));
  }

  void dispatch(SimEvent& ev) {
    ++dispatched_;
    auto node = nodes_.find(ev.entity);
    if (ev.kind == EventKind::crash || ev.kind == EventKind::recover) {
      auto& n = node->second;
      const bool crash = ev.kind == EventKind::crash;
      if (n.crashed == crash) return;
      n.crashed = crash;
      ++n.incarnation;  // invalidates everything scheduled for the old incarnation
      trace_.record(now_, ev.entity, crash ? "crash" : "recover", nlohmann::json::object());
      auto& hook = crash ? n.on_crash : n.on_recover;
      if (hook) hook();
      return;
    }
    if (node != nodes_.end() && (node->second.crashed || node->second.incarnation != ev.incarnation)) {
      if (opts_.trace_events) trace_.record(now_, ev.entity, "drop", {{"tag", ev.tag}});
      return;
    }
    if (opts_.trace_events) {
      trace_.record(now_, ev.entity, to_string(ev.kind),
                    {{"tag", ev.tag}, {"digest", ContentHash::of(ev.payload).hex().substr(0, 16)}});
    }
    if (ev.action) ev.action();
  }

  Options opts_;
  SimTime now_ = 0.0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t dispatched_ = 0;
  std::priority_queue<SimEvent, std::vector<SimEvent>, Later> queue_;
  std::map<std::string, NodeState> nodes_;
  std::map<std::string, Rng> latency_rngs_;
  Trace trace_;
};

}  // namespace chainfl
