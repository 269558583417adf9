#pragma once

// DAG mainchain: genesis, shard-model submissions with approval edges, tip
// candidacy and top-lambda basic iteration models, freshness-time virtual
// pruning, and read-only global aggregation.
//
// Tip lifecycle. Every vertex enters as a FreshTip with deadline
// received_at + F. From there it either
//   * is approved by a later transaction (-> Approved), or
//   * reaches its deadline without ever having been returned by request_tips
//     (-> Pruned; stored, never selectable again), or
//   * was a candidate at least once and stays selectable until approved.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainfl/error.hpp"
#include "chainfl/fl_task.hpp"
#include "chainfl/model_math.hpp"
#include "chainfl/rng.hpp"
#include "chainfl/store.hpp"

namespace chainfl {

struct MainchainTx {
  ContentHash tx_id;
  std::string sender_shard_id;
  std::string task_id;
  ContentHash params_hash;
  std::vector<ContentHash> approves;
  SimTime timestamp = 0.0;
  std::string payload;  // genesis only: canonical task requirements

  nlohmann::json body() const {
    nlohmann::json approved = nlohmann::json::array();
    for (const auto& a : approves) approved.push_back(a.hex());
    return {{"sender", sender_shard_id}, {"task_id", task_id}, {"params_hash", params_hash.hex()},
            {"approves", approved},      {"timestamp", timestamp}, {"payload", payload}};
  }

  // tx_id is the digest of the body; call after filling every other field.
  void seal() { tx_id = ContentHash::of(body().dump()); }
};

enum class TipStatus { fresh_tip, approved, pruned };

inline const char* to_string(TipStatus s) {
  switch (s) {
    case TipStatus::fresh_tip: return "fresh_tip";
    case TipStatus::approved: return "approved";
    case TipStatus::pruned: return "pruned";
  }
  return "unknown";
}

struct TipRecord {
  ContentHash tx_id;
  SimTime received_at = 0.0;
  SimTime freshness_deadline = 0.0;
  int candidacy_count = 0;
  TipStatus status = TipStatus::fresh_tip;
};

enum class FreshnessPolicy {
  indefinite,       // one candidacy keeps a tip selectable until approved
  extend_deadline,  // each candidacy pushes the deadline to now + F
};

struct BasicIterationModel {
  ParamVector w_bim;
  std::vector<ContentHash> approve_set;
  std::vector<std::pair<ContentHash, double>> scores;  // per candidate tip, in input order
  std::vector<ContentHash> unresolved;
};

class DagLedger {
 public:
  struct Options {
    SimTime freshness = std::numeric_limits<SimTime>::infinity();
    FreshnessPolicy policy = FreshnessPolicy::indefinite;
  };

  DagLedger() : DagLedger(Options{}) {}
  explicit DagLedger(Options opts) : opts_(opts) {
    if (!(opts_.freshness > 0.0)) throw error(errc::config, "freshness time must be > 0");
  }

  const Options& options() const noexcept { return opts_; }

  // Applies to vertices inserted from now on.
  void set_freshness(SimTime f) {
    if (!(f > 0.0)) throw error(errc::config, "freshness time must be > 0");
    opts_.freshness = f;
  }
  bool has_genesis() const noexcept { return genesis_.has_value(); }
  const ContentHash& genesis_id() const {
    if (!genesis_) throw error(errc::unknown_vertex, "ledger has no genesis");
    return *genesis_;
  }
  std::size_t size() const noexcept { return order_.size(); }
  const std::vector<ContentHash>& insertion_order() const noexcept { return order_; }

  const MainchainTx& tx(const ContentHash& id) const { return vertex(id).tx; }
  const TipRecord& record(const ContentHash& id) const { return vertex(id).tip; }
  bool contains(const ContentHash& id) const { return vertices_.count(id) != 0; }
  int incoming(const ContentHash& id) const { return vertex(id).incoming; }

  const MainchainTx& create_genesis(const TaskSpec& spec, const ContentHash& test_set_hash,
                                    const ContentHash& init_params_hash, SimTime now = 0.0) {
    if (genesis_) throw error(errc::double_genesis, "genesis already exists");
    TaskSpec carried = spec;
    carried.test_set_ref = test_set_hash;
    MainchainTx g;
    g.sender_shard_id = "genesis";
    g.task_id = spec.task_id_root;
    g.params_hash = init_params_hash;
    g.timestamp = now;
    g.payload = to_json(carried).dump();
    g.seal();
    genesis_ = g.tx_id;
    insert(std::move(g), now);
    return vertex(*genesis_).tx;
  }

  // Requirements carried by g0.
  TaskSpec genesis_spec() const { return task_spec_from_json(nlohmann::json::parse(tx(genesis_id()).payload)); }

  std::vector<ContentHash> tips() const {
    std::vector<ContentHash> out;
    for (const auto& id : order_) {
      if (vertex(id).tip.status == TipStatus::fresh_tip) out.push_back(id);
    }
    return out;
  }

  // Zero-candidacy fresh tips whose deadline has passed become Pruned.
  std::vector<ContentHash> prune_expired(SimTime now) {
    std::vector<ContentHash> pruned;
    for (const auto& id : order_) {
      auto& t = vertices_.at(id).tip;
      if (t.status == TipStatus::fresh_tip && expired(t, now)) {
        t.status = TipStatus::pruned;
        pruned.push_back(id);
      }
    }
    return pruned;
  }

  // Samples min(eta, selectable) tips uniformly without replacement and
  // records a candidacy on each. With nothing selectable, falls back to the
  // most recent Approved vertex.
  std::vector<ContentHash> request_tips(int eta, SimTime now, Rng& rng) {
    if (eta < 1) throw error(errc::validation, "eta must be >= 1");
    prune_expired(now);
    std::vector<ContentHash> pool = tips();
    if (pool.empty()) {
      auto fallback = latest_approved();
      if (!fallback) throw error(errc::unknown_vertex, "no selectable tip and no approved vertex");
      return {*fallback};
    }
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(eta), pool.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(take);
    for (const auto& id : pool) note_candidacy(id, now);
    return pool;
  }

  // First-iteration branch: reading g0 counts as selecting it.
  ContentHash take_genesis(SimTime now) {
    const auto id = genesis_id();
    auto& t = vertices_.at(id).tip;
    if (t.status == TipStatus::fresh_tip && !expired(t, now)) note_candidacy(id, now);
    return id;
  }

  const MainchainTx& submit_tx(MainchainTx tx, SimTime now) {
    if (!genesis_) throw error(errc::unknown_vertex, "submit before genesis");
    if (tx.approves.empty()) throw error(errc::validation, "transaction approves nothing");
    tx.seal();
    if (vertices_.count(tx.tx_id)) throw error(errc::validation, "duplicate transaction " + tx.tx_id.hex());
    prune_expired(now);
    for (const auto& a : tx.approves) {
      auto it = vertices_.find(a);
      if (it == vertices_.end()) throw error(errc::unknown_vertex, "approval of unknown tx " + a.hex());
      if (it->second.tip.status == TipStatus::pruned) throw error(errc::pruned_vertex, "approval of pruned tx " + a.hex());
    }
    std::vector<ContentHash> unique = tx.approves;
    std::sort(unique.begin(), unique.end());
    if (std::adjacent_find(unique.begin(), unique.end()) != unique.end()) {
      throw error(errc::validation, "duplicate approval");
    }
    for (const auto& a : tx.approves) {
      auto& v = vertices_.at(a);
      ++v.incoming;
      v.tip.status = TipStatus::approved;
    }
    const auto id = tx.tx_id;
    insert(std::move(tx), now);
    return vertex(id).tx;
  }

  // Non-mutating view used by the global observer.
  std::vector<ContentHash> selectable_tips(SimTime now) const {
    std::vector<ContentHash> out;
    for (const auto& id : order_) {
      const auto& t = vertex(id).tip;
      if (t.status == TipStatus::fresh_tip && !expired(t, now)) out.push_back(id);
    }
    return out;
  }

  std::optional<ContentHash> latest_approved() const {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if (vertex(*it).tip.status == TipStatus::approved) return *it;
    }
    return std::nullopt;
  }

  // Structural self-check: tip-set correctness against a from-scratch
  // recomputation, acyclicity, reachability of genesis. Returns a
  // description of the first violation, or an empty string.
  std::string check_invariants() const {
    if (!genesis_) return order_.empty() ? "" : "vertices without genesis";
    std::map<ContentHash, int> in_degree;
    for (const auto& id : order_) in_degree[id] = 0;
    std::size_t genesis_count = 0;
    for (const auto& id : order_) {
      const auto& v = vertex(id);
      if (v.tx.approves.empty()) ++genesis_count;
      for (const auto& a : v.tx.approves) {
        auto it = in_degree.find(a);
        if (it == in_degree.end()) return "edge to unknown vertex";
        ++it->second;
      }
    }
    if (genesis_count != 1) return "expected exactly one genesis";
    for (const auto& id : order_) {
      const auto& v = vertex(id);
      if (v.incoming != in_degree[id]) return "cached in-degree drift at " + id.hex();
      const bool should_be_tip = in_degree[id] == 0 && v.tip.status != TipStatus::pruned;
      if (should_be_tip != (v.tip.status == TipStatus::fresh_tip)) return "tip-set mismatch at " + id.hex();
      if (v.tip.status == TipStatus::pruned && v.tip.candidacy_count != 0 && opts_.policy == FreshnessPolicy::indefinite) {
        return "pruned vertex had candidacies";
      }
    }
    // Approvals may only point at strictly earlier vertices, which makes the
    // insertion order a topological order; verify it, then reachability.
    std::map<ContentHash, std::size_t> position;
    for (std::size_t i = 0; i < order_.size(); ++i) position[order_[i]] = i;
    for (std::size_t i = 0; i < order_.size(); ++i) {
      for (const auto& a : vertex(order_[i]).tx.approves) {
        if (position.at(a) >= i) return "cycle or forward edge at " + order_[i].hex();
      }
    }
    std::map<ContentHash, bool> reaches;
    for (const auto& id : order_) {
      const auto& v = vertex(id);
      bool r = id == *genesis_;
      for (const auto& a : v.tx.approves) r = r || reaches.at(a);
      if (!r) return "vertex does not reach genesis " + id.hex();
      reaches[id] = true;
    }
    return {};
  }

  // JSON lines, insertion order: tx_id, sender, approves, timestamp, status.
  void export_dag(std::ostream& out) const {
    for (const auto& id : order_) {
      const auto& v = vertex(id);
      nlohmann::ordered_json line;
      line["tx_id"] = id.hex();
      line["sender"] = v.tx.sender_shard_id;
      nlohmann::json approves = nlohmann::json::array();
      for (const auto& a : v.tx.approves) approves.push_back(a.hex());
      line["approves"] = approves;
      line["timestamp"] = v.tx.timestamp;
      line["received_at"] = v.tip.received_at;
      line["candidacy_count"] = v.tip.candidacy_count;
      line["status"] = to_string(v.tip.status);
      out << line.dump() << '\n';
    }
  }

 private:
  struct Vertex {
    MainchainTx tx;
    TipRecord tip;
    int incoming = 0;
  };

  bool expired(const TipRecord& t, SimTime now) const {
    if (now < t.freshness_deadline) return false;
    if (opts_.policy == FreshnessPolicy::indefinite) return t.candidacy_count == 0;
    return true;
  }

  void note_candidacy(const ContentHash& id, SimTime now) {
    auto& t = vertices_.at(id).tip;
    ++t.candidacy_count;
    if (opts_.policy == FreshnessPolicy::extend_deadline) t.freshness_deadline = now + opts_.freshness;
  }

  void insert(MainchainTx tx, SimTime now) {
    const auto id = tx.tx_id;
    Vertex v;
    v.tip.tx_id = id;
    v.tip.received_at = now;
    v.tip.freshness_deadline = now + opts_.freshness;
    v.tx = std::move(tx);
    vertices_.emplace(id, std::move(v));
    order_.push_back(id);
  }

  const Vertex& vertex(const ContentHash& id) const {
    auto it = vertices_.find(id);
    if (it == vertices_.end()) throw error(errc::unknown_vertex, "unknown tx " + id.hex());
    return it->second;
  }

  Options opts_;
  std::optional<ContentHash> genesis_;
  std::map<ContentHash, Vertex> vertices_;
  std::vector<ContentHash> order_;
};

// Validates every tip's model, keeps the lambda best (score desc, then
// timestamp asc, then tx_id asc) and averages them uniformly.
inline BasicIterationModel build_basic_iteration_model(const DagLedger& ledger, const std::vector<ContentHash>& tips,
                                                       int lambda, const LabeledDataset& test, LossKind kind,
                                                       const Store& store) {
  if (tips.empty()) throw error(errc::aggregation_empty, "no tips to build from");
  if (lambda < 1) throw error(errc::validation, "lambda must be >= 1");

  struct Scored {
    ContentHash id;
    double score;
    SimTime timestamp;
    ParamVector params;
  };
  BasicIterationModel out;
  std::vector<Scored> scored;
  for (const auto& id : tips) {
    const auto& tx = ledger.tx(id);
    double score = -std::numeric_limits<double>::infinity();
    ParamVector params;
    try {
      params = store.get_params(tx.params_hash);
      score = validation_score(params, test, kind);
      if (std::isnan(score)) score = -std::numeric_limits<double>::infinity();
    } catch (const error&) {
      out.unresolved.push_back(id);
      out.scores.emplace_back(id, score);
      continue;
    }
    out.scores.emplace_back(id, score);
    scored.push_back({id, score, tx.timestamp, std::move(params)});
  }
  if (scored.empty()) throw error(errc::not_found, "no tip model could be resolved");
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.id < b.id;
  });
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(lambda), scored.size());
  std::vector<ParamVector> chosen;
  for (std::size_t i = 0; i < keep; ++i) {
    chosen.push_back(scored[i].params);
    out.approve_set.push_back(scored[i].id);
  }
  out.w_bim = uniform_aggregate(chosen);
  return out;
}

// Global model observer: same selection as a basic iteration model over
// every currently selectable tip; mutates nothing.
inline BasicIterationModel aggregate_global(const DagLedger& ledger, int lambda_g, SimTime now,
                                            const LabeledDataset& test, LossKind kind, const Store& store) {
  auto tips = ledger.selectable_tips(now);
  if (tips.empty()) {
    auto fallback = ledger.latest_approved();
    if (!fallback) fallback = ledger.genesis_id();
    tips = {*fallback};
  }
  return build_basic_iteration_model(ledger, tips, lambda_g, test, kind, store);
}

inline bool check_stop(const Termination& termination, const MetricValue& global_metric, int global_epoch) {
  if (const auto* m = std::get_if<MaxGlobalEpochs>(&termination)) return global_epoch >= m->n;
  const auto& t = std::get<MetricThreshold>(termination);
  if (global_metric.kind != t.kind) return false;
  if (t.kind == MetricKind::accuracy) return global_metric.value >= t.value;
  return global_metric.value <= t.value;
}

}  // namespace chainfl
