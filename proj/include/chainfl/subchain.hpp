#pragma once

// One shard's consortium chain.
//
// The pure pieces (device selection, transaction validation, block
// formation, quorum arithmetic, the re-election rule) are free functions.
// `Shard` wires them into an event-driven state machine on a Simulator:
// b nodes replicate blocks Raft-style with one block in flight, followers
// detect a dead leader by heartbeat timeout, and the leader runs the
// synchronous shard-training iteration (rounds of select -> train ->
// validate -> commit -> weighted aggregate).
//
// Everything the leader needs to resume after a crash lives in the log as
// control records: iteration_start, basic_round_model and shard_model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainfl/device.hpp"
#include "chainfl/error.hpp"
#include "chainfl/fl_task.hpp"
#include "chainfl/mainchain.hpp"
#include "chainfl/model_math.hpp"
#include "chainfl/rng.hpp"
#include "chainfl/simnet.hpp"
#include "chainfl/store.hpp"
#include "chainfl/subchain_tx.hpp"

namespace chainfl {

enum class NodeRole { leader, follower, candidate };

inline const char* to_string(NodeRole r) {
  switch (r) {
    case NodeRole::leader: return "leader";
    case NodeRole::follower: return "follower";
    case NodeRole::candidate: return "candidate";
  }
  return "unknown";
}

struct Block {
  std::uint64_t block_no = 0;
  ContentHash prev_hash;
  std::uint64_t term = 0;
  std::vector<SubchainTx> txs;
  std::string leader_id;
  int commit_votes = 0;

  ContentHash hash() const {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& t : txs) ids.push_back(t.id().hex());
    const nlohmann::json header = {{"block_no", block_no}, {"prev", prev_hash.hex()}, {"term", term},
                                   {"leader", leader_id}, {"txs", ids}};
    return ContentHash::of(header.dump());
  }
};

// ---------------------------------------------------------------------------
// Pure operations

// ceil((b-1)/2): the leader plus at least half of all followers.
constexpr int quorum_acks(int b) { return b / 2; }

// Uniform sample of s_d ids among eligible statuses; nullopt postpones the round.
inline std::optional<std::vector<std::uint64_t>> select_devices(const std::vector<StatusRecord>& pool, int s_d,
                                                                double battery_min, double network_min, Rng& rng) {
  if (s_d < 1) throw error(errc::config, "S_d must be >= 1");
  std::vector<std::uint64_t> eligible;
  for (const auto& st : pool) {
    if (st.eligible(battery_min, network_min)) eligible.push_back(st.device_id);
  }
  if (eligible.size() < static_cast<std::size_t>(s_d)) return std::nullopt;
  for (std::size_t i = 0; i < static_cast<std::size_t>(s_d); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  eligible.resize(static_cast<std::size_t>(s_d));
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

enum class Verdict { valid, invalid_accuracy, invalid_unresolved, invalid_malformed };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::valid: return "valid";
    case Verdict::invalid_accuracy: return "invalid_accuracy";
    case Verdict::invalid_unresolved: return "invalid_unresolved";
    case Verdict::invalid_malformed: return "invalid_malformed";
  }
  return "unknown";
}

struct ValidationResult {
  Verdict verdict = Verdict::invalid_malformed;
  double score = -std::numeric_limits<double>::infinity();

  bool valid() const noexcept { return verdict == Verdict::valid; }
};

// Valid iff the stored model's score strictly exceeds a_tau.
inline ValidationResult validate_tx(const SubchainTx& tx, const LabeledDataset& test, double a_tau, LossKind kind,
                                    const Store& store) {
  if (tx.kind != SubchainTxKind::local_model || tx.signature.empty() || tx.sender_id.empty() || tx.dataset_size == 0) {
    return {Verdict::invalid_malformed, -std::numeric_limits<double>::infinity()};
  }
  ParamVector params;
  try {
    params = store.get_params(tx.params_hash);
  } catch (const error&) {
    return {Verdict::invalid_unresolved, -std::numeric_limits<double>::infinity()};
  }
  double score = -std::numeric_limits<double>::infinity();
  try {
    score = validation_score(params, test, kind);
  } catch (const error&) {
    return {Verdict::invalid_malformed, score};
  }
  if (std::isnan(score)) score = -std::numeric_limits<double>::infinity();
  return {score > a_tau ? Verdict::valid : Verdict::invalid_accuracy, score};
}

// Orders by generation time, ties by sender id.
inline void sort_for_block(std::vector<SubchainTx>& txs) {
  std::stable_sort(txs.begin(), txs.end(), [](const SubchainTx& a, const SubchainTx& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.sender_id < b.sender_id;
  });
}

// Emits a block with everything pending once the threshold is reached, or
// when the period timer fired (`period_elapsed`) with at least one tx.
inline std::optional<Block> form_block(std::vector<SubchainTx>& pending, std::size_t threshold, bool period_elapsed,
                                       const std::string& leader_id, std::uint64_t block_no,
                                       const ContentHash& prev_hash, std::uint64_t term) {
  if (pending.empty()) return std::nullopt;
  if (pending.size() < threshold && !period_elapsed) return std::nullopt;
  Block b;
  b.block_no = block_no;
  b.prev_hash = prev_hash;
  b.term = term;
  b.leader_id = leader_id;
  b.txs = std::move(pending);
  pending.clear();
  sort_for_block(b.txs);
  return b;
}

enum class ReplicationOutcome { committed, failed };

// Follower-side block check: every tx is signed.
inline bool verify_block_signatures(const Block& block) {
  if (block.txs.empty()) return false;
  return std::all_of(block.txs.begin(), block.txs.end(),
                     [](const SubchainTx& t) { return !t.signature.empty() && !t.sender_id.empty(); });
}

inline ReplicationOutcome replicate_block(Block& block, const std::vector<bool>& follower_acks, int b) {
  const int acks = static_cast<int>(std::count(follower_acks.begin(), follower_acks.end(), true));
  block.commit_votes = acks;
  return acks >= quorum_acks(b) ? ReplicationOutcome::committed : ReplicationOutcome::failed;
}

struct ShardNode {
  int index = 0;
  std::string name;
  NodeRole role = NodeRole::follower;
  std::uint64_t term = 0;
  std::vector<Block> log;  // may carry one uncommitted tail entry
  std::size_t commit_len = 0;
  SimTime last_heard = 0.0;
  int leader_hint = -1;
  bool stop_signal = false;

  std::uint64_t last_term() const { return log.empty() ? 0 : log.back().term; }
  ContentHash tail_hash() const { return log.empty() ? ContentHash() : log.back().hash(); }
};

// Up-to-dateness used for leader choice: (last block term, log length, node index).
inline bool ranks_above(const ShardNode& a, const ShardNode& b) {
  if (a.last_term() != b.last_term()) return a.last_term() > b.last_term();
  if (a.log.size() != b.log.size()) return a.log.size() > b.log.size();
  return a.index > b.index;
}

// Promotes the best-ranked live node when a live majority exists; starts a
// new term on every live node. Returns the new leader, or nullopt (stall).
inline std::optional<int> detect_and_reelect(std::vector<ShardNode>& nodes, const std::vector<bool>& live, SimTime now) {
  const int b = static_cast<int>(nodes.size());
  int live_count = 0;
  int best = -1;
  std::uint64_t max_term = 0;
  for (int i = 0; i < b; ++i) {
    max_term = std::max(max_term, nodes[i].term);
    if (!live[i]) continue;
    ++live_count;
    if (best < 0 || ranks_above(nodes[i], nodes[best])) best = i;
  }
  if (live_count < b / 2 + 1) return std::nullopt;
  for (int i = 0; i < b; ++i) {
    if (!live[i]) continue;
    nodes[i].term = max_term + 1;
    nodes[i].role = i == best ? NodeRole::leader : NodeRole::follower;
    nodes[i].leader_hint = best;
    nodes[i].last_heard = now;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Shard actor

struct ShardConfig {
  int b = 3;
  int s_d = 10;
  double battery_min = 0.2;
  double network_min = 0.2;
  SimTime heartbeat_interval = 2.0;
  SimTime heartbeat_timeout = 7.0;
  std::size_t block_threshold = 4;
  SimTime block_period = 3.0;
  SimTime replication_timeout = 12.0;
  SimTime postpone_delay = 5.0;
  int max_retries = 10;
  double status_walk_sd = 0.0;

  void validate() const {
    if (b < 3 || b % 2 == 0) throw error(errc::config, "b must be odd and >= 3");
    if (s_d < 1) throw error(errc::config, "S_d must be >= 1");
    if (!(heartbeat_interval > 0.0) || heartbeat_timeout <= heartbeat_interval) {
      throw error(errc::config, "heartbeat_timeout must exceed heartbeat_interval > 0");
    }
    if (block_threshold < 1) throw error(errc::config, "block_threshold must be >= 1");
    if (!(block_period > 0.0) || !(replication_timeout > 0.0) || !(postpone_delay > 0.0)) {
      throw error(errc::config, "block_period, replication_timeout and postpone_delay must be > 0");
    }
    if (max_retries < 0) throw error(errc::config, "max_retries must be >= 0");
  }
};

struct DeviceAgent {
  DeviceProfile profile;
  Behavior behavior = Honest{};
  std::uint64_t trainings = 0;  // drives the per-training RNG substream
};

inline Rng training_stream(std::uint64_t seed, const DeviceAgent& agent) {
  return make_stream(seed, "device.train", agent.profile.device_id, agent.trainings);
}

struct BimReply {
  bool stop = false;
  ContentHash w_bim_hash;
  std::vector<ContentHash> approve_set;
};

// Protocol position reconstructed from the log.
struct ShardState {
  int shard_id = 0;
  std::string current_task_id;
  int iteration = 0;
  int round_no = 0;
  int attempt = 0;
  ContentHash w_brm;
  double a_tau = 0.0;
  std::vector<SubchainTx> pending_valid;
};

class Shard {
 public:
  struct Hooks {
    // Leader `node` asks the mainchain for its next basic iteration model,
    // optionally carrying the shard model it just finished. The answer
    // must come back through deliver_bim().
    std::function<void(Shard&, int node, std::optional<MainchainTx> submission)> request_bim;
    std::function<void(const DeviceAgent&, int gradients)> on_training;
    std::function<void(Shard&, int iteration, const ContentHash& w_s)> on_iteration_done;
    std::function<void(Shard&, const std::string& reason)> on_failure;
    // Every model entering aggregation, for instrumentation.
    std::function<void(Shard&, const std::vector<SubchainTx>& aggregated)> on_aggregate;
  };

  Shard(int shard_id, ShardConfig cfg, TaskSpec spec, const LabeledDataset& test, std::vector<DeviceAgent*> pool,
        Simulator& sim, Store& store, Hooks hooks)
      : cfg_(cfg), spec_(std::move(spec)), test_(test), pool_(std::move(pool)), sim_(sim), store_(store),
        hooks_(std::move(hooks)) {
    cfg_.validate();
    st_.shard_id = shard_id;
    select_rng_ = make_stream(sim_.seed(), "subchain.select", static_cast<std::uint64_t>(shard_id));
    walk_rng_ = make_stream(sim_.seed(), "device.status", static_cast<std::uint64_t>(shard_id));
    nodes_.resize(static_cast<std::size_t>(cfg_.b));
    for (int i = 0; i < cfg_.b; ++i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      n.index = i;
      n.name = "s" + std::to_string(shard_id) + ".n" + std::to_string(i);
      sim_.register_node(n.name, [this, i] { on_crash(i); }, [this, i] { on_recover(i); });
    }
    next_index_.assign(nodes_.size(), 0);
    last_ack_.assign(nodes_.size(), std::nullopt);
    match_len_.assign(nodes_.size(), 0);
  }

  Shard(const Shard&) = delete;
  Shard& operator=(const Shard&) = delete;

  int id() const noexcept { return st_.shard_id; }
  std::string name() const { return "shard" + std::to_string(st_.shard_id); }
  const ShardConfig& config() const noexcept { return cfg_; }
  const TaskSpec& spec() const noexcept { return spec_; }
  const std::vector<ShardNode>& nodes() const noexcept { return nodes_; }
  const ShardState& state() const noexcept { return st_; }
  const std::string& node_name(int i) const { return nodes_.at(static_cast<std::size_t>(i)).name; }
  bool stopped() const noexcept { return stopped_; }
  bool failed() const noexcept { return failed_; }
  int completed_iterations() const noexcept { return completed_iterations_; }
  std::uint64_t committed_blocks() const noexcept { return committed_blocks_; }
  std::optional<SimTime> last_commit_time() const noexcept { return last_commit_time_; }

  std::optional<int> leader() const {
    for (const auto& n : nodes_) {
      if (n.role == NodeRole::leader && !sim_.is_crashed(n.name)) return n.index;
    }
    return std::nullopt;
  }

  // Node 0 leads term 1 and pulls g0.
  void start() {
    for (auto& n : nodes_) {
      n.term = 1;
      n.leader_hint = 0;
      n.last_heard = sim_.now();
      n.role = n.index == 0 ? NodeRole::leader : NodeRole::follower;
    }
    for (int i = 1; i < cfg_.b; ++i) arm_election_check(i);
    become_leader(0);
  }

  void deliver_bim(int node, std::uint64_t term, const BimReply& reply) {
    auto& n = nodes_.at(static_cast<std::size_t>(node));
    if (n.role != NodeRole::leader || n.term != term || !awaiting_bim_) return;
    awaiting_bim_ = false;
    if (reply.stop) {
      finish(false, "stop signal");
      return;
    }
    SubchainTx rec = control(node, SubchainTxKind::iteration_start);
    rec.iteration = next_iteration_;
    rec.params_hash = reply.w_bim_hash;
    rec.approve_set = reply.approve_set;
    rec.task_id = task_id_for(next_iteration_);
    pending_control_ = rec;
    try_propose(node);
  }

  void deliver_stop(int node) { nodes_.at(static_cast<std::size_t>(node)).stop_signal = true; }

  // Committed prefixes of all live nodes must be prefixes of one another.
  bool logs_prefix_consistent() const {
    std::vector<const ShardNode*> live;
    for (const auto& n : nodes_) {
      if (!sim_.is_crashed(n.name)) live.push_back(&n);
    }
    for (std::size_t a = 0; a < live.size(); ++a) {
      for (std::size_t b = a + 1; b < live.size(); ++b) {
        const std::size_t len = std::min(live[a]->commit_len, live[b]->commit_len);
        for (std::size_t i = 0; i < len; ++i) {
          if (live[a]->log[i].hash() != live[b]->log[i].hash()) return false;
        }
      }
    }
    for (const auto* n : live) {
      for (std::size_t i = 1; i < n->log.size(); ++i) {
        if (n->log[i].prev_hash != n->log[i - 1].hash()) return false;
      }
    }
    return true;
  }

  // Every distinct term that ever had a leader, with that leader.
  const std::map<std::uint64_t, int>& leaders_by_term() const noexcept { return leaders_by_term_; }

 private:
  // --- helpers -------------------------------------------------------------

  ShardNode& node(int i) { return nodes_.at(static_cast<std::size_t>(i)); }

  std::string task_id_for(int iteration) const {
    return spec_.task_id_root + "/shard" + std::to_string(st_.shard_id) + "/it" + std::to_string(iteration);
  }

  SubchainTx control(int leader, SubchainTxKind kind) const {
    SubchainTx t;
    t.kind = kind;
    t.sender_id = nodes_.at(static_cast<std::size_t>(leader)).name;
    t.timestamp = sim_.now();
    t.signature = sign_placeholder(t.sender_id);
    return t;
  }

  void trace(const std::string& kind, nlohmann::json payload) {
    payload["shard"] = st_.shard_id;
    sim_.trace().record(sim_.now(), name(), kind, payload);
  }

  bool is_leader(int i) const {
    const auto& n = nodes_.at(static_cast<std::size_t>(i));
    return n.role == NodeRole::leader && !sim_.is_crashed(n.name);
  }

  int quorum_needed() const {
    return std::max(1, static_cast<int>(std::ceil(spec_.quorum_fraction * cfg_.s_d - 1e-12)));
  }

  double cold_start_threshold() const {
    return spec_.loss_kind == LossKind::cross_entropy ? 0.0 : -std::numeric_limits<double>::infinity();
  }

  // Latest basic_round_model record in a node's log (committed or not).
  static const SubchainTx* latest_round_record(const ShardNode& n) {
    for (auto b = n.log.rbegin(); b != n.log.rend(); ++b) {
      for (auto t = b->txs.rbegin(); t != b->txs.rend(); ++t) {
        if (t->kind == SubchainTxKind::basic_round_model) return &*t;
      }
    }
    return nullptr;
  }

  static const SubchainTx* latest_control(const ShardNode& n) {
    for (auto b = n.log.rbegin(); b != n.log.rend(); ++b) {
      for (auto t = b->txs.rbegin(); t != b->txs.rend(); ++t) {
        if (t->kind != SubchainTxKind::local_model) return &*t;
      }
    }
    return nullptr;
  }

  static const SubchainTx* latest_iteration_start(const ShardNode& n) {
    for (auto b = n.log.rbegin(); b != n.log.rend(); ++b) {
      for (auto t = b->txs.rbegin(); t != b->txs.rend(); ++t) {
        if (t->kind == SubchainTxKind::iteration_start) return &*t;
      }
    }
    return nullptr;
  }

  // --- faults and elections -------------------------------------------------

  void on_crash(int i) {
    trace("node_crash", {{"node", node(i).name}, {"role", to_string(node(i).role)}});
  }

  void on_recover(int i) {
    auto& n = node(i);
    n.role = NodeRole::follower;
    n.leader_hint = -1;
    n.last_heard = sim_.now();
    trace("node_recover", {{"node", n.name}});
    arm_election_check(i);
  }

  void arm_election_check(int i) {
    sim_.timer(node(i).name, cfg_.heartbeat_interval, "election_check", [this, i] {
      auto& n = node(i);
      if (n.role != NodeRole::leader && sim_.now() - n.last_heard >= cfg_.heartbeat_timeout) {
        const bool leader_dead = n.leader_hint < 0 || sim_.is_crashed(node(n.leader_hint).name) ||
                                 node(n.leader_hint).role != NodeRole::leader;
        if (leader_dead && !finished()) elect(i);
      }
      arm_election_check(i);
    });
  }

  bool finished() const { return stopped_ || failed_; }

  void elect(int detector) {
    std::vector<bool> live(nodes_.size());
    for (std::size_t k = 0; k < nodes_.size(); ++k) live[k] = !sim_.is_crashed(nodes_[k].name);
    auto winner = detect_and_reelect(nodes_, live, sim_.now());
    if (!winner) {
      if (!stall_reported_) trace("stall", {{"detector", node(detector).name}});
      stall_reported_ = true;
      return;
    }
    stall_reported_ = false;
    trace("election", {{"detector", node(detector).name}, {"leader", node(*winner).name}, {"term", node(*winner).term}});
    become_leader(*winner);
  }

  void become_leader(int i) {
    auto& n = node(i);
    n.role = NodeRole::leader;
    n.leader_hint = i;
    if (leaders_by_term_.count(n.term) && leaders_by_term_[n.term] != i) {
      throw error(errc::contract_violation, "two leaders in one term");
    }
    leaders_by_term_[n.term] = i;
    std::fill(next_index_.begin(), next_index_.end(), n.log.size());
    std::fill(match_len_.begin(), match_len_.end(), 0);
    std::fill(last_ack_.begin(), last_ack_.end(), std::nullopt);
    in_flight_.reset();
    pending_control_.reset();
    pending_txs_.clear();
    progress_.reset();
    awaiting_bim_ = false;
    heartbeat(i);
    resume(i);
  }

  // Re-derives the protocol position from the new leader's log.
  void resume(int leader) {
    if (finished()) return;
    const auto& n = node(leader);
    const SubchainTx* last = latest_control(n);
    if (!last) {
      next_iteration_ = 0;
      request_bim(leader, std::nullopt);
      return;
    }
    switch (last->kind) {
      case SubchainTxKind::iteration_start: {
        SubchainTx rec = control(leader, SubchainTxKind::basic_round_model);
        rec.iteration = last->iteration;
        rec.task_id = last->task_id;
        rec.round_no = 0;
        rec.attempt = 0;
        rec.params_hash = last->params_hash;
        rec.a_tau = threshold_for(last->params_hash, last->iteration, 0);
        pending_control_ = rec;
        try_propose(leader);
        break;
      }
      case SubchainTxKind::basic_round_model: {
        SubchainTx rec = *last;
        rec.sender_id = n.name;
        rec.signature = sign_placeholder(n.name);
        rec.timestamp = sim_.now();
        rec.attempt = last->attempt + 1;
        retries_ = last->attempt + 1;
        if (retries_ > cfg_.max_retries) {
          fail("round " + std::to_string(rec.round_no) + " exceeded max_retries after leader change");
          return;
        }
        pending_control_ = rec;
        try_propose(leader);
        break;
      }
      case SubchainTxKind::shard_model: submit_and_continue(leader, *last); break;
      case SubchainTxKind::local_model: break;
    }
  }

  void request_bim(int leader, std::optional<MainchainTx> submission) {
    awaiting_bim_ = true;
    if (hooks_.request_bim) hooks_.request_bim(*this, leader, std::move(submission));
  }

  double threshold_for(const ContentHash& w_brm, int iteration, int round) {
    if (const auto* f = std::get_if<FixedThreshold>(&spec_.a_tau_policy)) return f->value;
    if (iteration == 0 && round == 0 && completed_iterations_ == 0) return cold_start_threshold();
    return validation_score(store_.get_params(w_brm), test_, spec_.loss_kind);
  }

  // --- replication ------------------------------------------------------------

  void heartbeat(int leader) {
    if (!is_leader(leader)) return;
    for (int f = 0; f < cfg_.b; ++f) {
      if (f != leader) send_append(leader, f);
    }
    const auto term = node(leader).term;
    sim_.timer(node(leader).name, cfg_.heartbeat_interval, "heartbeat", [this, leader, term] {
      if (is_leader(leader) && node(leader).term == term) heartbeat(leader);
    });
  }

  struct Append {
    std::uint64_t term;
    int leader;
    std::size_t prev_len;
    ContentHash prev_hash;
    std::vector<Block> entries;
    std::size_t leader_commit;
  };

  void send_append(int leader, int f) {
    const auto& l = node(leader);
    Append msg;
    msg.term = l.term;
    msg.leader = leader;
    msg.prev_len = std::min(next_index_[static_cast<std::size_t>(f)], l.log.size());
    msg.prev_hash = msg.prev_len == 0 ? ContentHash() : l.log[msg.prev_len - 1].hash();
    msg.entries.assign(l.log.begin() + static_cast<std::ptrdiff_t>(msg.prev_len), l.log.end());
    msg.leader_commit = l.commit_len;
    sim_.send(l.name, node(f).name, Link::intra_shard, "append", [this, f, msg = std::move(msg)] { on_append(f, msg); });
  }

  // Follower re-verification: signatures, plus every local model must still
  // clear the A_tau of its round record.
  bool verify_entries(const ShardNode& n, std::size_t prev_len, const std::vector<Block>& entries) {
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const auto& blk = entries[k];
      if (!verify_block_signatures(blk)) return false;
      for (const auto& t : blk.txs) {
        if (t.kind != SubchainTxKind::local_model) continue;
        const SubchainTx* round = find_round_record(n, prev_len, entries, k, t);
        if (!round) return false;
        if (!validate_tx(t, test_, round->a_tau, spec_.loss_kind, store_).valid()) return false;
      }
    }
    return true;
  }

  static const SubchainTx* find_round_record(const ShardNode& n, std::size_t prev_len, const std::vector<Block>& entries,
                                             std::size_t upto, const SubchainTx& t) {
    auto matches = [&](const SubchainTx& r) {
      return r.kind == SubchainTxKind::basic_round_model && r.iteration == t.iteration && r.round_no == t.round_no &&
             r.attempt == t.attempt;
    };
    for (std::size_t k = upto + 1; k-- > 0;) {
      for (const auto& r : entries[k].txs) {
        if (matches(r)) return &r;
      }
    }
    for (std::size_t k = std::min(prev_len, n.log.size()); k-- > 0;) {
      for (const auto& r : n.log[k].txs) {
        if (matches(r)) return &r;
      }
    }
    return nullptr;
  }

  void on_append(int f, const Append& msg) {
    auto& n = node(f);
    if (msg.term < n.term) {
      reply(f, msg.leader, n.term, false, n.log.size());
      return;
    }
    if (msg.term > n.term || n.role != NodeRole::follower) {
      n.term = msg.term;
      n.role = NodeRole::follower;
    }
    n.leader_hint = msg.leader;
    n.last_heard = sim_.now();
    if (n.log.size() < msg.prev_len || (msg.prev_len > 0 && n.log[msg.prev_len - 1].hash() != msg.prev_hash)) {
      const std::size_t hint = n.log.size() < msg.prev_len ? n.log.size() : msg.prev_len - 1;
      reply(f, msg.leader, n.term, false, hint);
      return;
    }
    if (!msg.entries.empty() && !verify_entries(n, msg.prev_len, msg.entries)) {
      trace("block_rejected", {{"node", n.name}});
      reply(f, msg.leader, n.term, false, msg.prev_len);
      return;
    }
    for (std::size_t k = 0; k < msg.entries.size(); ++k) {
      const std::size_t idx = msg.prev_len + k;
      if (idx < n.log.size()) {
        if (n.log[idx].hash() == msg.entries[k].hash()) continue;
        if (idx < n.commit_len) throw error(errc::contract_violation, "attempt to overwrite committed block");
        n.log.resize(idx);
      }
      n.log.push_back(msg.entries[k]);
    }
    const std::size_t match = msg.prev_len + msg.entries.size();
    n.commit_len = std::max(n.commit_len, std::min(msg.leader_commit, match));
    reply(f, msg.leader, n.term, true, match);
  }

  void reply(int f, int leader, std::uint64_t term, bool ok, std::size_t len) {
    sim_.send(node(f).name, node(leader).name, Link::intra_shard, ok ? "ack" : "nack",
              [this, f, leader, term, ok, len] { on_reply(leader, f, term, ok, len); });
  }

  void on_reply(int leader, int f, std::uint64_t term, bool ok, std::size_t len) {
    auto& l = node(leader);
    if (term > l.term) {
      l.term = term;
      l.role = NodeRole::follower;
      return;
    }
    if (l.role != NodeRole::leader || term != l.term) return;
    auto& next = next_index_[static_cast<std::size_t>(f)];
    if (!ok) {
      last_ack_[static_cast<std::size_t>(f)] = sim_.now();
      const std::size_t back = next == 0 ? 0 : next - 1;
      next = std::min(len, back);
      send_append(leader, f);
      return;
    }
    last_ack_[static_cast<std::size_t>(f)] = sim_.now();
    match_len_[static_cast<std::size_t>(f)] = std::max(match_len_[static_cast<std::size_t>(f)], len);
    next = std::max(next, len);
    advance_commit(leader);
  }

  void advance_commit(int leader) {
    auto& l = node(leader);
    if (!in_flight_) return;
    const std::size_t idx = *in_flight_;
    if (idx >= l.log.size() || l.log[idx].term != l.term) return;
    std::vector<bool> acks;
    for (int f = 0; f < cfg_.b; ++f) {
      if (f != leader) acks.push_back(match_len_[static_cast<std::size_t>(f)] >= idx + 1);
    }
    if (replicate_block(l.log[idx], acks, cfg_.b) != ReplicationOutcome::committed) return;
    const std::size_t first_new = l.commit_len;
    l.commit_len = idx + 1;
    in_flight_.reset();
    for (std::size_t k = first_new; k < l.commit_len; ++k) {
      ++committed_blocks_;
      last_commit_time_ = sim_.now();
      trace("block_commit", {{"node", l.name}, {"block_no", l.log[k].block_no}, {"txs", l.log[k].txs.size()},
                             {"votes", l.log[k].commit_votes}, {"hash", l.log[k].hash().hex().substr(0, 16)}});
    }
    for (std::size_t k = first_new; k < l.commit_len; ++k) apply_committed(leader, l.log[k], superseded(l, k));
    if (is_leader(leader)) try_propose(leader);
  }

  // Control records go out alone; local models are batched by form_block.
  void try_propose(int leader, bool period_elapsed = false) {
    if (!is_leader(leader) || in_flight_ || finished()) return;
    auto& l = node(leader);
    std::optional<Block> blk;
    if (pending_control_) {
      blk = Block{l.log.size(), l.tail_hash(), l.term, {*pending_control_}, l.name, 0};
      pending_control_.reset();
    } else {
      blk = form_block(pending_txs_, cfg_.block_threshold, period_elapsed, l.name, l.log.size(), l.tail_hash(), l.term);
      if (!blk && !pending_txs_.empty() && !block_timer_armed_) {
        block_timer_armed_ = true;
        const auto term = l.term;
        sim_.timer(l.name, cfg_.block_period, "block_period", [this, leader, term] {
          block_timer_armed_ = false;
          if (is_leader(leader) && node(leader).term == term) try_propose(leader, true);
        });
      }
    }
    if (!blk) return;
    const std::size_t idx = l.log.size();
    l.log.push_back(std::move(*blk));
    in_flight_ = idx;
    const auto term = l.term;
    const auto hash = l.log[idx].hash();
    for (int f = 0; f < cfg_.b; ++f) {
      if (f != leader) send_append(leader, f);
    }
    sim_.timer(l.name, cfg_.replication_timeout, "replication_timeout", [this, leader, term, idx, hash] {
      on_replication_timeout(leader, term, idx, hash);
    });
  }

  void on_replication_timeout(int leader, std::uint64_t term, std::size_t idx, const ContentHash& hash) {
    auto& l = node(leader);
    if (!is_leader(leader) || l.term != term || !in_flight_ || *in_flight_ != idx) return;
    if (idx >= l.log.size() || l.log[idx].hash() != hash) return;
    Block failed = l.log[idx];
    l.log.resize(idx);
    in_flight_.reset();
    for (auto& ni : next_index_) ni = std::min(ni, l.log.size());
    for (auto& m : match_len_) m = std::min(m, l.log.size());
    trace("replicate_failed", {{"node", l.name}, {"block_no", failed.block_no}, {"txs", failed.txs.size()}});
    for (auto& t : failed.txs) {
      if (t.kind == SubchainTxKind::local_model) {
        pending_txs_.push_back(std::move(t));
      } else {
        pending_control_ = std::move(t);
      }
    }
    try_propose(leader, true);
  }

  // --- training -------------------------------------------------------------

  struct RoundProgress {
    int iteration = 0;
    int round_no = 0;
    int attempt = 0;
    std::string task_id;
    ContentHash w_brm;
    double a_tau = 0.0;
    std::vector<std::uint64_t> selected;
    std::set<std::string> selected_names;
    std::set<std::string> invalid;
    std::set<std::string> received;
    std::vector<SubchainTx> committed;
    bool devices_triggered = false;
    bool done = false;
  };

  // True when a later block in the log carries a control record, so the
  // leader must not act on this block's control records.
  static bool superseded(const ShardNode& n, std::size_t k) {
    for (std::size_t j = k + 1; j < n.log.size(); ++j) {
      for (const auto& t : n.log[j].txs) {
        if (t.kind != SubchainTxKind::local_model) return true;
      }
    }
    return false;
  }

  void apply_committed(int leader, const Block& blk, bool stale_control) {
    for (const auto& t : blk.txs) {
      switch (t.kind) {
        case SubchainTxKind::iteration_start: {
          st_.iteration = t.iteration;
          st_.current_task_id = t.task_id;
          trace("iteration_start", {{"iteration", t.iteration}, {"w_bim", t.params_hash.hex().substr(0, 16)},
                                    {"approves", t.approve_set.size()}});
          if (!is_leader(leader) || stale_control) break;
          SubchainTx rec = control(leader, SubchainTxKind::basic_round_model);
          rec.iteration = t.iteration;
          rec.task_id = t.task_id;
          rec.params_hash = t.params_hash;
          rec.a_tau = threshold_for(t.params_hash, t.iteration, 0);
          retries_ = 0;
          pending_control_ = rec;
          break;
        }
        case SubchainTxKind::basic_round_model: {
          st_.round_no = t.round_no;
          st_.attempt = t.attempt;
          st_.w_brm = t.params_hash;
          st_.a_tau = t.a_tau;
          trace("round_start", {{"iteration", t.iteration}, {"round", t.round_no}, {"attempt", t.attempt},
                                {"a_tau", t.a_tau}, {"w_brm", t.params_hash.hex().substr(0, 16)}});
          if (!is_leader(leader) || stale_control) break;
          progress_ = RoundProgress{};
          progress_->iteration = t.iteration;
          progress_->round_no = t.round_no;
          progress_->attempt = t.attempt;
          progress_->task_id = t.task_id;
          progress_->w_brm = t.params_hash;
          progress_->a_tau = t.a_tau;
          pending_txs_.clear();
          select_and_trigger(leader);
          break;
        }
        case SubchainTxKind::local_model: {
          if (progress_ && matches(*progress_, t) && !progress_->done) {
            progress_->committed.push_back(t);
            st_.pending_valid.push_back(t);
          }
          break;
        }
        case SubchainTxKind::shard_model: {
          if (is_leader(leader) && !stale_control) submit_and_continue(leader, t);
          break;
        }
      }
    }
    if (is_leader(leader) && progress_ && progress_->devices_triggered && !progress_->done) maybe_finish_round(leader, false);
  }

  static bool matches(const RoundProgress& p, const SubchainTx& t) {
    return t.iteration == p.iteration && t.round_no == p.round_no && t.attempt == p.attempt;
  }

  std::vector<StatusRecord> pool_status() {
    std::vector<StatusRecord> out;
    out.reserve(pool_.size());
    for (auto* d : pool_) {
      walk_status(d->profile, cfg_.status_walk_sd, walk_rng_);
      out.push_back(report_status(d->profile, sim_.now()));
    }
    return out;
  }

  void select_and_trigger(int leader) {
    if (!is_leader(leader) || !progress_ || progress_->done) return;
    auto chosen = select_devices(pool_status(), cfg_.s_d, cfg_.battery_min, cfg_.network_min, select_rng_);
    if (!chosen) {
      trace("round_postponed", {{"round", progress_->round_no}, {"attempt", progress_->attempt}});
      const auto term = node(leader).term;
      const auto key = std::make_tuple(progress_->iteration, progress_->round_no, progress_->attempt);
      sim_.timer(node(leader).name, cfg_.postpone_delay, "postpone", [this, leader, term, key] {
        if (is_leader(leader) && node(leader).term == term && progress_ &&
            std::make_tuple(progress_->iteration, progress_->round_no, progress_->attempt) == key) {
          select_and_trigger(leader);
        }
      });
      return;
    }
    auto& p = *progress_;
    p.selected = *chosen;
    p.devices_triggered = true;
    nlohmann::json ids = nlohmann::json::array();
    for (auto id : p.selected) ids.push_back(id);
    trace("devices_selected", {{"round", p.round_no}, {"attempt", p.attempt}, {"devices", ids}});

    const RoundTicket ticket{p.task_id, p.iteration, p.round_no, p.attempt};
    const ContentHash w_brm = p.w_brm;
    // Validators rotate over the nodes the leader has heard from recently.
    std::vector<int> responsive{leader};
    for (int f = 0; f < cfg_.b; ++f) {
      const auto heard = last_ack_[static_cast<std::size_t>(f)];
      if (f != leader && heard && sim_.now() - *heard <= cfg_.heartbeat_timeout) responsive.push_back(f);
    }
    std::sort(responsive.begin(), responsive.end());
    for (std::size_t k = 0; k < p.selected.size(); ++k) {
      DeviceAgent* agent = find_device(p.selected[k]);
      const int validator = responsive[k % responsive.size()];
      p.selected_names.insert(agent->profile.name());
      sim_.send(node(leader).name, agent->profile.name(), Link::intra_shard, "round_model",
                [this, agent, ticket, w_brm, validator] { device_train(agent, ticket, w_brm, validator); });
    }
    const auto term = node(leader).term;
    const auto key = std::make_tuple(p.iteration, p.round_no, p.attempt);
    sim_.timer(node(leader).name, spec_.round_timeout, "round_timeout", [this, leader, term, key] {
      if (is_leader(leader) && node(leader).term == term && progress_ && !progress_->done &&
          std::make_tuple(progress_->iteration, progress_->round_no, progress_->attempt) == key) {
        maybe_finish_round(leader, true);
      }
    });
  }

  DeviceAgent* find_device(std::uint64_t id) {
    for (auto* d : pool_) {
      if (d->profile.device_id == id) return d;
    }
    throw error(errc::contract_violation, "selected device not in pool");
  }

  void device_train(DeviceAgent* agent, const RoundTicket& ticket, const ContentHash& w_brm, int target) {
    Rng rng = training_stream(sim_.seed(), *agent);
    ++agent->trainings;
    const ParamVector start = store_.get_params(w_brm);
    LocalUpdate up = run_local_update(agent->profile, agent->behavior, start, spec_, ticket, store_, rng, sim_.now());
    const std::string dev = agent->profile.name();
    const int gradients = up.gradients;
    sim_.timer(dev, up.delivery_delay, "local_update_done", [this, agent, dev, target, gradients, tx = std::move(up.tx)] {
      if (hooks_.on_training) hooks_.on_training(*agent, gradients);
      sim_.send(dev, node(target).name, Link::intra_shard, "local_tx", [this, target, tx] { node_receive(target, tx); });
    });
  }

  // Validate, then forward valid txs to the leader and discard the rest.
  void node_receive(int i, const SubchainTx& tx) {
    auto& n = node(i);
    const SubchainTx* round = latest_round_record(n);
    if (!round || round->iteration != tx.iteration || round->round_no != tx.round_no || round->attempt != tx.attempt) {
      trace("tx_stale", {{"node", n.name}, {"sender", tx.sender_id}});
      return;
    }
    const auto res = validate_tx(tx, test_, round->a_tau, spec_.loss_kind, store_);
    trace("validation", {{"node", n.name}, {"sender", tx.sender_id}, {"iteration", tx.iteration},
                         {"round", tx.round_no}, {"attempt", tx.attempt}, {"score", res.score},
                         {"a_tau", round->a_tau}, {"verdict", to_string(res.verdict)}});
    const int leader = n.role == NodeRole::leader ? i : n.leader_hint;
    if (leader < 0) return;
    if (leader == i) {
      leader_receive(i, tx, res.valid());
      return;
    }
    sim_.send(n.name, node(leader).name, Link::intra_shard, res.valid() ? "forward_tx" : "invalid_notice",
              [this, leader, tx, ok = res.valid()] { leader_receive(leader, tx, ok); });
  }

  void leader_receive(int leader, const SubchainTx& tx, bool valid) {
    if (!is_leader(leader) || !progress_ || progress_->done || !matches(*progress_, tx)) return;
    auto& p = *progress_;
    if (!p.selected_names.count(tx.sender_id) || p.received.count(tx.sender_id)) return;
    p.received.insert(tx.sender_id);
    if (!valid) {
      p.invalid.insert(tx.sender_id);
      maybe_finish_round(leader, false);
      return;
    }
    pending_txs_.push_back(tx);
    try_propose(leader);
  }

  void maybe_finish_round(int leader, bool timed_out) {
    auto& p = *progress_;
    const std::size_t responded = p.committed.size() + p.invalid.size();
    const bool all_in = responded >= p.selected.size();
    if (!all_in && !timed_out) return;
    const int needed = quorum_needed();
    if (static_cast<int>(p.committed.size()) < needed) {
      if (!all_in && !timed_out) return;
      abandon_round(leader, timed_out ? "timeout" : "insufficient_valid");
      return;
    }
    p.done = true;
    auto txs = p.committed;
    std::sort(txs.begin(), txs.end(), [](const SubchainTx& a, const SubchainTx& b) { return a.sender_id < b.sender_id; });
    std::vector<WeightedModel> models;
    models.reserve(txs.size());
    for (const auto& t : txs) models.push_back({store_.get_params(t.params_hash), t.dataset_size});
    if (hooks_.on_aggregate) hooks_.on_aggregate(*this, txs);
    const ParamVector w_s = weighted_aggregate(models);
    const ContentHash w_s_hash = store_.put_params(w_s);
    nlohmann::json who = nlohmann::json::array();
    for (const auto& t : txs) who.push_back(t.sender_id);
    trace("round_commit", {{"iteration", p.iteration}, {"round", p.round_no}, {"attempt", p.attempt},
                           {"m", txs.size()}, {"n", p.selected.size()}, {"timed_out", timed_out},
                           {"aggregated", who}, {"w_s", w_s_hash.hex().substr(0, 16)}});
    st_.pending_valid.clear();
    pending_txs_.clear();
    retries_ = 0;
    if (p.round_no + 1 < spec_.rounds_per_iteration) {
      SubchainTx rec = control(leader, SubchainTxKind::basic_round_model);
      rec.iteration = p.iteration;
      rec.task_id = p.task_id;
      rec.round_no = p.round_no + 1;
      rec.params_hash = w_s_hash;
      rec.a_tau = threshold_for(w_s_hash, p.iteration, p.round_no + 1);
      pending_control_ = rec;
    } else {
      SubchainTx rec = control(leader, SubchainTxKind::shard_model);
      rec.iteration = p.iteration;
      rec.task_id = p.task_id;
      rec.round_no = p.round_no;
      rec.params_hash = w_s_hash;
      pending_control_ = rec;
    }
    try_propose(leader);
  }

  void abandon_round(int leader, const std::string& reason) {
    auto& p = *progress_;
    p.done = true;
    trace("round_abandon", {{"iteration", p.iteration}, {"round", p.round_no}, {"attempt", p.attempt},
                            {"valid", p.committed.size()}, {"needed", quorum_needed()}, {"reason", reason}});
    st_.pending_valid.clear();
    pending_txs_.clear();
    ++retries_;
    if (retries_ > cfg_.max_retries) {
      fail("round " + std::to_string(p.round_no) + " of iteration " + std::to_string(p.iteration) +
           " abandoned more than max_retries times");
      return;
    }
    SubchainTx rec = control(leader, SubchainTxKind::basic_round_model);
    rec.iteration = p.iteration;
    rec.task_id = p.task_id;
    rec.round_no = p.round_no;
    rec.attempt = p.attempt + 1;
    rec.params_hash = p.w_brm;
    rec.a_tau = p.a_tau;
    pending_control_ = rec;
    try_propose(leader);
  }

  void submit_and_continue(int leader, const SubchainTx& shard_model) {
    const SubchainTx* start = latest_iteration_start(node(leader));
    if (!start) throw error(errc::contract_violation, "shard model without iteration start");
    MainchainTx tx;
    tx.sender_shard_id = name();
    tx.task_id = shard_model.task_id;
    tx.params_hash = shard_model.params_hash;
    tx.approves = start->approve_set;
    tx.timestamp = sim_.now();
    tx.seal();
    ++completed_iterations_;
    next_iteration_ = shard_model.iteration + 1;
    trace("shard_submit", {{"iteration", shard_model.iteration}, {"tx_id", tx.tx_id.hex().substr(0, 16)},
                           {"w_s", shard_model.params_hash.hex().substr(0, 16)}});
    if (hooks_.on_iteration_done) hooks_.on_iteration_done(*this, shard_model.iteration, shard_model.params_hash);
    progress_.reset();
    // After a stop signal the mainchain answers this request with stop.
    request_bim(leader, std::move(tx));
  }

  void fail(const std::string& reason) {
    trace("iteration_error", {{"reason", reason}});
    finish(true, reason);
  }

  void finish(bool failed, const std::string& reason) {
    if (finished()) return;
    if (failed) {
      failed_ = true;
      if (hooks_.on_failure) hooks_.on_failure(*this, reason);
    } else {
      stopped_ = true;
      trace("shard_stopped", {{"reason", reason}});
    }
  }

  ShardConfig cfg_;
  TaskSpec spec_;
  const LabeledDataset& test_;
  std::vector<DeviceAgent*> pool_;
  Simulator& sim_;
  Store& store_;
  Hooks hooks_;

  ShardState st_;
  std::vector<ShardNode> nodes_;
  std::vector<std::size_t> next_index_;
  std::vector<std::size_t> match_len_;
  std::vector<std::optional<SimTime>> last_ack_;
  std::optional<std::size_t> in_flight_;
  std::optional<SubchainTx> pending_control_;
  std::vector<SubchainTx> pending_txs_;
  std::optional<RoundProgress> progress_;
  bool block_timer_armed_ = false;
  bool awaiting_bim_ = false;
  bool stopped_ = false;
  bool failed_ = false;
  bool stall_reported_ = false;
  int next_iteration_ = 0;
  int retries_ = 0;
  int completed_iterations_ = 0;
  std::uint64_t committed_blocks_ = 0;
  std::optional<SimTime> last_commit_time_;
  std::map<std::uint64_t, int> leaders_by_term_;
  Rng select_rng_;
  Rng walk_rng_;
};

// Runs one training iteration for a lone shard: w_bim in, final shard model out. The
// mainchain side is stubbed so the shard sees w_bim as its first iteration.
struct SingleIterationResult {
  ParamVector w_s;
  std::vector<std::vector<SubchainTx>> aggregated_per_round;
  Trace trace;
  int gradients = 0;
};

inline SingleIterationResult shard_training_iteration(const ParamVector& w_bim, const TaskSpec& spec,
                                                      std::vector<DeviceAgent>& devices, const LabeledDataset& test,
                                                      ShardConfig cfg = {}, Simulator::Options sim_opts = {},
                                                      const std::vector<FaultSpec>& faults = {},
                                                      SimTime t_max = 1e7) {
  Simulator sim(sim_opts);
  MemoryStore store;
  const ContentHash bim_hash = store.put_params(w_bim);
  std::vector<DeviceAgent*> pool;
  for (auto& d : devices) pool.push_back(&d);

  SingleIterationResult out;
  std::optional<ContentHash> result;
  Shard::Hooks hooks;
  hooks.request_bim = [&](Shard& shard, int node, std::optional<MainchainTx> submission) {
    const auto term = shard.nodes()[static_cast<std::size_t>(node)].term;
    const bool stop = submission.has_value();
    sim.send(shard.node_name(node), "main", Link::shard_to_mainchain, "bim_request", [&, node, term, stop] {
      sim.send("main", shard.node_name(node), Link::shard_to_mainchain, "bim_reply", [&, node, term, stop] {
        shard.deliver_bim(node, term, BimReply{stop, bim_hash, {}});
      });
    });
  };
  hooks.on_iteration_done = [&](Shard&, int, const ContentHash& w_s) { result = w_s; };
  hooks.on_training = [&](const DeviceAgent&, int g) { out.gradients += g; };
  hooks.on_aggregate = [&](Shard&, const std::vector<SubchainTx>& txs) { out.aggregated_per_round.push_back(txs); };
  hooks.on_failure = [&](Shard&, const std::string& why) { throw error(errc::iteration_failed, why); };

  Shard shard(0, cfg, spec, test, pool, sim, store, hooks);
  sim.inject_fault(faults);
  shard.start();
  sim.run_until([&] { return result.has_value(); }, t_max);
  if (!result) throw error(errc::iteration_failed, "shard iteration did not complete before t_max");
  out.w_s = store.get_params(*result);
  out.trace = sim.trace();
  return out;
}

}  // namespace chainfl
