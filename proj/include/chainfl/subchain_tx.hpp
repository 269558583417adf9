#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainfl/store.hpp"

namespace chainfl {

using SimTime = double;

enum class SubchainTxKind {
  local_model,       // device -> shard
  iteration_start,   // leader: basic iteration model and its ApproveSet
  basic_round_model, // leader: w_brm published for a round attempt, with the A_tau snapshot
  shard_model,       // leader: final w_s of an iteration
};

inline const char* to_string(SubchainTxKind k) {
  switch (k) {
    case SubchainTxKind::local_model: return "local_model";
    case SubchainTxKind::iteration_start: return "iteration_start";
    case SubchainTxKind::basic_round_model: return "basic_round_model";
    case SubchainTxKind::shard_model: return "shard_model";
  }
  return "unknown";
}

struct SubchainTx {
  SubchainTxKind kind = SubchainTxKind::local_model;
  std::string sender_id;
  std::string task_id;
  int iteration = 0;
  int round_no = 0;
  int attempt = 0;
  ContentHash params_hash;
  SimTime timestamp = 0.0;
  std::string signature;
  std::uint64_t dataset_size = 0;      // local_model: |D_j|, the aggregation weight
  double a_tau = 0.0;                  // basic_round_model
  std::vector<ContentHash> approve_set;  // iteration_start

  nlohmann::json to_json() const {
    nlohmann::json approves = nlohmann::json::array();
    for (const auto& h : approve_set) approves.push_back(h.hex());
    return {{"kind", to_string(kind)},       {"sender_id", sender_id}, {"task_id", task_id},
            {"iteration", iteration},        {"round_no", round_no},   {"attempt", attempt},
            {"params_hash", params_hash.hex()}, {"timestamp", timestamp}, {"signature", signature},
            {"dataset_size", dataset_size},  {"a_tau", a_tau},         {"approve_set", approves}};
  }

  ContentHash id() const { return ContentHash::of(to_json().dump()); }

  friend bool operator==(const SubchainTx&, const SubchainTx&) = default;
};

inline std::string sign_placeholder(const std::string& sender) { return "sig:" + sender; }

}  // namespace chainfl
