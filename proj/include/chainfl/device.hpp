#pragma once

// Device agents: status reports, local training on the basic round model and
// the subchain transaction that carries the result. Adversarial and straggler
// behaviour is applied here and nowhere else.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <variant>

#include "chainfl/error.hpp"
#include "chainfl/fl_task.hpp"
#include "chainfl/model_math.hpp"
#include "chainfl/store.hpp"
#include "chainfl/subchain_tx.hpp"

namespace chainfl {

struct DeviceProfile {
  std::uint64_t device_id = 0;
  LabeledDataset dataset;
  double battery = 1.0;
  double network_quality = 1.0;
  bool willing = true;
  SimTime compute_delay = 1.0;  // ticks per local epoch

  std::string name() const { return "dev" + std::to_string(device_id); }

  void validate() const {
    if (battery < 0.0 || battery > 1.0) throw error(errc::config, "battery out of [0,1]");
    if (network_quality < 0.0 || network_quality > 1.0) throw error(errc::config, "network_quality out of [0,1]");
    if (compute_delay < 0.0) throw error(errc::config, "compute_delay must be >= 0");
  }
};

struct Honest {};
struct Straggler {
  SimTime extra_delay = 1.0;
};
struct GaussianNoise {
  double sd = 10.0;
};
struct SignFlip {};
struct Scale {
  double factor = 10.0;
};
using Attack = std::variant<GaussianNoise, SignFlip, Scale>;
struct Malicious {
  Attack attack = GaussianNoise{};
};
using Behavior = std::variant<Honest, Straggler, Malicious>;

inline void validate(const Behavior& b) {
  if (const auto* s = std::get_if<Straggler>(&b); s && !(s->extra_delay > 0.0)) {
    throw error(errc::config, "straggler extra_delay must be > 0");
  }
  if (const auto* m = std::get_if<Malicious>(&b)) {
    if (const auto* g = std::get_if<GaussianNoise>(&m->attack); g && !(g->sd > 0.0)) {
      throw error(errc::config, "gaussian noise sd must be > 0");
    }
  }
}

struct StatusRecord {
  std::uint64_t device_id = 0;
  bool willing = false;
  double battery = 0.0;
  double network_quality = 0.0;
  std::size_t dataset_size = 0;
  SimTime at = 0.0;

  bool eligible(double battery_min, double network_min) const {
    return willing && dataset_size > 0 && battery >= battery_min && network_quality >= network_min;
  }

  friend bool operator==(const StatusRecord&, const StatusRecord&) = default;
};

inline StatusRecord report_status(const DeviceProfile& p, SimTime now) {
  return {p.device_id, p.willing, p.battery, p.network_quality, p.dataset.size(), now};
}

// Bounded random walk of the status fields; sd == 0 leaves them untouched.
inline void walk_status(DeviceProfile& p, double sd, Rng& rng) {
  if (sd <= 0.0) return;
  std::normal_distribution<double> step(0.0, sd);
  p.battery = std::clamp(p.battery + step(rng), 0.0, 1.0);
  p.network_quality = std::clamp(p.network_quality + step(rng), 0.0, 1.0);
}

inline ParamVector apply_attack(const Attack& attack, const ParamVector& trained, Rng& rng) {
  return std::visit(
      [&](const auto& a) -> ParamVector {
        using A = std::decay_t<decltype(a)>;
        ParamVector out(trained.dim());
        if constexpr (std::is_same_v<A, GaussianNoise>) {
          std::normal_distribution<double> noise(0.0, a.sd);
          for (std::size_t i = 0; i < out.dim(); ++i) out[i] = noise(rng);
        } else if constexpr (std::is_same_v<A, SignFlip>) {
          for (std::size_t i = 0; i < out.dim(); ++i) out[i] = -trained[i];
        } else {
          for (std::size_t i = 0; i < out.dim(); ++i) out[i] = a.factor * trained[i];
        }
        return out;
      },
      attack);
}

struct RoundTicket {
  std::string task_id;
  int iteration = 0;
  int round_no = 0;
  int attempt = 0;
};

struct LocalUpdate {
  SubchainTx tx;
  SimTime delivery_delay = 0.0;  // compute time before the tx leaves the device
  int gradients = 0;             // local epochs spent
};

inline SimTime training_time(const DeviceProfile& p, const Behavior& b, const HyperParams& hp) {
  SimTime t = static_cast<SimTime>(hp.epochs) * p.compute_delay;
  if (const auto* s = std::get_if<Straggler>(&b)) t += s->extra_delay;
  return t;
}

// Every behaviour trains first; malicious devices then replace or perturb
// the result. The dataset-size field always reports the true |D_j|.
inline LocalUpdate run_local_update(const DeviceProfile& profile, const Behavior& behavior, const ParamVector& w_brm,
                                    const TaskSpec& spec, const RoundTicket& ticket, Store& store, Rng& rng,
                                    SimTime now) {
  ParamVector trained = local_train(w_brm, profile.dataset, spec.hp, spec.loss_kind, rng);
  if (const auto* m = std::get_if<Malicious>(&behavior)) trained = apply_attack(m->attack, trained, rng);

  LocalUpdate up;
  up.delivery_delay = training_time(profile, behavior, spec.hp);
  up.gradients = spec.hp.epochs;
  up.tx.kind = SubchainTxKind::local_model;
  up.tx.sender_id = profile.name();
  up.tx.task_id = ticket.task_id;
  up.tx.iteration = ticket.iteration;
  up.tx.round_no = ticket.round_no;
  up.tx.attempt = ticket.attempt;
  up.tx.params_hash = store.put_params(trained);
  // Generation time; a straggler's extra delay is spent in transit, not in the payload.
  up.tx.timestamp = now + static_cast<SimTime>(spec.hp.epochs) * profile.compute_delay;
  up.tx.signature = sign_placeholder(up.tx.sender_id);
  up.tx.dataset_size = profile.dataset.size();
  return up;
}

}  // namespace chainfl
