#pragma once

// Task definitions, synthetic desk-scale generators, data partitioning and the
// closed-form regression oracle.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainfl/error.hpp"
#include "chainfl/model_math.hpp"
#include "chainfl/rng.hpp"
#include "chainfl/store.hpp"

namespace chainfl {

using SimTime = double;

struct FixedThreshold {
  double value = 0.0;
  friend bool operator==(const FixedThreshold&, const FixedThreshold&) = default;
};
struct BasicRoundModelMetric {
  friend bool operator==(const BasicRoundModelMetric&, const BasicRoundModelMetric&) = default;
};
using ATauPolicy = std::variant<FixedThreshold, BasicRoundModelMetric>;

struct MaxGlobalEpochs {
  int n = 150;
  friend bool operator==(const MaxGlobalEpochs&, const MaxGlobalEpochs&) = default;
};
// Accuracy stops at >= value; loss and perplexity stop at <= value.
struct MetricThreshold {
  MetricKind kind = MetricKind::accuracy;
  double value = 0.95;
  friend bool operator==(const MetricThreshold&, const MetricThreshold&) = default;
};
using Termination = std::variant<MaxGlobalEpochs, MetricThreshold>;

struct TaskSpec {
  std::string task_id_root = "task";
  std::size_t model_dim = 0;
  ParamVector init_params;
  LossKind loss_kind = LossKind::squared;
  HyperParams hp;
  int rounds_per_iteration = 1;  // R
  int eta = 3;                   // candidate tips
  int lambda = 2;                // approved tips
  ATauPolicy a_tau_policy = BasicRoundModelMetric{};
  Termination termination = MaxGlobalEpochs{};
  ContentHash test_set_ref;
  double quorum_fraction = 2.0 / 3.0;
  SimTime round_timeout = 0.0;

  void validate() const {
    hp.validate();
    if (rounds_per_iteration < 1) throw error(errc::config, "R must be >= 1");
    if (lambda < 1) throw error(errc::config, "lambda must be >= 1");
    if (eta < 2) throw error(errc::config, "eta must be >= 2");
    if (lambda >= eta) throw error(errc::config, "lambda must be < eta");
    if (!(quorum_fraction > 0.0 && quorum_fraction <= 1.0)) throw error(errc::config, "quorum_fraction must be in (0,1]");
    if (init_params.dim() != model_dim) throw error(errc::config, "init_params dim != model_dim");
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

inline nlohmann::json to_json(const TaskSpec& s) {
  nlohmann::json j;
  j["task_id_root"] = s.task_id_root;
  j["model_dim"] = s.model_dim;
  j["init_params"] = s.init_params.raw();
  j["loss_kind"] = to_string(s.loss_kind);
  j["hp"] = {{"mu", s.hp.mu}, {"E", s.hp.epochs}, {"B", s.hp.batch_size}};
  j["R"] = s.rounds_per_iteration;
  j["eta"] = s.eta;
  j["lambda"] = s.lambda;
  if (const auto* f = std::get_if<FixedThreshold>(&s.a_tau_policy)) {
    j["a_tau_policy"] = {{"fixed", f->value}};
  } else {
    j["a_tau_policy"] = "basic_round_model_metric";
  }
  if (const auto* m = std::get_if<MaxGlobalEpochs>(&s.termination)) {
    j["termination"] = {{"max_global_epochs", m->n}};
  } else {
    const auto& t = std::get<MetricThreshold>(s.termination);
    j["termination"] = {{"metric", to_string(t.kind)}, {"value", t.value}};
  }
  j["test_set_ref"] = s.test_set_ref.hex();
  j["quorum_fraction"] = s.quorum_fraction;
  j["round_timeout"] = s.round_timeout;
  return j;
}

inline MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "accuracy") return MetricKind::accuracy;
  if (s == "perplexity") return MetricKind::perplexity;
  if (s == "loss") return MetricKind::loss;
  throw error(errc::config, "unknown metric kind '" + s + "'");
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "squared") return LossKind::squared;
  if (s == "cross_entropy") return LossKind::cross_entropy;
  throw error(errc::config, "unknown loss kind '" + s + "'");
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec s;
  s.task_id_root = j.at("task_id_root").get<std::string>();
  s.model_dim = j.at("model_dim").get<std::size_t>();
  s.init_params = ParamVector(j.at("init_params").get<std::vector<double>>());
  s.loss_kind = loss_kind_from_string(j.at("loss_kind").get<std::string>());
  s.hp.mu = j.at("hp").at("mu").get<double>();
  s.hp.epochs = j.at("hp").at("E").get<int>();
  s.hp.batch_size = j.at("hp").at("B").get<int>();
  s.rounds_per_iteration = j.at("R").get<int>();
  s.eta = j.at("eta").get<int>();
  s.lambda = j.at("lambda").get<int>();
  const auto& pol = j.at("a_tau_policy");
  if (pol.is_object()) {
    s.a_tau_policy = FixedThreshold{pol.at("fixed").get<double>()};
  } else {
    s.a_tau_policy = BasicRoundModelMetric{};
  }
  const auto& term = j.at("termination");
  if (term.contains("max_global_epochs")) {
    s.termination = MaxGlobalEpochs{term.at("max_global_epochs").get<int>()};
  } else {
    s.termination = MetricThreshold{metric_kind_from_string(term.at("metric").get<std::string>()),
                                    term.at("value").get<double>()};
  }
  s.test_set_ref = ContentHash::from_hex(j.at("test_set_ref").get<std::string>());
  s.quorum_fraction = j.at("quorum_fraction").get<double>();
  s.round_timeout = j.at("round_timeout").get<double>();
  return s;
}

enum class PartitionScheme { noniid_sorted, iid_random };

inline const char* to_string(PartitionScheme s) { return s == PartitionScheme::noniid_sorted ? "noniid_sorted" : "iid_random"; }

struct PartitionPlan {
  std::vector<LabeledDataset> assignments;  // index == device id
  PartitionScheme scheme = PartitionScheme::iid_random;

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& d : assignments) n += d.size();
    return n;
  }
};

namespace detail {

// Contiguous split; the first (size % n) groups get one extra sample.
inline std::vector<LabeledDataset> contiguous_split(const std::vector<Sample>& ordered, std::size_t n_groups) {
  std::vector<LabeledDataset> groups(n_groups);
  const std::size_t base = ordered.size() / n_groups;
  const std::size_t extra = ordered.size() % n_groups;
  std::size_t at = 0;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t len = base + (g < extra ? 1 : 0);
    std::vector<Sample> part(ordered.begin() + static_cast<std::ptrdiff_t>(at),
                             ordered.begin() + static_cast<std::ptrdiff_t>(at + len));
    groups[g] = LabeledDataset(std::move(part));
    at += len;
  }
  return groups;
}

}  // namespace detail

// Sort by label (stable), then one contiguous group per device.
inline PartitionPlan partition_noniid(const LabeledDataset& source, std::size_t n_devices) {
  if (n_devices == 0) throw error(errc::validation, "n_devices must be positive");
  if (n_devices > source.size()) throw error(errc::validation, "more devices than samples");
  std::vector<Sample> sorted = source.samples();
  std::stable_sort(sorted.begin(), sorted.end(), [](const Sample& a, const Sample& b) { return a.y < b.y; });
  return {detail::contiguous_split(sorted, n_devices), PartitionScheme::noniid_sorted};
}

inline PartitionPlan partition_iid(const LabeledDataset& source, std::size_t n_devices, Rng& rng) {
  if (n_devices == 0) throw error(errc::validation, "n_devices must be positive");
  if (n_devices > source.size()) throw error(errc::validation, "more devices than samples");
  std::vector<Sample> shuffled = source.samples();
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  return {detail::contiguous_split(shuffled, n_devices), PartitionScheme::iid_random};
}

inline PartitionPlan partition(const LabeledDataset& source, std::size_t n_devices, PartitionScheme scheme, Rng& rng) {
  return scheme == PartitionScheme::noniid_sorted ? partition_noniid(source, n_devices)
                                                  : partition_iid(source, n_devices, rng);
}

struct SyntheticTask {
  PartitionPlan plan;
  TaskSpec spec;
  LabeledDataset pooled;  // all training samples, the oracle data
  LabeledDataset test;    // held-out slice shared by every shard
  ParamVector truth;      // hidden w* (regression) or class means flattened (classification)
};

inline std::size_t held_out_size(std::size_t train_size) { return std::max<std::size_t>(1, train_size / 4); }

inline SyntheticTask generate_synthetic_regression(std::uint64_t seed, std::size_t n_devices,
                                                   std::size_t samples_per_device, std::size_t dim, double noise_sd,
                                                   PartitionScheme scheme = PartitionScheme::iid_random) {
  if (n_devices == 0 || samples_per_device == 0 || dim == 0) throw error(errc::validation, "counts must be positive");
  Rng rng = make_stream(seed, "fl_task.regression");
  std::normal_distribution<double> normal(0.0, 1.0);

  ParamVector truth(dim);
  for (std::size_t i = 0; i < dim; ++i) truth[i] = normal(rng);

  auto draw = [&](std::size_t n) {
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      Sample s;
      s.x.resize(dim);
      double y = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        s.x[i] = normal(rng);
        y += s.x[i] * truth[i];
      }
      s.y = y + (noise_sd > 0.0 ? noise_sd * normal(rng) : 0.0);
      out.push_back(std::move(s));
    }
    return LabeledDataset(std::move(out));
  };

  SyntheticTask t;
  t.truth = truth;
  t.pooled = draw(n_devices * samples_per_device);
  t.test = draw(held_out_size(t.pooled.size()));
  Rng part_rng = make_stream(seed, "fl_task.partition");
  t.plan = partition(t.pooled, n_devices, scheme, part_rng);
  t.spec.task_id_root = "regression-" + std::to_string(seed);
  t.spec.model_dim = dim;
  t.spec.init_params = ParamVector(dim, 0.0);
  t.spec.loss_kind = LossKind::squared;
  t.spec.termination = MetricThreshold{MetricKind::loss, 1e-3};
  t.spec.test_set_ref = ContentHash();
  return t;
}

inline SyntheticTask generate_synthetic_classification(std::uint64_t seed, std::size_t n_devices,
                                                       std::size_t samples_per_device, std::size_t dim,
                                                       std::size_t n_classes, double separation = 3.0,
                                                       PartitionScheme scheme = PartitionScheme::noniid_sorted) {
  if (n_devices == 0 || samples_per_device == 0 || dim == 0) throw error(errc::validation, "counts must be positive");
  if (n_classes < 2) throw error(errc::validation, "need at least two classes");
  Rng rng = make_stream(seed, "fl_task.classification");
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::vector<double>> means(n_classes, std::vector<double>(dim));
  for (auto& m : means) {
    for (double& v : m) v = separation * normal(rng);
  }

  // Labels cycle 0..K-1 so class counts differ by at most one.
  auto draw = [&](std::size_t n) {
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t label = k % n_classes;
      Sample s;
      s.x.resize(dim);
      for (std::size_t i = 0; i < dim; ++i) s.x[i] = means[label][i] + normal(rng);
      s.y = static_cast<double>(label);
      out.push_back(std::move(s));
    }
    std::shuffle(out.begin(), out.end(), rng);
    return LabeledDataset(std::move(out));
  };

  SyntheticTask t;
  t.truth = ParamVector(n_classes * dim);
  for (std::size_t k = 0; k < n_classes; ++k) {
    for (std::size_t i = 0; i < dim; ++i) t.truth[k * dim + i] = means[k][i];
  }
  t.pooled = draw(n_devices * samples_per_device);
  t.test = draw(held_out_size(t.pooled.size()));
  Rng part_rng = make_stream(seed, "fl_task.partition");
  t.plan = partition(t.pooled, n_devices, scheme, part_rng);
  t.spec.task_id_root = "classification-" + std::to_string(seed);
  t.spec.model_dim = n_classes * (dim + 1);
  t.spec.init_params = ParamVector(t.spec.model_dim, 0.0);
  t.spec.loss_kind = LossKind::cross_entropy;
  t.spec.termination = MetricThreshold{MetricKind::accuracy, 0.95};
  return t;
}

// Pooled least squares through the normal equations with a 1e-9 ridge.
inline ParamVector closed_form_optimum(const LabeledDataset& data) {
  if (data.empty()) throw error(errc::validation, "no data for closed-form optimum");
  const std::size_t d = data.feature_dim();
  if (d == 0) throw error(errc::validation, "zero feature dim");
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (const auto& s : data) {
    const Eigen::Map<const Eigen::VectorXd> x(s.x.data(), static_cast<Eigen::Index>(d));
    xtx.noalias() += x * x.transpose();
    xty.noalias() += s.y * x;
  }
  xtx.diagonal().array() += 1e-9;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw error(errc::validation, "normal equations are singular");
  }
  const Eigen::VectorXd w = ldlt.solve(xty);
  const double rel = (xtx * w - xty).norm() / std::max(1.0, xty.norm());
  if (!w.allFinite() || rel > 1e-6) throw error(errc::validation, "normal equations are singular");
  return ParamVector(std::vector<double>(w.data(), w.data() + w.size()));
}

// Line-delimited records: comma-separated features followed by the label.
inline void export_dataset(const LabeledDataset& data, std::ostream& out) {
  out << std::setprecision(17);
  for (const auto& s : data) {
    for (double v : s.x) out << v << ',';
    out << s.y << '\n';
  }
}

inline LabeledDataset import_dataset(std::istream& in) {
  LabeledDataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> fields;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        fields.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw error(errc::validation, "bad numeric field on line " + std::to_string(line_no));
      }
    }
    if (fields.empty()) throw error(errc::validation, "empty record on line " + std::to_string(line_no));
    const double y = fields.back();
    fields.pop_back();
    data.add(Sample{std::move(fields), y});
  }
  return data;
}

inline ContentHash dataset_hash(const LabeledDataset& data) {
  std::ostringstream out;
  export_dataset(data, out);
  return ContentHash::of(out.str());
}

}  // namespace chainfl
