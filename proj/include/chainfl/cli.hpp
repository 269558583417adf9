#pragma once

// Command-line front end. Exit codes: 0 success, 2 configuration or usage
// error, 1 runtime error (including shard iteration errors).

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chainfl/config.hpp"
#include "chainfl/error.hpp"
#include "chainfl/harness.hpp"

namespace chainfl {

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error(errc::config, path + ": cannot open");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw error(errc::config, path + ": " + e.what());
  }
}

// "key=v1,v2,..." with each value parsed as JSON when possible.
inline SweepAxis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw error(errc::config, "--param expects key=v1,v2,... (got '" + spec + "')");
  SweepAxis axis;
  axis.key = spec.substr(0, eq);
  std::stringstream rest(spec.substr(eq + 1));
  std::string item;
  while (std::getline(rest, item, ',')) {
    if (item.empty()) continue;
    try {
      axis.values.push_back(nlohmann::json::parse(item));
    } catch (const nlohmann::json::parse_error&) {
      axis.values.emplace_back(item);
    }
  }
  if (axis.values.empty()) throw error(errc::config, "--param " + axis.key + ": no values");
  return axis;
}

inline std::filesystem::path default_out(const std::string& config_path) {
  return std::filesystem::path(config_path).parent_path() / "out";
}

}  // namespace detail

inline int cli_main(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"ChainFL simulator: sharded federated learning over subchains and a DAG mainchain"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string paradigm;
  std::uint64_t seed = 0;

  auto* run = app.add_subcommand("run", "Run one scenario and write metrics, trace, DAG and summary");
  run->add_option("--config", config_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  auto* run_seed = run->add_option("--seed", seed, "Override the master seed");
  run->add_option("--out", out_dir, "Output directory (default: <config dir>/out)");
  run->add_option("--paradigm", paradigm, "Override the paradigm: chainfl, fedavg or asynfl");

  std::vector<std::string> axes;
  std::string paradigms = "";
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Grid over config parameters; one CSV per point plus summary.csv");
  sweep->add_option("--config", config_path, "Base scenario JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--param", axes, "Axis as key=v1,v2,... (repeatable; dotted keys reach nested fields)")->required();
  sweep->add_option("--paradigms", paradigms, "Comma-separated paradigms (default: the config's)");
  auto* sweep_seed = sweep->add_option("--seed", seed, "Override the master seed");
  sweep->add_option("--out", out_dir, "Output directory (default: <config dir>/out)");
  sweep->add_option("--jobs", jobs, "Scenarios run in parallel")->check(CLI::PositiveNumber);

  auto* dag = app.add_subcommand("export-dag", "Run a ChainFL scenario and write only its DAG export");
  dag->add_option("--config", config_path, "Scenario JSON")->required()->check(CLI::ExistingFile);
  auto* dag_seed = dag->add_option("--seed", seed, "Override the master seed");
  dag->add_option("--out", out_dir, "Output file (default: <config dir>/out/dag.jsonl)");

  auto* check = app.add_subcommand("validate-config", "Parse and validate a scenario without running it");
  check->add_option("--config", config_path, "Scenario JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  auto load = [&](bool override_seed) {
    nlohmann::json doc = detail::read_json_file(config_path);
    if (override_seed) doc["seed"] = seed;
    if (!paradigm.empty()) doc["paradigm"] = paradigm;
    return doc;
  };

  try {
    if (*check) {
      const ScenarioConfig cfg = parse_scenario(detail::read_json_file(config_path));
      out << "ok: " << to_string(cfg.paradigm) << " scenario, seed " << cfg.seed << '\n';
      return 0;
    }
    if (*run) {
      const ScenarioConfig cfg = parse_scenario(load(run_seed->count() > 0));
      const std::filesystem::path dir = out_dir.empty() ? detail::default_out(config_path) : std::filesystem::path(out_dir);
      const RunResult res = run_scenario(cfg);
      write_run_outputs(res, dir);
      out << summarize(res).dump() << '\n';
      for (const auto& e : res.errors) err << "error: " << e << " [trace: " << (dir / "trace.jsonl").string() << "]\n";
      return res.errors.empty() ? 0 : 1;
    }
    if (*sweep) {
      const nlohmann::json base = load(sweep_seed->count() > 0);
      std::vector<SweepAxis> parsed;
      for (const auto& a : axes) parsed.push_back(detail::parse_axis(a));
      std::vector<Paradigm> ps;
      if (paradigms.empty()) {
        ps.push_back(parse_scenario(base).paradigm);
      } else {
        std::stringstream list(paradigms);
        std::string p;
        while (std::getline(list, p, ',')) ps.push_back(paradigm_from_string(p));
      }
      const auto points = expand_sweep(base, parsed, ps);
      const std::filesystem::path dir = out_dir.empty() ? detail::default_out(config_path) : std::filesystem::path(out_dir);
      const auto results = run_sweep(points, dir, jobs);
      bool clean = true;
      for (std::size_t i = 0; i < points.size(); ++i) {
        out << points[i].label << ": " << summarize(results[i]).dump() << '\n';
        for (const auto& e : results[i].errors) {
          err << "error: " << points[i].label << ": " << e << '\n';
          clean = false;
        }
      }
      return clean ? 0 : 1;
    }
    if (*dag) {
      nlohmann::json doc = load(dag_seed->count() > 0);
      doc["paradigm"] = "chainfl";
      const RunResult res = run_chainfl(parse_scenario(doc));
      const std::filesystem::path path =
          out_dir.empty() ? detail::default_out(config_path) / "dag.jsonl" : std::filesystem::path(out_dir);
      write_file(path, [&](std::ostream& o) { o << res.dag_export; });
      out << path.string() << '\n';
      for (const auto& e : res.errors) err << "error: " << e << '\n';
      return res.errors.empty() ? 0 : 1;
    }
  } catch (const error& e) {
    err << "error: " << e.what() << '\n';
    return e.code() == errc::config ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace chainfl
