// pclab: run, list and validate optimality scenarios.
#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "pclab/core.hpp"
#include "pclab/scenario.hpp"

namespace fs = std::filesystem;
using pclab::Json;

namespace {

Json load_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw pclab::DomainError("cannot open " + path.string());
  return Json::parse(is);
}

// A registered name, "all", or a path to a JSON config.
std::vector<Json> resolve(const std::vector<std::string>& targets, const std::string& registry) {
  std::vector<pclab::ScenarioInfo> reg = registry.empty() ? pclab::builtin_scenarios() : pclab::load_registry(registry);
  std::vector<Json> out;
  for (const auto& t : targets) {
    if (t == "all") {
      for (const auto& s : reg) out.push_back(s.config);
      continue;
    }
    auto it = std::find_if(reg.begin(), reg.end(), [&](const pclab::ScenarioInfo& s) { return s.name == t; });
    if (it != reg.end()) {
      out.push_back(it->config);
    } else if (fs::is_regular_file(t)) {
      out.push_back(load_json(t));
    } else {
      std::string msg = "unknown scenario \"" + t + "\"; available:";
      for (const auto& s : reg) msg += " " + s.name;
      throw pclab::DomainError(msg);
    }
  }
  return out;
}

void print_report(const pclab::RunReport& r) {
  std::printf("%s  [%s]  seed %llu  config %s\n", r.scenario.c_str(), r.all_pass() ? "PASS" : "FAIL",
              static_cast<unsigned long long>(r.seed), r.config_hash.substr(0, 12).c_str());
  for (const auto& c : r.checks) {
    std::printf("  %-4s %-52s %.6g %s %.6g\n", c.pass ? "ok" : "FAIL", c.name.c_str(), c.value, c.relation.c_str(),
                c.threshold);
  }
  double total = 0.0;
  for (const auto& [stage, s] : r.timings) total += s;
  std::printf("  time %.2f s\n", total);
}

int cmd_run(const std::vector<std::string>& targets, const std::string& registry, pclab::RunOptions opts,
            int jobs) {
  const std::vector<Json> configs = resolve(targets, registry);
  const bool nested = configs.size() > 1;
  std::vector<std::optional<pclab::RunReport>> reports(configs.size());
  std::vector<std::string> errors(configs.size());
  std::atomic<std::size_t> next{0};
  std::mutex io;

  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      pclab::RunOptions o = opts;
      const std::string name = configs[i].value("name", "scenario" + std::to_string(i));
      if (!o.out_dir.empty() && nested) o.out_dir /= name;
      try {
        reports[i] = pclab::run_scenario(configs[i], o);
      } catch (const std::exception& e) {
        errors[i] = name + ": " + e.what();
      }
      std::lock_guard lock(io);
      if (reports[i]) print_report(*reports[i]);
      else std::fprintf(stderr, "error: %s\n", errors[i].c_str());
      std::fflush(stdout);
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(configs.size())));
  if (n > 1) opts.parallel = false;
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  bool errored = false;
  bool failed = false;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    errored |= !reports[i].has_value();
    failed |= reports[i] && !reports[i]->all_pass();
  }
  return errored ? 2 : (failed ? 1 : 0);
}

int cmd_list(bool json, const std::string& registry) {
  const std::vector<pclab::ScenarioInfo> reg =
      registry.empty() ? pclab::builtin_scenarios() : pclab::load_registry(registry);
  if (json) {
    Json arr = Json::array();
    for (const auto& s : reg) arr.push_back({{"name", s.name}, {"claim", s.claim}, {"tags", s.tags}});
    std::cout << arr.dump(2) << "\n";
    return 0;
  }
  for (const auto& s : reg) {
    std::string tags;
    for (const auto& t : s.tags) tags += (tags.empty() ? "" : ",") + t;
    std::printf("%-20s %s [%s]\n", s.name.c_str(), s.claim.c_str(), tags.c_str());
  }
  return 0;
}

int cmd_validate(const std::string& path) {
  Json c;
  try {
    c = load_json(path);
  } catch (const Json::parse_error& e) {
    std::fprintf(stderr, "%s: not JSON: %s\n", path.c_str(), e.what());
    return 1;
  }
  const auto problems = pclab::validate_config(c);
  if (problems.empty()) {
    std::printf("%s: ok (%s)\n", path.c_str(), pclab::config_hash(c).c_str());
    return 0;
  }
  for (const auto& p : problems) std::fprintf(stderr, "%s%s\n", path.c_str(), p.c_str());
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-loop optimality lab for MPC and data-driven predictive control"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run scenarios by name, config path, or 'all'");
  std::vector<std::string> targets;
  std::string registry;
  pclab::RunOptions opts;
  std::string out;
  double tol = 0.0;
  int jobs = 1;
  run->add_option("scenario", targets, "scenario names or config files")->required();
  run->add_option("--seed", opts.seed, "RNG seed")->capture_default_str();
  run->add_option("--out", out, "output directory (one subdirectory per scenario when running several)");
  run->add_option("--grid-scale", opts.grid_scale, "multiplies every grid resolution")->capture_default_str();
  run->add_option("--tol", tol, "value-iteration tolerance override");
  run->add_option("--jobs", jobs, "scenarios run concurrently")->capture_default_str()->check(CLI::PositiveNumber);
  run->add_option("--registry", registry, "directory of scenario JSON files instead of the built-ins");

  auto* list = app.add_subcommand("list", "list registered scenarios");
  bool as_json = false;
  std::string list_registry;
  list->add_flag("--json", as_json, "machine-readable array");
  list->add_option("--registry", list_registry, "directory of scenario JSON files instead of the built-ins");

  auto* validate = app.add_subcommand("validate", "check a scenario config");
  std::string config_path;
  validate->add_option("config", config_path, "config file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      if (!out.empty()) opts.out_dir = out;
      if (tol > 0.0) opts.tol = tol;
      return cmd_run(targets, registry, opts, jobs);
    }
    if (*list) return cmd_list(as_json, list_registry);
    return cmd_validate(config_path);
  } catch (const pclab::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
