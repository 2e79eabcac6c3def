#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pclab {

using Json = nlohmann::json;

/// Verdict tags a scenario can expect; each one expands into a fixed set of checks.
const std::vector<std::string>& known_tags();

/// Problems with a scenario document, one string per problem, each starting
/// with the JSON pointer of the offending value. Empty means valid.
std::vector<std::string> validate_config(const Json& config);

/// Thrown by run_scenario when the document fails validation.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

/// Hex SHA-1 of "blob <len>\0<compact sorted-key JSON>", as git hashes a file.
std::string config_hash(const Json& config);

struct ScenarioInfo {
  std::string name;
  std::string claim;
  std::vector<std::string> tags;
  Json config;
};

const std::vector<ScenarioInfo>& builtin_scenarios();
/// Every *.json file in `dir`, sorted by name. Invalid documents throw ConfigError.
std::vector<ScenarioInfo> load_registry(const std::filesystem::path& dir);
/// Throws DomainError listing the available names when `name` is unknown.
const ScenarioInfo& find_scenario(const std::string& name);

struct RunOptions {
  std::uint64_t seed = 42;
  /// Multiplies every grid resolution: (points - 1) * scale + 1.
  double grid_scale = 1.0;
  /// Overrides the value-iteration tolerance.
  std::optional<double> tol;
  /// Where report.json and the CSV files go; empty writes nothing.
  std::filesystem::path out_dir;
  bool parallel = true;
};

struct CheckOutcome {
  std::string name;
  std::string tag;
  std::string relation;  // "<=", ">=", "<", ">", "==", "contains 0"
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

struct RunReport {
  std::string scenario;
  std::string claim;
  std::string config_hash;
  std::uint64_t seed = 0;
  double grid_scale = 1.0;
  std::vector<std::string> tags;
  std::vector<CheckOutcome> checks;
  Json metrics = Json::object();
  std::vector<std::pair<std::string, double>> timings;  // stage, seconds
  std::vector<std::string> files;

  bool all_pass() const;
  const CheckOutcome* check(const std::string& name) const;
  /// Everything except wall-clock timings; identical for identical config and seed.
  Json numeric_json() const;
  Json to_json() const;
};

/// Thrown when a pipeline stage fails; names the stage.
class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "': " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Validates, executes the scenario pipeline and writes outputs to opts.out_dir.
RunReport run_scenario(const Json& config, const RunOptions& opts);
RunReport run_scenario(const std::string& name, const RunOptions& opts);

}  // namespace pclab
