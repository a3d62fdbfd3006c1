#pragma once

// Command-line front end: simulate | fit | smooth | forecast | derive | waic.
// Exit codes: 0 success, 2 configuration, 3 data, 4 numerical.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "onebox/experiment.hpp"
#include "onebox/mechanistic.hpp"

namespace onebox::cli {

enum ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kNumerical = 4 };

struct SimulationConfig {
  ModelKind kind = ModelKind::Model101;
  MechParams params;
  CycleSchedule schedule;
  double obs_noise = 0.01;
  double C0 = 10.0;
  std::vector<double> beta;
  std::uint64_t seed = 1;
};

// {"model", "params": {G, Q, ..., V}, "schedule": {...}, "obs_noise", "C0", "beta", "seed"}.
// "schedule" is either the schedule JSON or {"cycles": n, "rise", "measure", "gap", "dt"}.
SimulationConfig simulation_config_from_json(const nlohmann::json& j);

struct SimulateOptions {
  std::filesystem::path config;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
};

struct FitOptions {
  std::filesystem::path data;
  std::optional<std::filesystem::path> schedule;
  std::optional<std::filesystem::path> prior;
  std::optional<std::filesystem::path> chain;
  std::filesystem::path out;
  std::string model = "101";
  bool dynamic_variance = false;
  std::optional<std::size_t> chains;
  std::optional<std::uint64_t> seed;
  double volume = 100.0;
};

struct PredictOptions {
  std::filesystem::path fit;
  std::filesystem::path out;
  std::string times;  // "a:b", "a:b:step" or "t1,t2,..."; empty = default grid
  double horizon = 10.0;
  bool observations = false;
  bool generator_on = false;
  std::uint64_t seed = 1;
};

struct DeriveOptions {
  std::filesystem::path fit;
  std::filesystem::path out;
  std::vector<double> thresholds;
  std::optional<double> T;
  std::optional<double> volume;
};

struct WaicOptions {
  std::filesystem::path fit;
  std::optional<std::filesystem::path> out;
};

void cmd_simulate(const SimulateOptions& o, std::ostream& log);
void cmd_fit(const FitOptions& o, std::ostream& log);
void cmd_smooth(const PredictOptions& o, std::ostream& log);
void cmd_forecast(const PredictOptions& o, std::ostream& log);
void cmd_derive(const DeriveOptions& o, std::ostream& log);
void cmd_waic(const WaicOptions& o, std::ostream& log);

std::vector<double> parse_times(const std::string& spec, double dt);

// Parses argv, dispatches, maps exceptions onto exit codes.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace onebox::cli
