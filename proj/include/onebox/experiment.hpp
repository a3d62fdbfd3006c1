#pragma once

// Experiment layout: cycle schedules, measurement series, CSV/JSON I/O and
// the closed-form synthetic-data simulator.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "onebox/mechanistic.hpp"

namespace onebox {

struct Cycle {
  double start = 0.0;            // s_i, first minute of the cycle
  double gen_end = 0.0;          // generator switches off here; active on [start, gen_end)
  std::vector<double> measure;   // K_i, strictly increasing
};

// Ordered, disjoint experiment cycles on a uniform time grid t = k·dt.
class CycleSchedule {
 public:
  CycleSchedule() = default;
  // Validates every invariant; throws DomainError describing the violation.
  CycleSchedule(double dt, std::vector<Cycle> cycles, std::optional<double> horizon = {});

  double dt() const { return dt_; }
  double horizon() const { return horizon_; }
  const std::vector<Cycle>& cycles() const { return cycles_; }
  std::size_t n_cycles() const { return cycles_.size(); }
  std::size_t n_measurements() const;

  // Generator status at t; false outside every [start, gen_end).
  bool generating(double t) const;
  // Generator status over the step (t - dt, t] that ends at t.
  bool step_generating(double t) const { return generating(t - dt_); }

  // Integer grid index of t; throws RangeError if t is not on the grid.
  long grid_index(double t) const;
  bool on_grid(double t) const;
  double grid_time(long k) const { return static_cast<double>(k) * dt_; }

  // Index of the cycle whose [start, last measurement] contains t, or -1.
  int cycle_containing(double t) const;

 private:
  double dt_ = 1.0;
  std::vector<Cycle> cycles_;
  double horizon_ = 0.0;
};

CycleSchedule standard_schedule(int n_cycles, double rise_min, double measure_min,
                                double gap_min, double dt);

// 1_G(t); throws RangeError outside [0, T].
bool generation_indicator(const CycleSchedule& s, double t);

struct MeasurementSeries {
  std::vector<double> times;
  std::vector<int> cycle;            // 1-based cycle label per row
  std::vector<int> generator_on;     // 0/1 per row
  std::vector<double> y;             // mg/m^3, > 0
  std::vector<std::vector<double>> x;  // covariate rows; empty when no covariates
  std::vector<std::string> covariate_names;

  std::size_t size() const { return y.size(); }
  std::size_t n_covariates() const { return covariate_names.size(); }
  bool operator==(const MeasurementSeries&) const = default;
};

struct LoadedMeasurements {
  CycleSchedule schedule;
  MeasurementSeries series;
};

// Parses the measurement CSV `time_min,cycle,generator_on,concentration[,x...]`.
// Without a schedule, one is inferred: dt = smallest within-cycle spacing,
// s_i = first measurement - dt, gen_end = last flagged minute + dt.
LoadedMeasurements load_measurements(const std::filesystem::path& path);
LoadedMeasurements load_measurements(const std::filesystem::path& path,
                                     const CycleSchedule& schedule);
LoadedMeasurements parse_measurements(const std::string& csv_text,
                                      const std::optional<CycleSchedule>& schedule = {});

std::string format_measurements(const MeasurementSeries& series);
void write_measurements(const std::filesystem::path& path, const MeasurementSeries& series);

nlohmann::json schedule_to_json(const CycleSchedule& s);
CycleSchedule schedule_from_json(const nlohmann::json& j);
CycleSchedule load_schedule(const std::filesystem::path& path);

struct SimulatedExperiment {
  std::vector<double> latent_times;  // every grid minute from s_1 to T
  std::vector<double> latent;        // exact closed-form concentration
  MeasurementSeries series;
};

// Latent path is the exact closed-form solution, with pure decay carried
// through the gaps between cycles. Measurements are log-normal around
// log C_t + x'beta with variance obs_noise; covariates (only when beta is
// non-empty) are iid standard normal.
SimulatedExperiment simulate_experiment(const MechParams& p, ModelKind kind,
                                        const CycleSchedule& s, double obs_noise,
                                        const std::vector<double>& beta, double C0,
                                        std::uint64_t seed);

std::string format_latent(const std::vector<double>& times, const std::vector<double>& values);

// Shortest decimal representation that round-trips through strtod.
std::string format_double(double v);

}  // namespace onebox
