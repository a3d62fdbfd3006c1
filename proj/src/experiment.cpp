#include "onebox/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "onebox/errors.hpp"
#include "onebox/random.hpp"

namespace onebox {

namespace {

constexpr double kGridTol = 1e-9;

std::string fmt(double v) { return format_double(v); }

[[noreturn]] void schedule_error(const std::string& what) {
  throw DomainError("invalid cycle schedule: " + what);
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------- schedule

bool CycleSchedule::on_grid(double t) const {
  const double k = t / dt_;
  return std::abs(k - std::round(k)) <= kGridTol * std::max(1.0, std::abs(k));
}

long CycleSchedule::grid_index(double t) const {
  if (!on_grid(t)) throw RangeError("time " + fmt(t) + " is not on the dt = " + fmt(dt_) + " grid");
  return std::lround(t / dt_);
}

CycleSchedule::CycleSchedule(double dt, std::vector<Cycle> cycles, std::optional<double> horizon)
    : dt_(dt), cycles_(std::move(cycles)) {
  if (!(dt > 0.0) || !std::isfinite(dt)) schedule_error("dt must be positive");
  if (cycles_.empty()) schedule_error("at least one cycle is required");
  for (std::size_t i = 0; i < cycles_.size(); ++i) {
    const Cycle& c = cycles_[i];
    const std::string tag = "cycle " + std::to_string(i + 1) + ": ";
    if (!(c.start >= 0.0)) schedule_error(tag + "start must be >= 0");
    if (!on_grid(c.start)) schedule_error(tag + "start " + fmt(c.start) + " is off the dt grid");
    if (!on_grid(c.gen_end)) schedule_error(tag + "gen_end " + fmt(c.gen_end) + " is off the dt grid");
    if (c.gen_end < c.start) schedule_error(tag + "gen_end precedes start");
    if (c.measure.empty()) schedule_error(tag + "no measurement times");
    if (c.measure.front() < c.start)
      schedule_error(tag + "first measurement " + fmt(c.measure.front()) + " precedes start");
    for (std::size_t j = 0; j < c.measure.size(); ++j) {
      if (!on_grid(c.measure[j]))
        schedule_error(tag + "measurement time " + fmt(c.measure[j]) + " is off the dt grid");
      if (j > 0 && !(c.measure[j] > c.measure[j - 1]))
        schedule_error(tag + "measurement times not strictly increasing at " + fmt(c.measure[j]));
    }
    if (i + 1 < cycles_.size()) {
      const Cycle& next = cycles_[i + 1];
      if (!(c.measure.back() < next.start))
        schedule_error(tag + "last measurement must precede the next cycle's start");
      if (c.gen_end > next.start) schedule_error(tag + "generation window overlaps next cycle");
    }
  }
  const double last = std::max(cycles_.back().measure.back(), cycles_.back().gen_end);
  horizon_ = horizon.value_or(last);
  if (horizon_ < last) schedule_error("horizon " + fmt(horizon_) + " ends before the last cycle");
}

std::size_t CycleSchedule::n_measurements() const {
  std::size_t n = 0;
  for (const auto& c : cycles_) n += c.measure.size();
  return n;
}

bool CycleSchedule::generating(double t) const {
  // grid-tolerant half-open comparison
  const double eps = kGridTol * dt_;
  for (const auto& c : cycles_)
    if (t >= c.start - eps && t < c.gen_end - eps) return true;
  return false;
}

int CycleSchedule::cycle_containing(double t) const {
  const double eps = kGridTol * dt_;
  for (std::size_t i = 0; i < cycles_.size(); ++i)
    if (t >= cycles_[i].start - eps && t <= cycles_[i].measure.back() + eps)
      return static_cast<int>(i);
  return -1;
}

CycleSchedule standard_schedule(int n_cycles, double rise_min, double measure_min, double gap_min,
                                double dt) {
  if (n_cycles <= 0) throw DomainError("standard schedule needs at least one cycle");
  if (!(rise_min > 0.0) || !(measure_min > 0.0) || !(dt > 0.0) || gap_min < 0.0)
    throw DomainError("standard schedule durations must be positive");
  if (!(rise_min < measure_min))
    throw DomainError("standard schedule requires rise_min < measure_min");
  const double period = measure_min + gap_min;
  const long steps = std::lround(measure_min / dt);
  std::vector<Cycle> cycles;
  for (int i = 0; i < n_cycles; ++i) {
    Cycle c;
    c.start = i * period;
    c.gen_end = c.start + rise_min;
    for (long k = 1; k <= steps; ++k) c.measure.push_back(c.start + static_cast<double>(k) * dt);
    cycles.push_back(std::move(c));
  }
  return CycleSchedule(dt, std::move(cycles), n_cycles * period);
}

bool generation_indicator(const CycleSchedule& s, double t) {
  if (!(t >= 0.0) || t > s.horizon())
    throw RangeError("time " + fmt(t) + " outside [0, " + fmt(s.horizon()) + "]");
  return s.generating(t);
}

// ---------------------------------------------------------------- JSON

nlohmann::json schedule_to_json(const CycleSchedule& s) {
  nlohmann::json j;
  j["dt"] = s.dt();
  j["horizon"] = s.horizon();
  j["cycles"] = nlohmann::json::array();
  for (const auto& c : s.cycles())
    j["cycles"].push_back({{"start", c.start}, {"gen_end", c.gen_end}, {"measure", c.measure}});
  return j;
}

CycleSchedule schedule_from_json(const nlohmann::json& j) {
  try {
    std::vector<Cycle> cycles;
    for (const auto& jc : j.at("cycles")) {
      Cycle c;
      c.start = jc.at("start").get<double>();
      c.gen_end = jc.at("gen_end").get<double>();
      c.measure = jc.at("measure").get<std::vector<double>>();
      cycles.push_back(std::move(c));
    }
    std::optional<double> horizon;
    if (j.contains("horizon")) horizon = j.at("horizon").get<double>();
    return CycleSchedule(j.at("dt").get<double>(), std::move(cycles), horizon);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed schedule JSON: ") + e.what());
  }
}

CycleSchedule load_schedule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schedule file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse schedule file " + path.string() + ": " + e.what());
  }
  return schedule_from_json(j);
}

// ---------------------------------------------------------------- CSV

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& text, std::size_t row, const std::string& column) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto res = std::from_chars(first, last, v);
  if (text.empty() || res.ec != std::errc() || res.ptr != last || !std::isfinite(v))
    throw DataError("row " + std::to_string(row) + ": column '" + column +
                    "' is not a number: '" + text + "'");
  return v;
}

CycleSchedule infer_schedule(const MeasurementSeries& s) {
  double dt = 0.0;
  for (std::size_t r = 1; r < s.size(); ++r)
    if (s.cycle[r] == s.cycle[r - 1]) {
      const double d = s.times[r] - s.times[r - 1];
      if (dt == 0.0 || d < dt) dt = d;
    }
  if (dt == 0.0)
    throw DataError("cannot infer the time step: no cycle has two measurements");

  std::vector<Cycle> cycles;
  for (std::size_t r = 0; r < s.size(); ++r) {
    if (r == 0 || s.cycle[r] != s.cycle[r - 1]) {
      Cycle c;
      c.start = s.times[r] - dt;
      if (c.start < 0.0) c.start = s.times[r];
      c.gen_end = c.start;
      cycles.push_back(c);
    }
    Cycle& c = cycles.back();
    c.measure.push_back(s.times[r]);
    if (s.generator_on[r]) {
      // flags must form one contiguous block at the start of the cycle
      const bool contiguous =
          c.measure.size() == 1 || s.generator_on[r - 1] == 1;
      if (!contiguous)
        throw DataError("row " + std::to_string(r + 1) + ": cycle " + std::to_string(s.cycle[r]) +
                        " has a non-contiguous generator_on window");
      c.gen_end = s.times[r] + dt;
    }
  }
  try {
    return CycleSchedule(dt, std::move(cycles));
  } catch (const DomainError& e) {
    throw DataError(std::string("measurements violate schedule invariants: ") + e.what());
  }
}

void check_against_schedule(const MeasurementSeries& s, const CycleSchedule& sched) {
  for (std::size_t r = 0; r < s.size(); ++r) {
    const std::size_t ci = static_cast<std::size_t>(s.cycle[r] - 1);
    const std::string tag = "row " + std::to_string(r + 1) + ": ";
    if (ci >= sched.n_cycles())
      throw DataError(tag + "cycle label " + std::to_string(s.cycle[r]) +
                      " not present in the schedule");
    const auto& m = sched.cycles()[ci].measure;
    const bool listed = std::any_of(m.begin(), m.end(), [&](double t) {
      return std::abs(t - s.times[r]) <= kGridTol * sched.dt();
    });
    if (!listed)
      throw DataError(tag + "time " + fmt(s.times[r]) + " is not a measurement time of cycle " +
                      std::to_string(s.cycle[r]));
    if (static_cast<bool>(s.generator_on[r]) != sched.generating(s.times[r]))
      throw DataError(tag + "generator_on flag disagrees with the schedule at time " +
                      fmt(s.times[r]));
  }
}

}  // namespace

LoadedMeasurements parse_measurements(const std::string& csv_text,
                                      const std::optional<CycleSchedule>& schedule) {
  std::istringstream in(csv_text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("measurement file is empty");
  const auto header = split_csv_line(line);
  const std::vector<std::string> required = {"time_min", "cycle", "generator_on", "concentration"};
  for (std::size_t k = 0; k < required.size(); ++k)
    if (header.size() <= k || header[k] != required[k])
      throw DataError("missing column '" + required[k] + "' (header must start with " +
                      "time_min,cycle,generator_on,concentration)");

  MeasurementSeries s;
  s.covariate_names.assign(header.begin() + 4, header.end());
  std::size_t row = 0;
  std::map<double, std::size_t> seen;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++row;
    const auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw DataError("row " + std::to_string(row) + ": expected " +
                      std::to_string(header.size()) + " fields, found " +
                      std::to_string(f.size()));
    const double t = parse_number(f[0], row, "time_min");
    const double cyc = parse_number(f[1], row, "cycle");
    const double gen = parse_number(f[2], row, "generator_on");
    const double y = parse_number(f[3], row, "concentration");
    if (auto it = seen.find(t); it != seen.end())
      throw DataError("row " + std::to_string(row) + ": duplicate time_min " + fmt(t) +
                      " (first seen at row " + std::to_string(it->second) + ")");
    if (!s.times.empty() && t < s.times.back())
      throw DataError("row " + std::to_string(row) + ": time_min " + fmt(t) +
                      " is earlier than the previous row (times must increase)");
    if (cyc != std::round(cyc) || cyc < 1)
      throw DataError("row " + std::to_string(row) + ": cycle must be a positive integer");
    if (gen != 0.0 && gen != 1.0)
      throw DataError("row " + std::to_string(row) + ": generator_on must be 0 or 1");
    if (!(y > 0.0))
      throw DataError("row " + std::to_string(row) + ": concentration " + fmt(y) +
                      " must be strictly positive");
    const int c = static_cast<int>(cyc);
    if (!s.cycle.empty() && c != s.cycle.back() && c != s.cycle.back() + 1)
      throw DataError("row " + std::to_string(row) + ": cycle label " + std::to_string(c) +
                      " does not follow cycle " + std::to_string(s.cycle.back()) +
                      " (labels must be contiguous and non-decreasing)");
    if (s.cycle.empty() && c != 1)
      throw DataError("row 1: first cycle label must be 1");
    seen.emplace(t, row);
    s.times.push_back(t);
    s.cycle.push_back(c);
    s.generator_on.push_back(static_cast<int>(gen));
    s.y.push_back(y);
    if (!s.covariate_names.empty()) {
      std::vector<double> xr;
      for (std::size_t k = 4; k < f.size(); ++k)
        xr.push_back(parse_number(f[k], row, header[k]));
      s.x.push_back(std::move(xr));
    }
  }
  if (s.size() == 0) throw DataError("measurement file has no data rows");

  if (schedule) {
    check_against_schedule(s, *schedule);
    return {*schedule, std::move(s)};
  }
  CycleSchedule inferred = infer_schedule(s);
  return {std::move(inferred), std::move(s)};
}

namespace {
std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open measurement file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}
}  // namespace

LoadedMeasurements load_measurements(const std::filesystem::path& path) {
  return parse_measurements(read_file(path));
}

LoadedMeasurements load_measurements(const std::filesystem::path& path,
                                     const CycleSchedule& schedule) {
  return parse_measurements(read_file(path), schedule);
}

std::string format_measurements(const MeasurementSeries& s) {
  std::ostringstream out;
  out << "time_min,cycle,generator_on,concentration";
  for (const auto& n : s.covariate_names) out << ',' << n;
  out << '\n';
  for (std::size_t r = 0; r < s.size(); ++r) {
    out << fmt(s.times[r]) << ',' << s.cycle[r] << ',' << s.generator_on[r] << ',' << fmt(s.y[r]);
    if (!s.x.empty())
      for (double v : s.x[r]) out << ',' << fmt(v);
    out << '\n';
  }
  return out.str();
}

void write_measurements(const std::filesystem::path& path, const MeasurementSeries& series) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << format_measurements(series);
}

std::string format_latent(const std::vector<double>& times, const std::vector<double>& values) {
  std::ostringstream out;
  out << "time_min,concentration\n";
  for (std::size_t i = 0; i < times.size(); ++i) out << fmt(times[i]) << ',' << fmt(values[i]) << '\n';
  return out.str();
}

// ---------------------------------------------------------------- simulation

SimulatedExperiment simulate_experiment(const MechParams& p, ModelKind kind,
                                        const CycleSchedule& s, double obs_noise,
                                        const std::vector<double>& beta, double C0,
                                        std::uint64_t seed) {
  const EffectiveParams eff = effective_params(p, kind);
  if (!(obs_noise >= 0.0)) throw DomainError("observation noise variance must be >= 0");
  if (!(C0 >= 0.0)) throw DomainError("C0 must be >= 0");
  const double k = eff.Q_eff / p.V;

  SimulatedExperiment out;
  // Closed-form path over the grid: each cycle rises from its start value
  // while generating, then decays; the decay continues through the gap.
  const auto& cycles = s.cycles();
  const long first = s.grid_index(cycles.front().start);
  const long last = std::lround(std::floor(s.horizon() / s.dt() + 1e-9));
  double c_start = C0;
  std::size_t ci = 0;
  for (long g = first; g <= last; ++g) {
    const double t = s.grid_time(g);
    while (ci + 1 < cycles.size() && t >= cycles[ci + 1].start - 1e-9 * s.dt()) {
      // advance the start value of the next cycle by evaluating the current
      // cycle's closed form at the next start
      const Cycle& c = cycles[ci];
      const double T0 = c.gen_end - c.start;
      const double tau = cycles[ci + 1].start - c.start;
      c_start = T0 > 0.0 ? concentration_closed_form(tau, c_start, eff, p.V, T0)
                         : c_start * std::exp(-k * tau);
      ++ci;
    }
    const Cycle& c = cycles[ci];
    const double T0 = c.gen_end - c.start;
    const double tau = t - c.start;
    out.latent_times.push_back(t);
    out.latent.push_back(T0 > 0.0 ? concentration_closed_form(tau, c_start, eff, p.V, T0)
                                  : c_start * std::exp(-k * tau));
  }

  Rng noise = make_stream(seed, streams::kSimulation);
  Rng cov = make_stream(seed, streams::kCovariates);
  const double sd = std::sqrt(obs_noise);
  MeasurementSeries& ms = out.series;
  for (std::size_t i = 0; i < beta.size(); ++i) ms.covariate_names.push_back("x" + std::to_string(i + 1));
  for (std::size_t i = 0; i < cycles.size(); ++i) {
    for (double t : cycles[i].measure) {
      const long g = s.grid_index(t);
      const double c = out.latent[static_cast<std::size_t>(g - first)];
      double shift = 0.0;
      if (!beta.empty()) {
        std::vector<double> xr(beta.size());
        for (std::size_t j = 0; j < beta.size(); ++j) {
          xr[j] = standard_normal(cov);
          shift += xr[j] * beta[j];
        }
        ms.x.push_back(std::move(xr));
      }
      const double e = sd > 0.0 ? sd * standard_normal(noise) : 0.0;
      ms.times.push_back(t);
      ms.cycle.push_back(static_cast<int>(i + 1));
      ms.generator_on.push_back(s.generating(t) ? 1 : 0);
      ms.y.push_back(shift == 0.0 && e == 0.0 ? c : c * std::exp(shift + e));
    }
  }
  return out;
}

}  // namespace onebox
