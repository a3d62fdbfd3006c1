#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "onebox/errors.hpp"
#include "onebox/experiment.hpp"

using namespace onebox;

namespace {

std::vector<double> range(double a, double b) {
  std::vector<double> v;
  for (double t = a; t <= b; t += 1) v.push_back(t);
  return v;
}

std::string three_cycle_csv() {
  std::ostringstream s;
  s << "time_min,cycle,generator_on,concentration\n";
  for (int i = 0; i < 3; ++i)
    for (int k = 1; k <= 30; ++k) {
      const int t = 40 * i + k;
      // generator on for [s_i, s_i + 15): the first measured minutes 1..14 are inside
      s << t << ',' << i + 1 << ',' << (k < 15 ? 1 : 0) << ',' << 10 + k << "\n";
    }
  return s.str();
}

std::string replace_row(const std::string& csv, int row, const std::string& line) {
  std::istringstream in(csv);
  std::ostringstream out;
  std::string l;
  int r = -1;
  while (std::getline(in, l)) {
    out << (r == row - 1 ? line : l) << "\n";
    ++r;
  }
  return out.str();
}

}  // namespace

TEST_CASE("standard schedule layouts") {
  auto s = standard_schedule(3, 15, 30, 10, 1);
  REQUIRE(s.n_cycles() == 3);
  CHECK(s.cycles()[0].measure == range(1, 30));
  CHECK(s.cycles()[1].measure == range(41, 70));
  CHECK(s.cycles()[2].measure == range(81, 110));
  CHECK(s.n_measurements() == 90);

  s = standard_schedule(1, 15, 20, 0, 1);
  CHECK(s.n_cycles() == 1);
  CHECK(s.cycles()[0].gen_end == 15);
  CHECK(s.cycles()[0].measure.size() == 20);

  s = standard_schedule(2, 15, 30, 10, 1);
  CHECK(s.cycles()[1].measure.front() == 41);
}

TEST_CASE("generation indicator") {
  const auto s = standard_schedule(3, 15, 30, 10, 1);
  CHECK(generation_indicator(s, 10));
  CHECK(!generation_indicator(s, 20));
  CHECK(generation_indicator(s, 41));
  CHECK(generation_indicator(s, 40));
  CHECK(!generation_indicator(s, 55));
  CHECK_THROWS_AS(generation_indicator(s, -1), RangeError);
  CHECK_THROWS_AS(generation_indicator(s, s.horizon() + 1), RangeError);
}

TEST_CASE("schedule partition invariants are checked on construction") {
  const auto s = standard_schedule(3, 15, 30, 10, 1);
  // disjoint and ordered
  for (std::size_t i = 0; i + 1 < s.n_cycles(); ++i)
    CHECK(s.cycles()[i].measure.back() < s.cycles()[i + 1].start);
  // every grid minute of [0, T] is in at most one cycle's [s_i, u_i]
  for (long k = 0; k <= s.grid_index(s.horizon()); ++k) {
    int hits = 0;
    for (const auto& c : s.cycles())
      hits += (s.grid_time(k) >= c.start && s.grid_time(k) <= c.measure.back()) ? 1 : 0;
    CHECK(hits <= 1);
  }
  CHECK_THROWS_AS(CycleSchedule(1, {{0, 15, {1, 2, 3}}, {2, 17, {4, 5}}}), DomainError);
  CHECK_THROWS_AS(CycleSchedule(1, {{0, 15, {3, 2}}}), DomainError);
  CHECK_THROWS_AS(CycleSchedule(1, {{0, 15.5, {1, 2}}}), DomainError);
  CHECK_THROWS_AS(CycleSchedule(1, {{5, 15, {1, 2}}}), DomainError);
}

TEST_CASE("simulate: zero noise reproduces the latent path") {
  const auto s = standard_schedule(3, 15, 30, 10, 1);
  MechParams p;
  p.G = 1000;
  p.Q = 20;
  const auto sim = simulate_experiment(p, ModelKind::Model101, s, 0.0, {}, 10, 3);
  REQUIRE(sim.series.size() == 90);
  for (std::size_t r = 0; r < sim.series.size(); ++r) {
    const auto it = std::find(sim.latent_times.begin(), sim.latent_times.end(), sim.series.times[r]);
    REQUIRE(it != sim.latent_times.end());
    CHECK(sim.series.y[r] == sim.latent[static_cast<std::size_t>(it - sim.latent_times.begin())]);
  }
}

TEST_CASE("simulate: shape of the three-cycle Model111 path") {
  const auto s = standard_schedule(3, 15, 30, 10, 1);
  MechParams p;
  p.G = 1000;
  p.Q = 20;
  p.Q_L = p.Q_R = 5;
  p.eps_L = 0.6;
  p.eps_LF = 0.3;
  p.eps_RF = 0.9;
  const auto sim = simulate_experiment(p, ModelKind::Model111, s, 0.0, {}, 10, 1);
  const auto at = [&](double t) {
    return sim.latent[static_cast<std::size_t>(
        std::find(sim.latent_times.begin(), sim.latent_times.end(), t) - sim.latent_times.begin())];
  };
  for (int i = 0; i < 3; ++i) {
    const double s0 = 40.0 * i;
    // peak at the end of the rise
    double peak = 0, tpeak = -1;
    for (double t = s0; t <= s0 + 30; t += 1)
      if (at(t) > peak) peak = at(t), tpeak = t;
    CHECK(tpeak == s0 + 15);
    if (i > 0) {
      // trough at the cycle start after background decay
      CHECK(at(s0) < at(s0 - 10));
      CHECK(at(s0) == doctest::Approx(at(s0 - 10) * std::exp(-0.26 * 10)).epsilon(1e-12));
    }
  }
}

TEST_CASE("simulate: measurement noise is centred on the latent path") {
  const auto s = standard_schedule(3, 15, 30, 10, 1);
  MechParams p;
  p.G = 1000;
  p.Q = 20;
  const auto sim = simulate_experiment(p, ModelKind::Model101, s, 0.01, {}, 10, 7);
  double mean = 0;
  for (std::size_t r = 0; r < sim.series.size(); ++r) {
    const auto it = std::find(sim.latent_times.begin(), sim.latent_times.end(), sim.series.times[r]);
    mean += std::log(sim.series.y[r] / sim.latent[static_cast<std::size_t>(it - sim.latent_times.begin())]);
  }
  mean /= 90;
  CHECK(std::abs(mean) < 3 * 0.1 / std::sqrt(90.0));
}

TEST_CASE("simulate: seed determinism and covariates") {
  const auto s = standard_schedule(1, 15, 20, 0, 1);
  MechParams p;
  p.G = 1000;
  p.Q = 20;
  const auto a = simulate_experiment(p, ModelKind::Model101, s, 0.01, {0.5}, 10, 11);
  const auto b = simulate_experiment(p, ModelKind::Model101, s, 0.01, {0.5}, 10, 11);
  const auto c = simulate_experiment(p, ModelKind::Model101, s, 0.01, {0.5}, 10, 12);
  CHECK(format_measurements(a.series) == format_measurements(b.series));
  CHECK(format_measurements(a.series) != format_measurements(c.series));
  CHECK(a.series.n_covariates() == 1);
  CHECK(a.series.x.size() == a.series.size());
}

TEST_CASE("measurement CSV round trip") {
  const auto s = standard_schedule(3, 15, 30, 10, 1);
  MechParams p;
  p.G = 1000;
  p.Q = 20;
  for (const std::vector<double>& beta : {std::vector<double>{}, std::vector<double>{0.2, -0.1}}) {
    const auto sim = simulate_experiment(p, ModelKind::Model101, s, 0.01, beta, 10, 5);
    const auto text = format_measurements(sim.series);
    const auto with = parse_measurements(text, s);
    CHECK(with.series == sim.series);
    const auto inferred = parse_measurements(text);
    CHECK(inferred.series == sim.series);
    CHECK(inferred.schedule.n_cycles() == 3);
    CHECK(inferred.schedule.cycles()[1].start == 40);
    CHECK(inferred.schedule.cycles()[1].gen_end == 55);
  }
  // file path variant
  const auto dir = std::filesystem::temp_directory_path() / "onebox_test_experiment";
  std::filesystem::create_directories(dir);
  const auto sim = simulate_experiment(p, ModelKind::Model101, s, 0.01, {}, 10, 5);
  write_measurements(dir / "m.csv", sim.series);
  CHECK(load_measurements(dir / "m.csv").series == sim.series);
  const auto js = schedule_to_json(s);
  const auto back = schedule_from_json(js);
  CHECK(schedule_to_json(back) == js);
}

TEST_CASE("measurement CSV validation") {
  const std::string ok = three_cycle_csv();
  const auto loaded = parse_measurements(ok);
  CHECK(loaded.schedule.n_cycles() == 3);
  CHECK(loaded.series.size() == 90);

  CHECK_THROWS_WITH_AS(parse_measurements(replace_row(ok, 12, "12,1,1,0")),
                       doctest::Contains("row 12"), DataError);
  CHECK_THROWS_WITH_AS(parse_measurements(replace_row(ok, 12, "12,1,1,-3")),
                       doctest::Contains("row 12"), DataError);
  CHECK_THROWS_WITH_AS(parse_measurements(replace_row(ok, 5, "4,1,1,14")),
                       doctest::Contains("duplicate"), DataError);
  CHECK_THROWS_WITH_AS(parse_measurements(replace_row(ok, 5, "2,1,1,14")),
                       doctest::Contains("row 5"), DataError);
  CHECK_THROWS_WITH_AS(parse_measurements("time_min,cycle,concentration\n1,1,5\n"),
                       doctest::Contains("generator_on"), DataError);
  CHECK_THROWS_WITH_AS(parse_measurements(replace_row(ok, 50, "60,3,0,5")),
                       doctest::Contains("cycle"), DataError);
  CHECK_THROWS_AS(parse_measurements(replace_row(ok, 3, "3,1,2,5")), DataError);
  CHECK_THROWS_AS(parse_measurements(replace_row(ok, 3, "3,1,1,abc")), DataError);

  // schedule disagreement
  const auto s = standard_schedule(3, 15, 30, 10, 1);
  CHECK_THROWS_AS(parse_measurements(replace_row(ok, 3, "3,1,0,13"), s), DataError);
}
