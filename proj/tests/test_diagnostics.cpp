#include <doctest.h>

#include <cmath>

#include "onebox/diagnostics.hpp"
#include "onebox/random.hpp"

using namespace onebox;

namespace {

std::vector<double> ar1(double rho, std::size_t n, std::uint64_t seed) {
  Rng rng = make_stream(seed, 0);
  std::vector<double> x(n);
  double s = standard_normal(rng) / std::sqrt(1 - rho * rho);
  for (auto& v : x) {
    s = rho * s + standard_normal(rng);
    v = s;
  }
  return x;
}

}  // namespace

TEST_CASE("ESS of independent draws is close to n") {
  const auto x = ar1(0.0, 5000, 1);
  const double ess = effective_sample_size(x);
  CHECK(ess > 4000);
  CHECK(ess < 6000);
}

TEST_CASE("ESS of an AR(1) chain matches n(1-rho)/(1+rho)") {
  const double rho = 0.9, n = 5000, expect = n * (1 - rho) / (1 + rho);
  CHECK(expect == doctest::Approx(263.1578947).epsilon(1e-9));
  for (std::uint64_t seed : {2, 3, 4}) {
    const double ess = effective_sample_size(ar1(rho, 5000, seed));
    CHECK(ess == doctest::Approx(expect).epsilon(0.3));
  }
}

TEST_CASE("autocorrelation") {
  const auto ac = autocorrelation(ar1(0.7, 20000, 5), 3);
  REQUIRE(ac.size() == 4);
  CHECK(ac[0] == doctest::Approx(1.0));
  CHECK(ac[1] == doctest::Approx(0.7).epsilon(0.05));
  CHECK(ac[2] == doctest::Approx(0.49).epsilon(0.08));
  const std::vector<double> flat(100, 3.0);
  const auto af = autocorrelation(flat, 2);
  CHECK(af[1] == 0.0);
  CHECK(af[2] == 0.0);
}

TEST_CASE("constant columns are flagged instead of dividing by zero") {
  const std::vector<double> flat(500, 2.5);
  CHECK(is_degenerate(flat));
  CHECK(effective_sample_size(flat) == 0.0);
  CHECK_FALSE(is_degenerate(ar1(0.5, 100, 6)));
  CHECK(std::isnan(split_rhat({flat, flat})));
}

TEST_CASE("split Rhat separates well-mixed from stuck chains") {
  const auto a = ar1(0.3, 2000, 7), b = ar1(0.3, 2000, 8);
  CHECK(split_rhat({a, b}) < 1.01);
  auto shifted = b;
  for (auto& v : shifted) v += 3.0;
  CHECK(split_rhat({a, shifted}) > 1.5);
  // a trend within one chain shows up through the split halves
  std::vector<double> trend(2000);
  for (std::size_t i = 0; i < trend.size(); ++i) trend[i] = a[i] + 4.0 * double(i) / 2000.0;
  CHECK(split_rhat({trend}) > 1.1);
  CHECK(std::isnan(split_rhat({{1.0, 2.0, 3.0}})));
}

TEST_CASE("diagnostics report over posterior samples") {
  PosteriorSamples ps;
  ps.theta_names = {"a", "b"};
  ps.theta = DrawMatrix(4000, 2);
  const auto x = ar1(0.5, 4000, 9);
  for (std::size_t m = 0; m < 4000; ++m) {
    ps.theta(m, 0) = x[m];
    ps.theta(m, 1) = 1.0;
    ps.chain.push_back(m < 2000 ? 0 : 1);
  }
  ps.acceptance = {{"latent", 10, 4, 1}};
  const auto r = diagnostics(ps);
  CHECK(r.n_draws == 4000);
  CHECK(r.n_chains == 2);
  CHECK(r.at("a").ess > 1000);
  CHECK(r.at("a").rhat < 1.02);
  CHECK(r.at("a").autocorr.size() == r.lags.size());
  CHECK(r.at("b").degenerate);
  const auto j = diagnostics_to_json(r);
  CHECK(j["parameters"][1]["name"] == "b");
  CHECK(j["parameters"][1]["split_rhat"].is_null());
  CHECK(j["parameters"][1]["degenerate"] == true);
  CHECK(j["acceptance"][0]["rate"] == doctest::Approx(0.4));
}
