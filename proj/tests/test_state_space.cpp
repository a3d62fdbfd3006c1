#include <doctest.h>

#include <cmath>
#include <numbers>

#include "onebox/errors.hpp"
#include "onebox/state_space.hpp"

using namespace onebox;

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274;

ThetaState toy_theta(ModelKind kind = ModelKind::Model101) {
  ThetaState th;
  th.kind = kind;
  th.proc.phi.G = 1000;
  th.proc.phi.Q = 20;
  th.proc.m_w = 0;
  th.proc.sigma2_w = 1;
  th.obs.sigma2_v = 0.01;
  return th;
}

// one cycle, generator on, measured at minutes 1 and 2
struct Toy {
  CycleSchedule s{1, {{0, 15, {1, 2}}}};
  MeasurementSeries y;
  Toy() {
    y.times = {1, 2};
    y.cycle = {1, 1};
    y.generator_on = {1, 1};
    y.y = {18.5, 26};
  }
};

// Composite Simpson rule on [a, b].
template <class F>
double simpson(F f, double a, double b, int n) {
  if (n % 2) ++n;
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

}  // namespace

TEST_CASE("observation density") {
  ObsParams o;
  o.sigma2_v = 1;
  CHECK(log_obs_density(5, 5, {}, o) == doctest::Approx(-kHalfLog2Pi).epsilon(1e-14));
  CHECK(log_obs_density(5 * std::numbers::e, 5, {}, o) ==
        doctest::Approx(-kHalfLog2Pi - 0.5).epsilon(1e-14));
  o.sigma2_v = 0.01;
  CHECK(log_obs_density(5, 5, {}, o) == doctest::Approx(1.383646559789).epsilon(1e-12));
  CHECK_THROWS_AS(log_obs_density(0, 5, {}, o), DomainError);
  CHECK_THROWS_AS(log_obs_density(5, -1, {}, o), DomainError);
  o.beta = {0.5};
  const std::vector<double> x = {2.0};
  CHECK(log_obs_density(5 * std::numbers::e, 5, x, o) == doctest::Approx(1.383646559789));
  CHECK_THROWS_AS(log_obs_density(5, 5, {}, o), StructuralError);
}

TEST_CASE("shifted log-normal transition") {
  const Toy toy;
  ProcParams p = toy_theta().proc;
  // theta_1 = 0.8 * 10 + 10 = 18
  CHECK(log_trans_density(19, 10, 1, p, ModelKind::Model101, toy.s, 1) ==
        doctest::Approx(-kHalfLog2Pi).epsilon(1e-14));
  CHECK(log_trans_density(18, 10, 1, p, ModelKind::Model101, toy.s, 1) == kNegInf);
  CHECK(log_trans_density(17.9, 10, 1, p, ModelKind::Model101, toy.s, 1) == kNegInf);
  CHECK(std::isfinite(log_trans_density(18 + 1e-9, 10, 1, p, ModelKind::Model101, toy.s, 1)));
  // scale v divides the innovation and contributes -log v
  CHECK(log_trans_density(18 + 2, 10, 1, p, ModelKind::Model101, toy.s, 2) ==
        doctest::Approx(-kHalfLog2Pi - std::log(2.0)).epsilon(1e-14));
  CHECK(shifted_lognormal_log_density(19, 18, 1, 0, 1) == doctest::Approx(-kHalfLog2Pi));
}

TEST_CASE("transition density integrates to one") {
  for (double m : {-1.0, 0.0, 0.7})
    for (double s2 : {0.09, 0.5, 1.0})
      for (double v : {0.5, 1.0, 3.0}) {
        const double theta = 18;
        // substitute c = theta + exp(u) to resolve the boundary behaviour
        const double sd = std::sqrt(s2);
        const auto f = [&](double u) {
          return std::exp(shifted_lognormal_log_density(theta + std::exp(u), theta, v, m, s2) + u);
        };
        const double lo = std::log(v) + m - 12 * sd, hi = std::log(v) + m + 12 * sd;
        CHECK(simpson(f, lo, hi, 4000) == doctest::Approx(1).epsilon(1e-6));
      }
}

TEST_CASE("variance path") {
  const auto s = standard_schedule(1, 15, 20, 0, 1);
  ProcParams p;
  p.alpha_v = 0.1;
  p.beta_v = 0.9;
  auto v = variance_path(p, s, 1);
  CHECK(v[1] == doctest::Approx(1.1));
  CHECK(v[2] == doctest::Approx(1.21));
  CHECK(v[3] == doctest::Approx(1.331));
  CHECK(variance_step(2, false, 0.1, 0.5) == 1);
  CHECK(variance_step(1, false, 0.1, 0.5) == 0.5);
  p.alpha_v = 0;
  p.beta_v = 1;
  v = variance_path(p, s, 1);
  for (double x : v) CHECK(x == 1);
}

TEST_CASE("bridge and initial-condition densities") {
  ProcParams p = toy_theta().proc;
  CHECK(log_bridge_density(7, 7, p, ModelKind::Model101, 0) == doctest::Approx(-kHalfLog2Pi));
  CHECK(log_bridge_density(7 * std::exp(-2.0), 7, p, ModelKind::Model101, 10) ==
        doctest::Approx(-kHalfLog2Pi).epsilon(1e-13));
  CHECK_THROWS_AS(log_bridge_density(0, 7, p, ModelKind::Model101, 1), DomainError);
  CHECK_THROWS_AS(log_bridge_density(1, 7, p, ModelKind::Model101, -1), DomainError);
  CHECK(log_initial_density(5, 5, 1) == doctest::Approx(-kHalfLog2Pi));
}

TEST_CASE("bridge marginalization over the next cycle start") {
  // p(C_{s+1} | C_u) = integral of trans(C_{s+1} | C_s) bridge(C_s | C_u) dC_s,
  // once on log C_s and once on C_s with the 1/c Jacobian; the marginal must
  // be a proper density in C_{s+1}.
  CycleSchedule s(1, {{0, 2, {1, 2}}, {12, 27, {13, 14}}});
  ProcParams p = toy_theta().proc;
  p.sigma2_w = 0.04;
  p.m_w = -0.5;
  const double cu = 30, gap = 10;
  const auto kind = ModelKind::Model101;
  const auto joint_log = [&](double c_next, double log_cs) {
    const double cs = std::exp(log_cs);
    return log_trans_density(c_next, cs, 13, p, kind, s, 1) + log_bridge_density(cs, cu, p, kind, gap);
  };
  const double mu = std::log(cu) - 0.2 * gap;
  const auto marg_log = [&](double c) {
    return simpson([&](double u) { return std::exp(joint_log(c, u)); }, mu - 10 * 0.2, mu + 10 * 0.2,
                   2000);
  };
  const auto marg_lin = [&](double c) {
    return simpson([&](double cs) { return std::exp(joint_log(c, std::log(cs))) / cs; },
                   std::exp(mu - 10 * 0.2), std::exp(mu + 10 * 0.2), 20000);
  };
  for (double c : {12.0, 15.0, 20.0, 30.0}) CHECK(marg_log(c) == doctest::Approx(marg_lin(c)).epsilon(1e-6));
  // normalization: C_{s+1} ranges above theta_min = 0.8 * C_s,min + 10
  const double lo = 0.8 * std::exp(mu - 10 * 0.2) + 10;
  const double total = simpson([&](double u) { return marg_log(lo + std::exp(u)) * std::exp(u); },
                               -12, std::log(200.0), 1200);
  CHECK(total == doctest::Approx(1).epsilon(1e-6));
}

TEST_CASE("prior") {
  PriorSpec prior;
  ThetaState th = toy_theta();
  CHECK(prior.G.log_density(1000) == doctest::Approx(-7.377758908).epsilon(1e-9));
  CHECK(prior.sigma2_v.log_density(1.0) == doctest::Approx(0.08427080246088314).epsilon(1e-12));
  CHECK(log_prior(th, prior) == doctest::Approx(-797.9306997009764).epsilon(1e-12));
  th.proc.phi.G = 1900;
  CHECK(log_prior(th, prior) == kNegInf);
  th = toy_theta(ModelKind::Model111);
  th.proc.phi.Q_L = th.proc.phi.Q_R = 5;
  th.proc.phi.eps_L = th.proc.phi.eps_LF = 0.5;
  th.proc.phi.eps_RF = 1.2;
  CHECK(log_prior(th, prior) == kNegInf);

  const auto back = prior_from_json(prior_to_json(prior));
  CHECK(prior_to_json(back) == prior_to_json(prior));
  CHECK_THROWS_AS(prior_from_json(nlohmann::json{{"G", {5, 1}}}).validate(), ConfigError);
}

TEST_CASE("log joint equals the sum of its factors") {
  const Toy toy;
  const PriorSpec prior;
  const ThetaState th = toy_theta();
  const LatentPath path{{10, 19, 27}, {1, 1, 1}};
  const double direct = log_joint(toy.y, path, th, toy.s, prior);
  // scipy oracle of the same sum
  CHECK(direct == doctest::Approx(-798.9767585008381).epsilon(1e-13));

  const double hand = log_prior(th, prior) + log_initial_density(10, 18.5, 1) +
                      log_trans_density(19, 10, 1, th.proc, th.kind, toy.s, 1) +
                      log_trans_density(27, 19, 2, th.proc, th.kind, toy.s, 1) +
                      log_obs_density(18.5, 19, {}, th.obs) + log_obs_density(26, 27, {}, th.obs);
  CHECK(std::abs(direct - hand) < 1e-12);

  const StateSpaceModel model(toy.s, toy.y, th.kind, prior, false);
  CHECK(std::abs(model.log_joint(path, th) - hand) < 1e-12);
  CHECK(std::abs(model.log_likelihood(path, th) - (hand - log_prior(th, prior))) < 1e-12);

  const LatentPath bad{{10, 17, 27}, {1, 1, 1}};
  CHECK(log_joint(toy.y, bad, th, toy.s, prior) == kNegInf);
  const LatentPath short_path{{10, 19}, {1, 1}};
  CHECK_THROWS_AS(model.log_joint(short_path, th), StructuralError);
}

TEST_CASE("log joint over several cycles includes bridges") {
  const auto s = standard_schedule(2, 3, 5, 4, 1);
  MeasurementSeries y;
  for (const auto& c : s.cycles())
    for (double t : c.measure) {
      y.times.push_back(t);
      y.cycle.push_back(static_cast<int>(&c - s.cycles().data()) + 1);
      y.generator_on.push_back(s.generating(t) ? 1 : 0);
      y.y.push_back(20 + t);
    }
  ThetaState th = toy_theta();
  th.proc.m_w = -1;
  const PriorSpec prior;
  const StateSpaceModel model(s, y, th.kind, prior, false);
  const auto& lay = model.layout();
  REQUIRE(lay.size() == 12);
  std::vector<double> c(lay.size());
  for (std::size_t k = 0; k < c.size(); ++k) c[k] = k == 0 ? 15 : 0;
  // build an in-support path: theta + 1 at transitions, bridge mean at the second anchor
  for (std::size_t k = 1; k < c.size(); ++k) {
    if (lay[k].anchor) {
      c[k] = c[k - 1] * std::exp(-0.2 * (lay[k].time - lay[k - 1].time));
    } else {
      const auto tc = transition_coefficients(th.proc.phi, th.kind, 1, s.step_generating(lay[k].time));
      c[k] = tc.A * c[k - 1] + tc.B + 1;
    }
  }
  double hand = log_prior(th, prior);
  for (std::size_t k = 0; k < c.size(); ++k) {
    if (k == 0)
      hand += log_initial_density(c[0], y.y.front(), th.proc.sigma2_w);
    else if (lay[k].anchor)
      hand += log_bridge_density(c[k], c[k - 1], th.proc, th.kind, lay[k].time - lay[k - 1].time);
    else
      hand += log_trans_density(c[k], c[k - 1], lay[k].time, th.proc, th.kind, s, 1);
    if (lay[k].obs >= 0) hand += log_obs_density(y.y[lay[k].obs], c[k], {}, th.obs);
  }
  CHECK(std::abs(model.log_joint(model.make_path(c, th), th) - hand) < 1e-12);
}

TEST_CASE("dynamic variance reduces to the static model") {
  const Toy toy;
  const PriorSpec prior;
  ThetaState th = toy_theta();
  const StateSpaceModel stat(toy.s, toy.y, th.kind, prior, false);
  const StateSpaceModel dyn(toy.s, toy.y, th.kind, prior, true);
  ThetaState thd = th;
  thd.proc.dynamic_variance = true;
  thd.proc.alpha_v = 0;
  thd.proc.beta_v = 1;
  const std::vector<double> c = {10, 19, 27};
  const double a = stat.log_likelihood(stat.make_path(c, th), th);
  const double b = dyn.log_likelihood(dyn.make_path(c, thd), thd);
  CHECK(a == b);
}

TEST_CASE("Model101 and Model111 with zero controls agree") {
  const Toy toy;
  const PriorSpec prior;
  const ThetaState a = toy_theta(ModelKind::Model101);
  const ThetaState b = toy_theta(ModelKind::Model111);
  const StateSpaceModel ma(toy.s, toy.y, a.kind, prior, false);
  const StateSpaceModel mb(toy.s, toy.y, b.kind, prior, false);
  const std::vector<double> c = {10, 19, 27};
  CHECK(ma.log_likelihood(ma.make_path(c, a), a) == mb.log_likelihood(mb.make_path(c, b), b));
}

TEST_CASE("innovations rebuild the path") {
  const auto s = standard_schedule(2, 3, 5, 4, 1);
  ThetaState th = toy_theta();
  th.proc.m_w = -1;
  th.proc.sigma2_w = 0.3;
  const auto draw = simulate_state_space(th, s, 12, 99);
  const StateSpaceModel model(s, draw.series, th.kind, PriorSpec{}, false);
  const auto path = model.make_path(draw.latent, th);
  const auto innov = model.innovations(path.c, path.v, th);
  REQUIRE(innov);
  const auto rebuilt = model.rebuild(*innov, path.v, th);
  for (std::size_t k = 0; k < rebuilt.size(); ++k)
    CHECK(rebuilt[k] == doctest::Approx(path.c[k]).epsilon(1e-12));
  CHECK(std::isfinite(model.log_joint(path, th)));
}

TEST_CASE("parameter vector round trip") {
  ThetaState th = toy_theta(ModelKind::Model111);
  th.proc.phi.Q_L = 4;
  th.proc.phi.Q_R = 6;
  th.proc.phi.eps_L = 0.4;
  th.proc.phi.eps_LF = 0.6;
  th.proc.phi.eps_RF = 0.8;
  th.proc.dynamic_variance = true;
  th.proc.alpha_v = 0.3;
  th.proc.beta_v = 0.7;
  th.obs.beta = {0.1, -0.2};
  const auto names = theta_names(th.kind, true, 2);
  const auto v = theta_to_vector(th);
  REQUIRE(names.size() == v.size());
  const auto back = theta_from_vector(v, th.kind, true, 2, 100);
  CHECK(theta_to_vector(back) == v);
  CHECK(names.front() == "G");
  CHECK(names.back() == "beta_v");
}
