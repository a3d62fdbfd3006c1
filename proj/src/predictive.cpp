#include "onebox/predictive.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "onebox/errors.hpp"
#include "onebox/random.hpp"
#include "onebox/state_space.hpp"

namespace onebox {

namespace {

struct Located {
  PointKind kind;
  std::size_t site;  // latent site, or the site the draw starts from
};

std::vector<Located> locate(const PosteriorSamples& ps, const CycleSchedule& s,
                            const std::vector<double>& z) {
  if (!std::is_sorted(z.begin(), z.end())) throw DomainError("prediction times must be sorted");
  if (ps.latent_times.empty()) throw StructuralError("posterior samples carry no latent path");
  std::vector<long> site_grid;
  for (double t : ps.latent_times) site_grid.push_back(s.grid_index(t));
  const double first = s.cycles().front().start;
  std::vector<Located> out;
  for (double t : z) {
    if (t < 0.0) throw RangeError("prediction time " + format_double(t) + " is before t=0");
    const long g = s.grid_index(t);
    if (t < first)
      throw RangeError("prediction time " + format_double(t) + " is before the first cycle start " +
                       format_double(first));
    auto it = std::lower_bound(site_grid.begin(), site_grid.end(), g);
    const auto idx = static_cast<std::size_t>(it - site_grid.begin());
    if (it != site_grid.end() && *it == g)
      out.push_back({PointKind::Latent, idx});
    else if (it != site_grid.end())
      out.push_back({PointKind::Background, idx - 1});
    else
      out.push_back({PointKind::Forecast, site_grid.size() - 1});
  }
  return out;
}

bool generator_at(const CycleSchedule& s, double tau, bool after) {
  return tau < s.horizon() ? s.generating(tau) : after;
}

// Fills row m of out.c (and out.y) for one posterior draw.
void predict_draw(const PosteriorSamples& ps, const CycleSchedule& s, const PredictionRequest& req,
                  const std::vector<Located>& loc, std::size_t m, bool observe,
                  PredictiveDraws& out) {
  const ThetaState th = ps.theta_at(m);
  const EffectiveParams eff = effective_params(th.proc.phi, th.kind);
  const double V = th.proc.phi.V;
  const double dt = s.dt();
  const double sw = std::sqrt(th.proc.sigma2_w);
  const auto row = ps.latent.row(m);
  Rng rng = make_stream(req.seed, streams::kSmoothBase + m);

  // forward path state past the last latent site
  const std::size_t last = ps.latent_times.size() - 1;
  double t_cur = ps.latent_times[last];
  double c_cur = row[last];
  double v_cur = 1.0;
  if (th.proc.dynamic_variance) {
    const auto vp = variance_path(th.proc, s, 1.0);
    v_cur = vp[static_cast<std::size_t>(s.grid_index(t_cur))];
  }

  for (std::size_t j = 0; j < loc.size(); ++j) {
    const double z = req.z_times[j];
    double c = 0.0;
    switch (loc[j].kind) {
      case PointKind::Latent:
        c = row[loc[j].site];
        break;
      case PointKind::Background: {
        const double u = ps.latent_times[loc[j].site];
        const double mean = std::log(row[loc[j].site]) - eff.Q_eff / V * (z - u);
        c = std::exp(mean + sw * standard_normal(rng));
        break;
      }
      case PointKind::Forecast:
        while (s.grid_index(t_cur) < s.grid_index(z)) {
          const bool gen = generator_at(s, t_cur, req.generator_after_horizon);
          const TransitionCoefficients tc = transition_coefficients(eff, V, dt, gen);
          if (th.proc.dynamic_variance)
            v_cur = variance_step(v_cur, gen, th.proc.alpha_v, th.proc.beta_v);
          c_cur = tc.A * c_cur + tc.B + v_cur * std::exp(th.proc.m_w + sw * standard_normal(rng));
          t_cur = s.grid_time(s.grid_index(t_cur) + 1);
        }
        c = c_cur;
        break;
    }
    out.c(m, j) = c;
  }

  if (!observe) return;
  Rng rng_y = make_stream(req.seed, streams::kObserveBase + m);
  const double sv = std::sqrt(th.obs.sigma2_v);
  for (std::size_t j = 0; j < loc.size(); ++j) {
    double xb = 0.0;
    for (std::size_t b = 0; b < th.obs.beta.size(); ++b) xb += req.covariates[j][b] * th.obs.beta[b];
    out.y(m, j) = std::exp(std::log(out.c(m, j)) + xb + sv * standard_normal(rng_y));
  }
}

PredictiveDraws prepare(const PosteriorSamples& ps, const CycleSchedule& s,
                        const PredictionRequest& req, bool observe, std::vector<Located>& loc) {
  loc = locate(ps, s, req.z_times);
  if (observe && ps.n_beta > 0) {
    if (req.covariates.size() != req.z_times.size())
      throw StructuralError("covariates are required at every prediction time");
    for (const auto& x : req.covariates)
      if (x.size() != ps.n_beta) throw StructuralError("covariate row has the wrong length");
  }
  PredictiveDraws out;
  out.times = req.z_times;
  for (const auto& l : loc) out.kinds.push_back(l.kind);
  out.c = DrawMatrix(ps.n_draws(), req.z_times.size());
  if (observe) out.y = DrawMatrix(ps.n_draws(), req.z_times.size());
  return out;
}

PredictiveDraws run(const PosteriorSamples& ps, const CycleSchedule& s,
                    const PredictionRequest& req, bool observe, bool parallel) {
  std::vector<Located> loc;
  PredictiveDraws out = prepare(ps, s, req, observe, loc);
  const long n = static_cast<long>(ps.n_draws());
  if (parallel) {
    std::exception_ptr err;
#pragma omp parallel for schedule(static)
    for (long m = 0; m < n; ++m) {
      try {
        predict_draw(ps, s, req, loc, static_cast<std::size_t>(m), observe, out);
      } catch (...) {
#pragma omp critical
        if (!err) err = std::current_exception();
      }
    }
    if (err) std::rethrow_exception(err);
  } else {
    for (long m = 0; m < n; ++m) predict_draw(ps, s, req, loc, static_cast<std::size_t>(m), observe, out);
  }
  return out;
}

}  // namespace

std::vector<PointKind> classify_times(const PosteriorSamples& ps, const CycleSchedule& s,
                                      const std::vector<double>& z) {
  std::vector<PointKind> out;
  for (const auto& l : locate(ps, s, z)) out.push_back(l.kind);
  return out;
}

PredictiveDraws smooth_latent(const PosteriorSamples& ps, const CycleSchedule& s,
                              const PredictionRequest& req) {
  return run(ps, s, req, false, true);
}
PredictiveDraws smooth_latent_serial(const PosteriorSamples& ps, const CycleSchedule& s,
                                     const PredictionRequest& req) {
  return run(ps, s, req, false, false);
}
PredictiveDraws predict_observations(const PosteriorSamples& ps, const CycleSchedule& s,
                                     const PredictionRequest& req) {
  return run(ps, s, req, true, true);
}
PredictiveDraws predict_observations_serial(const PosteriorSamples& ps, const CycleSchedule& s,
                                            const PredictionRequest& req) {
  return run(ps, s, req, true, false);
}

double quantile(std::vector<double> x, double p) {
  if (x.empty()) throw DomainError("quantile of an empty sample");
  std::sort(x.begin(), x.end());
  const double h = double(x.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - double(lo)) * (x[hi] - x[lo]);
}

Summary summarize(const std::vector<double>& x) {
  return {quantile(x, 0.5), quantile(x, 0.025), quantile(x, 0.975)};
}

std::string format_predictions_csv(const PredictiveDraws& d, double horizon) {
  std::ostringstream out;
  out << "time_min,quantile_2.5,median,quantile_97.5,kind\n";
  const auto line = [&](double t, const Summary& s, const char* kind) {
    out << format_double(t) << ',' << format_double(s.lo) << ',' << format_double(s.median) << ','
        << format_double(s.hi) << ',' << kind << '\n';
  };
  for (std::size_t j = 0; j < d.times.size(); ++j) {
    line(d.times[j], summarize(d.c.column(j)), d.times[j] > horizon ? "forecast" : "latent");
    if (d.y.rows) line(d.times[j], summarize(d.y.column(j)), "observed");
  }
  return out.str();
}

std::vector<DerivedQuantity> derived_posteriors(const PosteriorSamples& ps, double V, double T,
                                                const std::vector<double>& thresholds) {
  for (double f : thresholds)
    if (!(f > 0.0 && f < 1.0)) throw DomainError("decay thresholds must lie in (0, 1)");
  std::vector<DerivedQuantity> out = {{"removal_rate", {}, {}}, {"Q_eff", {}, {}},
                                      {"G_eff", {}, {}},        {"steady_state", {}, {}},
                                      {"C_avg", {}, {}}};
  for (double f : thresholds) out.push_back({"decay_time_" + format_double(f), {}, {}});
  for (auto& q : out) q.draws.resize(ps.n_draws());
  for (std::size_t m = 0; m < ps.n_draws(); ++m) {
    const ThetaState th = ps.theta_at(m);
    const EffectiveParams eff = effective_params(th.proc.phi, th.kind);
    const double css = steady_state(eff);
    out[0].draws[m] = removal_rate(eff, V);
    out[1].draws[m] = eff.Q_eff;
    out[2].draws[m] = eff.G_eff;
    out[3].draws[m] = css;
    out[4].draws[m] = average_concentration(eff, V, T);
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      out[5 + i].draws[m] = decay_time(eff, V, css, thresholds[i] * css);
  }
  for (auto& q : out) q.summary = summarize(q.draws);
  return out;
}

nlohmann::json derived_to_json(const std::vector<DerivedQuantity>& d, double V, double T) {
  nlohmann::json q = nlohmann::json::object();
  for (const auto& x : d)
    q[x.name] = {{"median", x.summary.median},
                 {"quantile_2.5", x.summary.lo},
                 {"quantile_97.5", x.summary.hi}};
  return {{"V", V}, {"T", T}, {"n_draws", d.empty() ? 0 : d.front().draws.size()}, {"quantities", q}};
}

}  // namespace onebox
