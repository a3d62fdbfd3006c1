#include "onebox/model_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "onebox/errors.hpp"
#include "onebox/predictive.hpp"
#include "onebox/state_space.hpp"

namespace onebox {

namespace {

// Column of the latent matrix holding each observation.
std::vector<std::size_t> align(const PosteriorSamples& ps, const MeasurementSeries& y) {
  if (ps.latent.cols != ps.latent_times.size())
    throw StructuralError("latent draws and latent times disagree");
  if (y.n_covariates() != ps.n_beta)
    throw StructuralError("data has " + std::to_string(y.n_covariates()) +
                          " covariates but the fit used " + std::to_string(ps.n_beta));
  std::vector<std::size_t> col(y.size());
  for (std::size_t j = 0; j < y.size(); ++j) {
    const double t = y.times[j];
    auto it = std::lower_bound(ps.latent_times.begin(), ps.latent_times.end(), t - 1e-9);
    if (it == ps.latent_times.end() || std::abs(*it - t) > 1e-9)
      throw StructuralError("no latent draw at observation time " + format_double(t));
    col[j] = static_cast<std::size_t>(it - ps.latent_times.begin());
  }
  return col;
}

void loglik_row(const PosteriorSamples& ps, const MeasurementSeries& y,
                const std::vector<std::size_t>& col, std::size_t m, DrawMatrix& out) {
  const ThetaState th = ps.theta_at(m);
  static const std::vector<double> none;
  for (std::size_t j = 0; j < y.size(); ++j)
    out(m, j) = log_obs_density(y.y[j], ps.latent(m, col[j]), y.x.empty() ? none : y.x[j], th.obs);
}

// Per-column (lppd_j, var_j) contribution.
void column_terms(const DrawMatrix& ll, std::size_t j, double& lppd, double& var) {
  const std::size_t n = ll.rows;
  double mx = -std::numeric_limits<double>::infinity(), mean = 0.0;
  for (std::size_t m = 0; m < n; ++m) {
    mx = std::max(mx, ll(m, j));
    mean += ll(m, j);
  }
  mean /= double(n);
  double se = 0.0, ss = 0.0;
  for (std::size_t m = 0; m < n; ++m) {
    se += std::exp(ll(m, j) - mx);
    ss += (ll(m, j) - mean) * (ll(m, j) - mean);
  }
  lppd = mx + std::log(se / double(n));
  var = ss / double(n - 1);
}

void check_draws(const DrawMatrix& ll) {
  if (ll.rows < 2) throw DomainError("WAIC needs at least 2 posterior draws");
}

}  // namespace

DrawMatrix pointwise_loglik(const PosteriorSamples& ps, const MeasurementSeries& y) {
  const auto col = align(ps, y);
  DrawMatrix out(ps.n_draws(), y.size());
  const long n = static_cast<long>(ps.n_draws());
#pragma omp parallel for schedule(static)
  for (long m = 0; m < n; ++m) loglik_row(ps, y, col, static_cast<std::size_t>(m), out);
  return out;
}

DrawMatrix pointwise_loglik_serial(const PosteriorSamples& ps, const MeasurementSeries& y) {
  const auto col = align(ps, y);
  DrawMatrix out(ps.n_draws(), y.size());
  for (std::size_t m = 0; m < ps.n_draws(); ++m) loglik_row(ps, y, col, m, out);
  return out;
}

WaicResult waic(const DrawMatrix& ll) {
  check_draws(ll);
  const long n = static_cast<long>(ll.cols);
  std::vector<double> lp(ll.cols), pv(ll.cols);
#pragma omp parallel for schedule(static)
  for (long j = 0; j < n; ++j)
    column_terms(ll, static_cast<std::size_t>(j), lp[static_cast<std::size_t>(j)],
                 pv[static_cast<std::size_t>(j)]);
  WaicResult r;
  // fixed-order reduction keeps the result independent of thread count
  for (std::size_t j = 0; j < ll.cols; ++j) {
    r.lppd += lp[j];
    r.p_waic += pv[j];
  }
  r.waic = -2.0 * (r.lppd - r.p_waic);
  return r;
}

WaicResult waic_serial(const DrawMatrix& ll) {
  check_draws(ll);
  WaicResult r;
  for (std::size_t j = 0; j < ll.cols; ++j) {
    double lp, pv;
    column_terms(ll, j, lp, pv);
    r.lppd += lp;
    r.p_waic += pv;
  }
  r.waic = -2.0 * (r.lppd - r.p_waic);
  return r;
}

double residual_ss(const PosteriorSamples& ps, const MeasurementSeries& y) {
  const auto col = align(ps, y);
  double rss = 0.0;
  std::vector<double> fit(ps.n_draws());
  for (std::size_t j = 0; j < y.size(); ++j) {
    for (std::size_t m = 0; m < ps.n_draws(); ++m) {
      double f = std::log(ps.latent(m, col[j]));
      for (std::size_t b = 0; b < ps.n_beta; ++b)
        f += y.x[j][b] * ps.theta(m, ps.column_index("beta_" + std::to_string(b + 1)));
      fit[m] = f;
    }
    const double r = std::log(y.y[j]) - quantile(fit, 0.5);
    rss += r * r;
  }
  return rss;
}

nlohmann::json evaluation_json(const WaicResult& w, double rss, std::size_t n_points,
                               std::size_t n_draws) {
  return {{"waic", w.waic},   {"lppd", w.lppd},         {"p_waic", w.p_waic},
          {"rss", rss},       {"n_points", n_points},   {"n_draws", n_draws}};
}

}  // namespace onebox
