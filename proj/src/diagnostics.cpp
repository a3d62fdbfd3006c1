#include "onebox/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "onebox/errors.hpp"

namespace onebox {

namespace {

double mean_of(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / double(x.size());
}

double var_of(std::span<const double> x, double m) {  // unbiased
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return x.size() > 1 ? s / double(x.size() - 1) : 0.0;
}

double autocov(std::span<const double> x, double m, std::size_t lag) {
  const std::size_t n = x.size();
  double s = 0.0;
  for (std::size_t i = 0; i + lag < n; ++i) s += (x[i] - m) * (x[i + lag] - m);
  return s / double(n);
}

}  // namespace

bool is_degenerate(std::span<const double> x) {
  if (x.empty()) return true;
  return std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
}

std::vector<double> autocorrelation(std::span<const double> x, std::size_t max_lag) {
  std::vector<double> rho(max_lag + 1, 0.0);
  if (x.empty()) return rho;
  rho[0] = 1.0;
  if (is_degenerate(x)) return rho;
  const double m = mean_of(x);
  const double g0 = autocov(x, m, 0);
  for (std::size_t k = 1; k <= max_lag && k < x.size(); ++k) rho[k] = autocov(x, m, k) / g0;
  return rho;
}

double effective_sample_size(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 4 || is_degenerate(x)) return 0.0;
  const double m = mean_of(x);
  const double g0 = autocov(x, m, 0);
  // sums of adjacent pairs, truncated at the first non-positive one and
  // forced to be non-increasing
  double tau = -1.0;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; 2 * k + 1 < n; ++k) {
    double gamma = (autocov(x, m, 2 * k) + autocov(x, m, 2 * k + 1)) / g0;
    if (gamma <= 0.0) break;
    gamma = std::min(gamma, prev);
    prev = gamma;
    tau += 2.0 * gamma;
  }
  tau = std::max(tau, 1.0 / std::log10(double(n)));
  return double(n) / tau;
}

double split_rhat(const std::vector<std::vector<double>>& chains) {
  std::vector<std::span<const double>> halves;
  for (const auto& c : chains) {
    const std::size_t h = c.size() / 2;
    if (h < 2) return std::numeric_limits<double>::quiet_NaN();
    halves.emplace_back(c.data(), h);
    halves.emplace_back(c.data() + (c.size() - h), h);
  }
  const std::size_t n = std::min_element(halves.begin(), halves.end(), [](auto a, auto b) {
                          return a.size() < b.size();
                        })->size();
  std::vector<double> means, vars;
  for (auto h : halves) {
    h = h.first(n);
    means.push_back(mean_of(h));
    vars.push_back(var_of(h, means.back()));
  }
  const double grand = mean_of(means);
  const double B = double(n) * var_of(means, grand);
  const double W = mean_of(vars);
  if (W <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  const double var_plus = (double(n) - 1.0) / double(n) * W + B / double(n);
  return std::sqrt(var_plus / W);
}

const ParameterDiagnostics& DiagnosticsReport::at(const std::string& name) const {
  for (const auto& p : parameters)
    if (p.name == name) return p;
  throw StructuralError("no diagnostics for '" + name + "'");
}

DiagnosticsReport diagnostics(const PosteriorSamples& ps, std::vector<std::size_t> lags) {
  DiagnosticsReport r;
  r.n_draws = ps.n_draws();
  r.lags = std::move(lags);
  r.acceptance = ps.acceptance;
  std::map<int, std::vector<std::size_t>> rows_by_chain;
  for (std::size_t i = 0; i < ps.chain.size(); ++i) rows_by_chain[ps.chain[i]].push_back(i);
  r.n_chains = rows_by_chain.size();
  const std::size_t max_lag = r.lags.empty() ? 0 : *std::max_element(r.lags.begin(), r.lags.end());

  for (std::size_t c = 0; c < ps.theta.cols; ++c) {
    ParameterDiagnostics d;
    d.name = ps.theta_names[c];
    const std::vector<double> all = ps.theta.column(c);
    d.degenerate = is_degenerate(all);
    if (!all.empty()) {
      d.mean = mean_of(all);
      d.sd = std::sqrt(var_of(all, d.mean));
    }
    std::vector<std::vector<double>> per_chain;
    std::vector<double> rho_sum(max_lag + 1, 0.0);
    for (const auto& [id, rows] : rows_by_chain) {
      std::vector<double> x;
      x.reserve(rows.size());
      for (std::size_t i : rows) x.push_back(all[i]);
      d.ess += effective_sample_size(x);
      const auto rho = autocorrelation(x, max_lag);
      for (std::size_t k = 0; k <= max_lag; ++k) rho_sum[k] += rho[k];
      per_chain.push_back(std::move(x));
    }
    for (std::size_t lag : r.lags)
      d.autocorr.push_back(r.n_chains ? rho_sum[lag] / double(r.n_chains) : 0.0);
    d.rhat = d.degenerate ? std::numeric_limits<double>::quiet_NaN() : split_rhat(per_chain);
    r.parameters.push_back(std::move(d));
  }
  return r;
}

nlohmann::json diagnostics_to_json(const DiagnosticsReport& r) {
  const auto num = [](double v) -> nlohmann::json {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : r.parameters) {
    nlohmann::json ac = nlohmann::json::object();
    for (std::size_t i = 0; i < r.lags.size(); ++i) ac[std::to_string(r.lags[i])] = num(p.autocorr[i]);
    params.push_back({{"name", p.name},
                      {"mean", num(p.mean)},
                      {"sd", num(p.sd)},
                      {"ess", num(p.ess)},
                      {"split_rhat", num(p.rhat)},
                      {"autocorrelation", ac},
                      {"degenerate", p.degenerate}});
  }
  nlohmann::json acc = nlohmann::json::array();
  for (const auto& a : r.acceptance)
    acc.push_back({{"block", a.block},
                   {"proposed", a.proposed},
                   {"accepted", a.accepted},
                   {"support_rejected", a.support_rejected},
                   {"rate", a.rate()}});
  return {{"n_draws", r.n_draws}, {"n_chains", r.n_chains}, {"parameters", params}, {"acceptance", acc}};
}

}  // namespace onebox
