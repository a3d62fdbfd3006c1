#pragma once

// WAIC and fit metrics on the log-concentration scale.

#include <cstddef>

#include <nlohmann/json.hpp>

#include "onebox/experiment.hpp"
#include "onebox/sampler.hpp"

namespace onebox {

// draws x observations; entry (m, j) = log p(y_j | c_j^(m), Theta1^(m)).
DrawMatrix pointwise_loglik(const PosteriorSamples& ps, const MeasurementSeries& y);
DrawMatrix pointwise_loglik_serial(const PosteriorSamples& ps, const MeasurementSeries& y);

struct WaicResult {
  double waic = 0.0;
  double lppd = 0.0;
  double p_waic = 0.0;
};

// Throws DomainError with fewer than two draws.
WaicResult waic(const DrawMatrix& ll);
WaicResult waic_serial(const DrawMatrix& ll);

// Sum over observations of (log y_j - posterior median of log c_j + x_j'beta)^2.
double residual_ss(const PosteriorSamples& ps, const MeasurementSeries& y);

nlohmann::json evaluation_json(const WaicResult& w, double rss, std::size_t n_points,
                               std::size_t n_draws);

}  // namespace onebox
