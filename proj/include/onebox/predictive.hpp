#pragma once

// Smoothing, forecasting and derived exposure quantities from posterior draws.
//
// For every retained draw (Theta, C):
//   z on a latent site        -> the stored draw
//   z in a background gap     -> bridge law from the preceding cycle end
//   z past the last cycle end -> forward simulation of the transition law;
//                                past the horizon T the generator is off
//                                unless requested otherwise, and the
//                                variance path keeps evolving with H_t.
// Draw m uses its own random streams, so the parallel kernels and their
// serial references agree bit for bit.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "onebox/experiment.hpp"
#include "onebox/sampler.hpp"

namespace onebox {

struct PredictionRequest {
  std::vector<double> z_times;                // sorted, on the grid, >= first cycle start
  bool want_observations = true;
  std::vector<std::vector<double>> covariates;  // one row per z when beta is active
  bool generator_after_horizon = false;
  std::uint64_t seed = 1;
};

enum class PointKind { Latent, Background, Forecast };

struct PredictiveDraws {
  std::vector<double> times;
  std::vector<PointKind> kinds;
  DrawMatrix c;  // draws x z
  DrawMatrix y;  // empty unless observations were requested
};

// Per-z classification; throws RangeError for z before the first cycle or off the grid.
std::vector<PointKind> classify_times(const PosteriorSamples& ps, const CycleSchedule& s,
                                      const std::vector<double>& z);

PredictiveDraws smooth_latent(const PosteriorSamples& ps, const CycleSchedule& s,
                              const PredictionRequest& req);
PredictiveDraws smooth_latent_serial(const PosteriorSamples& ps, const CycleSchedule& s,
                                     const PredictionRequest& req);

// smooth_latent followed by one Y draw per C draw.
PredictiveDraws predict_observations(const PosteriorSamples& ps, const CycleSchedule& s,
                                     const PredictionRequest& req);
PredictiveDraws predict_observations_serial(const PosteriorSamples& ps, const CycleSchedule& s,
                                            const PredictionRequest& req);

// Type-7 sample quantile; p in [0, 1].
double quantile(std::vector<double> x, double p);

struct Summary {
  double median = 0.0;
  double lo = 0.0;  // 2.5%
  double hi = 0.0;  // 97.5%
};
Summary summarize(const std::vector<double>& x);

// time_min,quantile_2.5,median,quantile_97.5,kind
// kind: latent (C at t <= T), forecast (C at t > T), observed (Y).
std::string format_predictions_csv(const PredictiveDraws& d, double horizon);

struct DerivedQuantity {
  std::string name;
  std::vector<double> draws;
  Summary summary;
};

// Per-draw removal rate (per hour), effective Q' and G', steady state,
// average concentration over [0, T] and decay time from steady state down
// to each threshold fraction.
std::vector<DerivedQuantity> derived_posteriors(const PosteriorSamples& ps, double V, double T,
                                                const std::vector<double>& thresholds);
nlohmann::json derived_to_json(const std::vector<DerivedQuantity>& d, double V, double T);

}  // namespace onebox
