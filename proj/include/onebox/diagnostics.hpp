#pragma once

// Convergence summaries for sampler output.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "onebox/sampler.hpp"

namespace onebox {

// Sample autocorrelations at lags 0..max_lag (biased, denominator n).
// All zeros after lag 0 for a constant series.
std::vector<double> autocorrelation(std::span<const double> x, std::size_t max_lag);

// Geyer initial-monotone-sequence ESS. Returns 0 for a constant series
// (see is_degenerate).
double effective_sample_size(std::span<const double> x);

bool is_degenerate(std::span<const double> x);

// Split-Rhat: every chain is cut in half and the halves are treated as
// separate chains. NaN when fewer than 4 draws per chain or zero variance.
double split_rhat(const std::vector<std::vector<double>>& chains);

struct ParameterDiagnostics {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double ess = 0.0;
  double rhat = 0.0;
  std::vector<double> autocorr;  // at DiagnosticsReport::lags
  bool degenerate = false;
};

struct DiagnosticsReport {
  std::size_t n_draws = 0;
  std::size_t n_chains = 0;
  std::vector<std::size_t> lags;
  std::vector<ParameterDiagnostics> parameters;
  std::vector<BlockAcceptance> acceptance;

  const ParameterDiagnostics& at(const std::string& name) const;
};

DiagnosticsReport diagnostics(const PosteriorSamples& ps,
                              std::vector<std::size_t> lags = {1, 5, 10, 25, 50});
nlohmann::json diagnostics_to_json(const DiagnosticsReport& r);

}  // namespace onebox
