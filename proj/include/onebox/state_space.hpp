#pragma once

// Probability model melding the one-box physics with noisy measurements.
//
//   log Y_t | C_t      ~ N(log C_t + x_t'beta, sigma2_v)
//   C_t | C_{t-dt}     ~ theta_t + v_t X,  log X ~ N(m_w, sigma2_w),
//                        theta_t = A C_{t-dt} + B (explicit Euler step)
//   log C_{s_i} | C_u  ~ N(log C_u - (Q'/V)(s_i - u), sigma2_w)   (bridge)
//   log C_{s_1}        ~ N(log c0, sigma2_w)                       (initial)
//
// with v_t = H_t v_{t-dt}, H_t = 1 + alpha_v while generating, beta_v
// otherwise (v_t = 1 for the static-variance model).

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "onebox/experiment.hpp"
#include "onebox/mechanistic.hpp"
#include "onebox/random.hpp"

namespace onebox {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct ObsParams {
  std::vector<double> beta;  // regression coefficients, may be empty
  double sigma2_v = 1.0;     // log-scale measurement variance
};

struct ProcParams {
  MechParams phi;            // interpreted for the model kind; phi.V is known
  double m_w = 0.0;          // log-mean of the transition innovation
  double sigma2_w = 1.0;     // log-variance of the transition innovation
  double alpha_v = 0.0;      // variance growth while generating
  double beta_v = 1.0;       // variance decay factor otherwise
  bool dynamic_variance = false;
};

struct ThetaState {
  ModelKind kind = ModelKind::Model101;
  ObsParams obs;
  ProcParams proc;
};

struct UniformBounds {
  double lo = 0.0;
  double hi = 1.0;
  bool contains(double x) const { return x > lo && x < hi; }
  double log_density(double x) const;
  double midpoint() const { return 0.5 * (lo + hi); }
};

struct InverseGammaPrior {
  double shape = 1.0;
  double scale = 1.0;
  double log_density(double x) const;
  double mean() const { return shape > 1.0 ? scale / (shape - 1.0) : scale / (shape + 1.0); }
};

struct PriorSpec {
  UniformBounds G{200, 1800};
  UniformBounds Q{3, 50};
  UniformBounds Q_L{2, 10};
  UniformBounds Q_R{2, 10};
  UniformBounds eps_L{0.3, 0.7};
  UniformBounds eps_LF{0.3, 0.7};
  UniformBounds eps_RF{0.6, 1.0};
  InverseGammaPrior sigma2_v{10, 8.42};
  InverseGammaPrior sigma2_w{2, 1.68};
  double mu_m = 0.0;
  double kappa_m = 100.0;     // variance of the m_w prior
  double mu_beta = 0.0;
  double beta_scale = 1.0;    // beta ~ N(mu_beta, beta_scale * sigma2_v)
  UniformBounds alpha_v{0, 2};
  UniformBounds beta_v{0, 1};
  std::optional<double> c0;   // centre of the initial-condition prior; default first y

  void validate() const;  // throws ConfigError
};

PriorSpec prior_from_json(const nlohmann::json& j);  // missing keys keep the defaults
nlohmann::json prior_to_json(const PriorSpec& p);
PriorSpec load_prior(const std::filesystem::path& path);

struct LatentPath {
  std::vector<double> c;  // concentration at every latent site, > 0
  std::vector<double> v;  // variance scale at every site (all 1 when static)
};

struct LatentSite {
  double time = 0.0;
  long grid = 0;
  int cycle = 0;               // 0-based
  bool anchor = false;         // cycle start s_i
  bool last_in_cycle = false;  // u_i
  long obs = -1;               // row of the measurement series, or -1
  bool gen_step = false;       // generator status over the step ending here
};

// Latent sites: every grid minute from s_i to u_i for each cycle, in time order.
class LatentLayout {
 public:
  LatentLayout() = default;
  LatentLayout(const CycleSchedule& s, const MeasurementSeries& y);

  const std::vector<LatentSite>& sites() const { return sites_; }
  std::size_t size() const { return sites_.size(); }
  const LatentSite& operator[](std::size_t k) const { return sites_[k]; }
  std::size_t anchor(std::size_t cycle) const { return anchors_[cycle]; }
  std::size_t n_cycles() const { return anchors_.size(); }
  std::size_t site_of_observation(std::size_t row) const { return obs_site_[row]; }
  std::vector<double> times() const;
  // Site index at time t, if t is a latent site.
  std::optional<std::size_t> find(double t, double dt) const;

 private:
  std::vector<LatentSite> sites_;
  std::vector<std::size_t> anchors_;
  std::vector<std::size_t> obs_site_;
};

// ------------------------------------------------------------ densities

double normal_log_density(double x, double mean, double var);
double lognormal_log_density(double x, double m, double s2);

double log_obs_density(double y, double c, std::span<const double> x, const ObsParams& th1);

// Shifted log-normal: density of c_t under theta + v X, log X ~ N(m, s2).
// -inf on c_t <= theta.
double shifted_lognormal_log_density(double c_t, double theta, double v, double m, double s2);

double log_trans_density(double c_t, double c_prev, double t, const ProcParams& th2,
                         ModelKind kind, const CycleSchedule& s, double v_t);

// v over the grid 0, dt, ..., T (index = grid index).
std::vector<double> variance_path(const ProcParams& th2, const CycleSchedule& s, double v0);
inline double variance_step(double v_prev, bool gen_on, double alpha_v, double beta_v) {
  return (gen_on ? 1.0 + alpha_v : beta_v) * v_prev;
}

// Bridge between cycles; normal density of log c_start.
double log_bridge_density(double c_start, double c_prev_end, const ProcParams& th2,
                          ModelKind kind, double gap);
// Initial condition of the first cycle; normal density of log c_start.
double log_initial_density(double c_start, double c0_guess, double sigma2_w);

double log_prior(const ThetaState& theta, const PriorSpec& prior);

// Parameter vector layout shared by the sampler and the sample files.
std::vector<std::string> theta_names(ModelKind kind, bool dynamic_variance, std::size_t n_beta);
std::vector<double> theta_to_vector(const ThetaState& theta);
ThetaState theta_from_vector(std::span<const double> values, ModelKind kind,
                             bool dynamic_variance, std::size_t n_beta, double V);

// Per-parameter constants of the explicit step on the model's grid.
struct StepTerms {
  double A = 1.0;           // 1 - Q' dt / V
  double B_gen = 0.0;       // G' dt / V, added on generating steps
  double decay_rate = 0.0;  // Q' / V, per minute (bridge mean)
  bool stable = true;       // A > 0
};

// Cached layout + data + prior; evaluates every factor of the log joint.
class StateSpaceModel {
 public:
  StateSpaceModel(CycleSchedule schedule, MeasurementSeries y, ModelKind kind, PriorSpec prior,
                  bool dynamic_variance, double volume = 100.0);

  const CycleSchedule& schedule() const { return schedule_; }
  const MeasurementSeries& data() const { return y_; }
  const LatentLayout& layout() const { return layout_; }
  const PriorSpec& prior() const { return prior_; }
  ModelKind kind() const { return kind_; }
  bool dynamic_variance() const { return dynamic_; }
  double c0_guess() const { return c0_guess_; }
  double volume() const { return volume_; }
  std::size_t n_beta() const { return y_.n_covariates(); }

  // Per-site variance scale (v0 = 1).
  std::vector<double> site_variances(const ThetaState& theta) const;
  LatentPath make_path(std::vector<double> c, const ThetaState& theta) const;

  double log_prior(const ThetaState& theta) const { return onebox::log_prior(theta, prior_); }
  // log p(Y, C | Theta): initial/bridge + transitions + observations.
  double log_likelihood(const LatentPath& path, const ThetaState& theta) const;
  double log_joint(const LatentPath& path, const ThetaState& theta) const;

  // Factors attached to one site: its observation and its incoming
  // transition (or bridge / initial condition).
  double obs_factor(std::size_t k, std::span<const double> c, const ThetaState& theta) const;
  double incoming_factor(std::size_t k, std::span<const double> c, std::span<const double> v,
                         const ThetaState& theta, const StepTerms& st) const;
  // Every factor that depends on c[k].
  double local_log_density(std::size_t k, std::span<const double> c, std::span<const double> v,
                           const ThetaState& theta, const StepTerms& st) const;

  // Mean of log C at an anchor site (initial centre or bridge mean).
  double anchor_log_mean(std::size_t k, std::span<const double> c, const StepTerms& st) const;
  // Deterministic one-step prediction A C_{k-1} + B for a non-anchor site.
  double step_mean(std::size_t k, std::span<const double> c, const StepTerms& st) const;

  // Innovations that regenerate the path: log-residual at anchors,
  // (c - theta)/v elsewhere. Empty optional when a site is out of support.
  std::optional<std::vector<double>> innovations(std::span<const double> c,
                                                 std::span<const double> v,
                                                 const ThetaState& theta) const;
  std::vector<double> rebuild(std::span<const double> innov, std::span<const double> v,
                              const ThetaState& theta) const;

  bool stable(const ThetaState& theta) const;
  StepTerms step_terms(const ThetaState& theta) const;

 private:
  CycleSchedule schedule_;
  MeasurementSeries y_;
  ModelKind kind_;
  PriorSpec prior_;
  bool dynamic_;
  LatentLayout layout_;
  double c0_guess_ = 1.0;
  double volume_ = 100.0;
};

// Free-function form of StateSpaceModel::log_joint.
double log_joint(const MeasurementSeries& y, const LatentPath& path, const ThetaState& theta,
                 const CycleSchedule& s, const PriorSpec& prior);

// Draws latent path and measurements from the statistical model itself
// (shifted log-normal transitions, bridges, optional dynamic variance).
// The first anchor is fixed at C0.
struct ModelDraw {
  std::vector<double> latent_times;
  std::vector<double> latent;
  MeasurementSeries series;
};
ModelDraw simulate_state_space(const ThetaState& theta, const CycleSchedule& s, double C0,
                               std::uint64_t seed);

}  // namespace onebox
