#pragma once

// Adaptive Metropolis-within-Gibbs sampler over (Theta, latent path).
//
// One iteration:
//   1. single-site random-walk MH on log C_t for every latent site,
//   2. random-walk MH on each free mechanistic parameter (logit scale),
//   3. a joint non-centred MH block over the mechanistic parameters that
//      keeps the transition innovations fixed and regenerates the path,
//   4. (dynamic variance) MH on alpha_v, beta_v, centred and non-centred,
//   5. conjugate draws of m_w, sigma2_w and (beta, sigma2_v), plus a
//      non-centred move on (m_w, sigma2_w) that rescales every innovation.
// Proposal scales adapt during burn-in only.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "onebox/random.hpp"
#include "onebox/state_space.hpp"

namespace onebox {

struct ChainConfig {
  std::size_t n_keep = 5000;
  std::size_t n_burn = 5000;
  std::size_t thin = 1;
  std::uint64_t seed = 1;
  std::size_t adapt_window = 50;
  double target_accept_site = 0.44;
  double target_accept_block = 0.234;
  std::size_t n_chains = 1;

  // Parameters held at the given value for the whole run.
  std::map<std::string, double> fixed;
  // Starting latent path (default: built from the data).
  std::optional<std::vector<double>> initial_latent;
  bool update_latent = true;
  bool single_mech_updates = true;
  bool joint_mech_block = true;
  // false: sigma2_v by random-walk MH instead of its conjugate draw.
  bool conjugate_obs = true;

  void validate() const;  // throws ConfigError
};

nlohmann::json chain_config_to_json(const ChainConfig& c);
ChainConfig chain_config_from_json(const nlohmann::json& j);  // missing keys keep defaults

struct BlockAcceptance {
  std::string block;
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  std::size_t support_rejected = 0;  // proposals with zero target density
  double rate() const { return proposed ? double(accepted) / double(proposed) : 0.0; }
};

// Row-major draws x columns.
struct DrawMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DrawMatrix() = default;
  DrawMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::vector<double> column(std::size_t c) const;
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

struct PosteriorSamples {
  std::vector<std::string> theta_names;
  DrawMatrix theta;
  std::vector<double> latent_times;
  DrawMatrix latent;
  std::vector<int> chain;  // chain id of each row
  std::vector<BlockAcceptance> acceptance;

  ModelKind kind = ModelKind::Model101;
  bool dynamic_variance = false;
  double V = 100.0;
  std::size_t n_beta = 0;
  ChainConfig config;

  std::size_t n_draws() const { return theta.rows; }
  std::size_t column_index(const std::string& name) const;  // throws StructuralError
  std::vector<double> column(const std::string& name) const { return theta.column(column_index(name)); }
  ThetaState theta_at(std::size_t draw) const;
};

struct ChainState {
  ThetaState theta;
  std::vector<double> c;  // latent concentrations
  std::vector<double> v;  // variance scale per site
};

// A single chain. Exposed so the update kernels can be exercised directly.
class Chain {
 public:
  Chain(const StateSpaceModel& model, const ChainConfig& cfg);

  const ChainState& state() const { return state_; }
  void set_state(ChainState s);
  const StateSpaceModel& model() const { return model_; }

  void update_latent_sites(Rng& rng);
  void update_theta_blocks(Rng& rng);
  void iterate(Rng& rng) {
    if (cfg_.update_latent) update_latent_sites(rng);
    update_theta_blocks(rng);
  }

  // Robbins-Monro step on every proposal scale from the counts of the
  // current window; also refreshes the joint-block covariance.
  void adapt();
  void freeze() { adapting_ = false; }
  void reset_counts();

  std::vector<BlockAcceptance> acceptance() const;
  double latent_proposal_sd(std::size_t k) const { return site_sd_[k]; }
  void set_latent_proposal_sd(double sd);

  // log target used by the latent kernel: log joint + sum of log C over
  // non-anchor sites (the kernel works on log C).
  double log_target_log_scale() const;

 private:
  struct Counter {
    std::size_t proposed = 0, accepted = 0, support = 0;
    std::size_t w_proposed = 0, w_accepted = 0;
    void record(bool acc, bool support_reject) {
      ++proposed;
      ++w_proposed;
      if (acc) {
        ++accepted;
        ++w_accepted;
      }
      if (support_reject) ++support;
    }
  };
  struct MechParam {
    std::string name;
    double MechParams::*field;
    UniformBounds bounds;
    double sd = 0.1;
    Counter count;
  };

  double log_posterior(const ThetaState& th, std::span<const double> c,
                       std::span<const double> v) const;
  double mech_log_jacobian(const ThetaState& th) const;
  void update_mech_single(Rng& rng);
  void update_mech_joint(Rng& rng);
  void update_variance_path(Rng& rng);
  void update_noise_joint(Rng& rng);
  void record_history();
  void update_m_w(Rng& rng);
  void update_sigma2_w(Rng& rng);
  void update_obs(Rng& rng);
  void update_sigma2_v_mh(Rng& rng);
  bool is_fixed(const std::string& name) const { return cfg_.fixed.count(name) > 0; }

  const StateSpaceModel& model_;
  ChainConfig cfg_;
  ChainState state_;
  bool adapting_ = true;
  std::size_t window_ = 0;

  std::vector<double> site_sd_;
  std::vector<Counter> site_count_;
  std::vector<MechParam> mech_;

  // Random-walk block whose proposal covariance is learned from the
  // burn-in history of its (unbounded) coordinates.
  struct AdaptiveBlock {
    std::size_t d = 0;
    double scale = 1.0;
    std::vector<double> chol;  // lower-triangular, row-major d x d
    std::vector<std::vector<double>> history;
    Counter count;
    bool learned = false;

    void init(std::size_t dim, double sd);
    std::vector<double> draw(Rng& rng) const;
    void adapt(double gamma, double target);
  };

  // joint block on the transformed mechanistic vector
  AdaptiveBlock mech_block_;

  // dynamic variance
  struct VarParam {
    std::string name;
    double ProcParams::*field;
    UniformBounds bounds;
    double sd = 0.2;
    Counter count;
  };
  std::vector<VarParam> var_;

  // non-centred block on the transition-noise parameters: logit alpha_v,
  // logit beta_v, m_w, log sigma2_w (whichever are free)
  enum class NoiseCoord { AlphaV, BetaV, MW, Sigma2W };
  std::vector<NoiseCoord> noise_coords_;
  AdaptiveBlock noise_block_;
  std::vector<double> noise_point(const ThetaState& th) const;
  void set_noise_point(ThetaState& th, std::span<const double> z) const;
  double noise_param_log_jacobian(const ThetaState& th) const;

  double sigma2_v_sd_ = 0.2;
  Counter sigma2_v_count_;
};

// Starting state: mechanistic parameters at prior midpoints, variance
// parameters at prior means, latent path following the data but repaired
// into the transition support. Throws StepSizeError / StartupError.
ChainState initial_state(const StateSpaceModel& model, const ChainConfig& cfg);

// Names the first non-finite factor of the log joint, or "" if finite.
std::string describe_nonfinite(const StateSpaceModel& model, const ChainState& s);

PosteriorSamples run_chain(const StateSpaceModel& model, const ChainConfig& cfg);
// cfg.n_chains independent chains (OpenMP across chains), merged in chain order.
PosteriorSamples run_chains(const StateSpaceModel& model, const ChainConfig& cfg);

// Convenience overload mirroring the data-level call.
PosteriorSamples run_chain(const MeasurementSeries& y, const CycleSchedule& s, ModelKind kind,
                           const PriorSpec& prior, const ChainConfig& cfg,
                           bool dynamic_variance = false, double V = 100.0);

// Sample persistence: one CSV column per parameter and per latent time,
// plus a JSON sidecar with seed, configuration and acceptance rates.
std::string format_samples_csv(const PosteriorSamples& ps);
nlohmann::json samples_meta_json(const PosteriorSamples& ps);
void write_samples(const std::filesystem::path& csv, const std::filesystem::path& meta,
                   const PosteriorSamples& ps);
PosteriorSamples read_samples(const std::filesystem::path& csv, const std::filesystem::path& meta);

}  // namespace onebox
