#include "onebox/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "onebox/errors.hpp"

namespace onebox {

namespace {

double logit(double p) { return std::log(p) - std::log1p(-p); }
double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

double to_unbounded(double x, const UniformBounds& b) { return logit((x - b.lo) / (b.hi - b.lo)); }
double from_unbounded(double z, const UniformBounds& b) {
  return b.lo + (b.hi - b.lo) * sigmoid(z);
}
// log |dx/dz| of the logit transform
double logit_log_jacobian(double x, const UniformBounds& b) {
  return std::log(x - b.lo) + std::log(b.hi - x) - std::log(b.hi - b.lo);
}

bool accept(Rng& rng, double log_ratio) {
  if (std::isnan(log_ratio)) return false;
  return log_ratio >= 0.0 || std::log(uniform01(rng)) < log_ratio;
}

double rm_step(std::size_t window) { return std::min(1.0, 1.0 / std::sqrt(double(window))); }

}  // namespace

// ------------------------------------------------------------ config

void ChainConfig::validate() const {
  if (n_keep == 0 || thin == 0 || adapt_window == 0 || n_chains == 0)
    throw ConfigError("chain counts (n_keep, thin, adapt_window, chains) must be positive");
  if (!(target_accept_site > 0 && target_accept_site < 1) ||
      !(target_accept_block > 0 && target_accept_block < 1))
    throw ConfigError("target acceptance rates must lie in (0, 1)");
}

nlohmann::json chain_config_to_json(const ChainConfig& c) {
  nlohmann::json j = {{"n_keep", c.n_keep},
                      {"n_burn", c.n_burn},
                      {"thin", c.thin},
                      {"seed", c.seed},
                      {"adapt_window", c.adapt_window},
                      {"target_accept_site", c.target_accept_site},
                      {"target_accept_block", c.target_accept_block},
                      {"chains", c.n_chains},
                      {"fixed", c.fixed}};
  return j;
}

ChainConfig chain_config_from_json(const nlohmann::json& j) {
  ChainConfig c;
  try {
    c.n_keep = j.value("n_keep", c.n_keep);
    c.n_burn = j.value("n_burn", c.n_burn);
    c.thin = j.value("thin", c.thin);
    c.seed = j.value("seed", c.seed);
    c.adapt_window = j.value("adapt_window", c.adapt_window);
    c.target_accept_site = j.value("target_accept_site", c.target_accept_site);
    c.target_accept_block = j.value("target_accept_block", c.target_accept_block);
    c.n_chains = j.value("chains", c.n_chains);
    if (j.contains("fixed")) c.fixed = j.at("fixed").get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed chain configuration: ") + e.what());
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------ samples

std::vector<double> DrawMatrix::column(std::size_t c) const {
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = (*this)(r, c);
  return out;
}

std::size_t PosteriorSamples::column_index(const std::string& name) const {
  auto it = std::find(theta_names.begin(), theta_names.end(), name);
  if (it == theta_names.end()) throw StructuralError("no parameter column named '" + name + "'");
  return static_cast<std::size_t>(it - theta_names.begin());
}

ThetaState PosteriorSamples::theta_at(std::size_t draw) const {
  return theta_from_vector(theta.row(draw), kind, dynamic_variance, n_beta, V);
}

// ------------------------------------------------------------ initial state

std::string describe_nonfinite(const StateSpaceModel& model, const ChainState& s) {
  const ThetaState& th = s.theta;
  const PriorSpec& p = model.prior();
  const MechParams& m = th.proc.phi;
  const auto check = [](const char* what, double lp) -> std::string {
    return std::isfinite(lp) ? std::string() : std::string(what);
  };
  for (const auto& [name, lp] :
       std::vector<std::pair<const char*, double>>{{"prior on G", p.G.log_density(m.G)},
                                                   {"prior on Q", p.Q.log_density(m.Q)}})
    if (auto r = check(name, lp); !r.empty()) return r + " (value outside bounds)";
  if (th.kind == ModelKind::Model111) {
    const std::pair<const char*, double> terms[] = {
        {"prior on Q_L", p.Q_L.log_density(m.Q_L)},
        {"prior on Q_R", p.Q_R.log_density(m.Q_R)},
        {"prior on eps_L", p.eps_L.log_density(m.eps_L)},
        {"prior on eps_LF", p.eps_LF.log_density(m.eps_LF)},
        {"prior on eps_RF", p.eps_RF.log_density(m.eps_RF)}};
    for (const auto& [name, lp] : terms)
      if (auto r = check(name, lp); !r.empty()) return r + " (value outside bounds)";
  }
  if (!std::isfinite(p.sigma2_v.log_density(th.obs.sigma2_v))) return "prior on sigma2_v";
  if (!std::isfinite(p.sigma2_w.log_density(th.proc.sigma2_w))) return "prior on sigma2_w";
  if (th.proc.dynamic_variance) {
    if (!std::isfinite(p.alpha_v.log_density(th.proc.alpha_v))) return "prior on alpha_v";
    if (!std::isfinite(p.beta_v.log_density(th.proc.beta_v))) return "prior on beta_v";
  }
  const StepTerms st = model.step_terms(th);
  if (!st.stable) return "transition (explicit step unstable: Q'*dt/V >= 1)";
  const LatentLayout& lay = model.layout();
  for (std::size_t k = 0; k < lay.size(); ++k) {
    const std::string at = " at t=" + format_double(lay[k].time);
    if (!std::isfinite(model.obs_factor(k, s.c, th))) return "observation density" + at;
    if (!std::isfinite(model.incoming_factor(k, s.c, s.v, th, st))) {
      if (!lay[k].anchor) return "transition density" + at + " (latent value below theta_t)";
      return (lay[k].cycle == 0 ? "initial-condition density" : "bridge density") + at;
    }
  }
  return {};
}

ChainState initial_state(const StateSpaceModel& model, const ChainConfig& cfg) {
  const PriorSpec& p = model.prior();
  ChainState s;
  ThetaState& th = s.theta;
  th.kind = model.kind();
  MechParams& m = th.proc.phi;
  m.V = model.volume();
  m.G = p.G.midpoint();
  m.Q = p.Q.midpoint();
  if (th.kind == ModelKind::Model111) {
    m.Q_L = p.Q_L.midpoint();
    m.Q_R = p.Q_R.midpoint();
    m.eps_L = p.eps_L.midpoint();
    m.eps_LF = p.eps_LF.midpoint();
    m.eps_RF = p.eps_RF.midpoint();
  }
  th.proc.m_w = p.mu_m;
  th.proc.sigma2_w = p.sigma2_w.mean();
  th.obs.sigma2_v = p.sigma2_v.mean();
  th.obs.beta.assign(model.n_beta(), p.mu_beta);
  th.proc.dynamic_variance = model.dynamic_variance();
  if (th.proc.dynamic_variance) {
    th.proc.alpha_v = p.alpha_v.midpoint();
    th.proc.beta_v = p.beta_v.midpoint();
  }
  if (!cfg.fixed.empty()) {
    const auto names = theta_names(th.kind, th.proc.dynamic_variance, model.n_beta());
    auto values = theta_to_vector(th);
    for (const auto& [name, value] : cfg.fixed) {
      auto it = std::find(names.begin(), names.end(), name);
      if (it == names.end()) throw ConfigError("cannot fix unknown parameter '" + name + "'");
      values[static_cast<std::size_t>(it - names.begin())] = value;
    }
    th = theta_from_vector(values, th.kind, th.proc.dynamic_variance, model.n_beta(), m.V);
  }

  const StepTerms st = model.step_terms(th);
  if (!st.stable) {
    std::ostringstream msg;
    msg << "starting parameters give an unstable explicit step (Q'*dt/V >= 1 with dt = "
        << model.schedule().dt() << ", V = " << th.proc.phi.V << "); use a smaller dt";
    throw StepSizeError(msg.str());
  }
  s.v = model.site_variances(th);

  const LatentLayout& lay = model.layout();
  const MeasurementSeries& y = model.data();
  if (cfg.initial_latent) {
    if (cfg.initial_latent->size() != lay.size())
      throw StructuralError("initial latent path has the wrong number of sites");
    s.c = *cfg.initial_latent;
  } else {
    s.c.assign(lay.size(), 0.0);
    for (std::size_t k = 0; k < lay.size(); ++k) {
      const long r = lay[k].obs;
      if (lay[k].anchor) {
        if (r >= 0)
          s.c[k] = y.y[static_cast<std::size_t>(r)];
        else
          s.c[k] = std::exp(model.anchor_log_mean(k, s.c, st));
        continue;
      }
      const double mean = model.step_mean(k, s.c, st);
      const double fallback = mean + s.v[k] * std::exp(th.proc.m_w);
      const double obs = r >= 0 ? y.y[static_cast<std::size_t>(r)] : fallback;
      s.c[k] = obs > mean ? obs : fallback;
    }
  }
  const double lj = model.log_joint(LatentPath{s.c, s.v}, th);
  if (!std::isfinite(lj)) {
    throw StartupError("non-finite log joint at initialization: " + describe_nonfinite(model, s));
  }
  return s;
}

// ------------------------------------------------------------ chain

Chain::Chain(const StateSpaceModel& model, const ChainConfig& cfg)
    : model_(model), cfg_(cfg), state_(initial_state(model, cfg)) {
  cfg_.validate();
  site_sd_.assign(model_.layout().size(), 0.1);
  site_count_.assign(model_.layout().size(), Counter{});

  const PriorSpec& p = model_.prior();
  const auto add = [&](const char* name, double MechParams::*field, const UniformBounds& b) {
    if (!is_fixed(name)) mech_.push_back({name, field, b, 0.1, {}});
  };
  add("G", &MechParams::G, p.G);
  add("Q", &MechParams::Q, p.Q);
  if (model_.kind() == ModelKind::Model111) {
    add("Q_L", &MechParams::Q_L, p.Q_L);
    add("Q_R", &MechParams::Q_R, p.Q_R);
    add("eps_L", &MechParams::eps_L, p.eps_L);
    add("eps_LF", &MechParams::eps_LF, p.eps_LF);
    add("eps_RF", &MechParams::eps_RF, p.eps_RF);
  }
  if (model_.dynamic_variance()) {
    if (!is_fixed("alpha_v")) var_.push_back({"alpha_v", &ProcParams::alpha_v, p.alpha_v, 0.2, {}});
    if (!is_fixed("beta_v")) var_.push_back({"beta_v", &ProcParams::beta_v, p.beta_v, 0.2, {}});
  }
  mech_block_.init(mech_.size(), 0.1);
  if (model_.dynamic_variance()) {
    if (!is_fixed("alpha_v")) noise_coords_.push_back(NoiseCoord::AlphaV);
    if (!is_fixed("beta_v")) noise_coords_.push_back(NoiseCoord::BetaV);
  }
  if (!is_fixed("m_w")) noise_coords_.push_back(NoiseCoord::MW);
  if (!is_fixed("sigma2_w")) noise_coords_.push_back(NoiseCoord::Sigma2W);
  noise_block_.init(noise_coords_.size(), 0.1);
}

void Chain::AdaptiveBlock::init(std::size_t dim, double sd) {
  d = dim;
  scale = sd;
  chol.assign(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) chol[i * d + i] = 1.0;
}

std::vector<double> Chain::AdaptiveBlock::draw(Rng& rng) const {
  std::vector<double> xi(d), out(d, 0.0);
  for (auto& e : xi) e = standard_normal(rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) out[i] += chol[i * d + j] * xi[j];
    out[i] *= scale;
  }
  return out;
}

void Chain::AdaptiveBlock::adapt(double gamma, double target) {
  if (d == 0) return;
  if (count.w_proposed) {
    const double r = double(count.w_accepted) / double(count.w_proposed);
    scale = std::clamp(scale * std::exp(gamma * (r - target) * 2.0), 1e-6, 50.0);
  }
  count.w_proposed = count.w_accepted = 0;
  // empirical covariance over the second half of the history so far
  const std::size_t n = history.size();
  if (n < std::max<std::size_t>(50, 10 * d)) return;
  const std::size_t start = n / 2;
  const auto di = static_cast<Eigen::Index>(d);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(di);
  for (std::size_t r = start; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i) mean[static_cast<Eigen::Index>(i)] += history[r][i];
  mean /= double(n - start);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(di, di);
  for (std::size_t r = start; r < n; ++r) {
    Eigen::VectorXd x(di);
    for (std::size_t i = 0; i < d; ++i)
      x[static_cast<Eigen::Index>(i)] = history[r][i] - mean[static_cast<Eigen::Index>(i)];
    cov += x * x.transpose();
  }
  cov /= double(n - start - 1);
  cov += 1e-8 * Eigen::MatrixXd::Identity(di, di);
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return;
  const Eigen::MatrixXd L = llt.matrixL();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      chol[i * d + j] = L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  if (!learned) scale = 2.38 / std::sqrt(double(d));
  learned = true;
}

void Chain::set_state(ChainState s) {
  if (s.c.size() != model_.layout().size() || s.v.size() != s.c.size())
    throw StructuralError("chain state does not match the latent layout");
  state_ = std::move(s);
}

void Chain::set_latent_proposal_sd(double sd) { std::fill(site_sd_.begin(), site_sd_.end(), sd); }

double Chain::log_posterior(const ThetaState& th, std::span<const double> c,
                            std::span<const double> v) const {
  double ll = model_.log_prior(th);
  if (ll == kNegInf) return kNegInf;
  const StepTerms st = model_.step_terms(th);
  if (!st.stable) return kNegInf;
  for (std::size_t k = 0; k < c.size(); ++k) {
    ll += model_.obs_factor(k, c, th) + model_.incoming_factor(k, c, v, th, st);
    if (ll == kNegInf) return kNegInf;
  }
  return ll;
}

double Chain::log_target_log_scale() const {
  double lt = log_posterior(state_.theta, state_.c, state_.v);
  const LatentLayout& lay = model_.layout();
  for (std::size_t k = 0; k < lay.size(); ++k)
    if (!lay[k].anchor) lt += std::log(state_.c[k]);
  return lt;
}

double Chain::mech_log_jacobian(const ThetaState& th) const {
  double j = 0.0;
  for (const auto& mp : mech_) j += logit_log_jacobian(th.proc.phi.*(mp.field), mp.bounds);
  return j;
}

void Chain::update_latent_sites(Rng& rng) {
  const LatentLayout& lay = model_.layout();
  const ThetaState& th = state_.theta;
  const StepTerms st = model_.step_terms(th);
  std::vector<double>& c = state_.c;
  for (std::size_t k = 0; k < lay.size(); ++k) {
    const double old_c = c[k];
    const double cur = model_.local_log_density(k, c, state_.v, th, st);
    const double u = std::log(old_c);
    const double u_new = u + site_sd_[k] * standard_normal(rng);
    c[k] = std::exp(u_new);
    const double prop = model_.local_log_density(k, c, state_.v, th, st);
    double log_ratio = prop - cur;
    if (!lay[k].anchor) log_ratio += u_new - u;
    const bool support = prop == kNegInf;
    const bool ok = !support && accept(rng, log_ratio);
    if (!ok) c[k] = old_c;
    site_count_[k].record(ok, support);
  }
}

void Chain::update_mech_single(Rng& rng) {
  double cur = log_posterior(state_.theta, state_.c, state_.v);
  for (auto& mp : mech_) {
    ThetaState prop = state_.theta;
    double& x = prop.proc.phi.*(mp.field);
    const double x_old = x;
    const double z = to_unbounded(x_old, mp.bounds);
    x = from_unbounded(z + mp.sd * standard_normal(rng), mp.bounds);
    if (!mp.bounds.contains(x)) {  // saturated logit
      mp.count.record(false, true);
      continue;
    }
    const double lp = log_posterior(prop, state_.c, state_.v);
    const bool support = lp == kNegInf;
    const double log_ratio = lp - cur + logit_log_jacobian(x, mp.bounds) -
                             logit_log_jacobian(x_old, mp.bounds);
    const bool ok = !support && accept(rng, log_ratio);
    if (ok) {
      state_.theta = prop;
      cur = lp;
    }
    mp.count.record(ok, support);
  }
}

void Chain::update_mech_joint(Rng& rng) {
  const std::size_t d = mech_.size();
  if (d == 0) return;
  const auto innov = model_.innovations(state_.c, state_.v, state_.theta);
  if (!innov) return;  // cannot happen for an in-support state
  const std::vector<double> step = mech_block_.draw(rng);
  ThetaState prop = state_.theta;
  bool inside = true;
  for (std::size_t i = 0; i < d; ++i) {
    const MechParam& mp = mech_[i];
    double& x = prop.proc.phi.*(mp.field);
    x = from_unbounded(to_unbounded(x, mp.bounds) + step[i], mp.bounds);
    inside = inside && mp.bounds.contains(x);
  }
  if (!inside || !model_.stable(prop)) {
    mech_block_.count.record(false, true);
    return;
  }
  const std::vector<double> c_new = model_.rebuild(*innov, state_.v, prop);
  const double lp_new = log_posterior(prop, c_new, state_.v);
  const double lp_old = log_posterior(state_.theta, state_.c, state_.v);
  const bool support = lp_new == kNegInf;
  const double log_ratio =
      lp_new + mech_log_jacobian(prop) - lp_old - mech_log_jacobian(state_.theta);
  const bool ok = !support && accept(rng, log_ratio);
  if (ok) {
    state_.theta = prop;
    state_.c = c_new;
  }
  mech_block_.count.record(ok, support);
}

void Chain::update_variance_path(Rng& rng) {
  if (var_.empty()) return;
  // centred single-parameter moves
  for (auto& vp : var_) {
    ThetaState prop = state_.theta;
    double& x = prop.proc.*(vp.field);
    const double x_old = x;
    x = from_unbounded(to_unbounded(x_old, vp.bounds) + vp.sd * standard_normal(rng), vp.bounds);
    if (!vp.bounds.contains(x)) {
      vp.count.record(false, true);
      continue;
    }
    const auto v_new = model_.site_variances(prop);
    const double lp_old = log_posterior(state_.theta, state_.c, state_.v);
    const double lp_new = log_posterior(prop, state_.c, v_new);
    const bool support = lp_new == kNegInf;
    const double log_ratio = lp_new - lp_old + logit_log_jacobian(x, vp.bounds) -
                             logit_log_jacobian(x_old, vp.bounds);
    const bool ok = !support && accept(rng, log_ratio);
    if (ok) {
      state_.theta = prop;
      state_.v = v_new;
    }
    vp.count.record(ok, support);
  }
}

std::vector<double> Chain::noise_point(const ThetaState& th) const {
  const PriorSpec& p = model_.prior();
  std::vector<double> z;
  for (NoiseCoord c : noise_coords_) switch (c) {
      case NoiseCoord::AlphaV: z.push_back(to_unbounded(th.proc.alpha_v, p.alpha_v)); break;
      case NoiseCoord::BetaV: z.push_back(to_unbounded(th.proc.beta_v, p.beta_v)); break;
      case NoiseCoord::MW: z.push_back(th.proc.m_w); break;
      case NoiseCoord::Sigma2W: z.push_back(std::log(th.proc.sigma2_w)); break;
    }
  return z;
}

void Chain::set_noise_point(ThetaState& th, std::span<const double> z) const {
  const PriorSpec& p = model_.prior();
  for (std::size_t i = 0; i < noise_coords_.size(); ++i) switch (noise_coords_[i]) {
      case NoiseCoord::AlphaV: th.proc.alpha_v = from_unbounded(z[i], p.alpha_v); break;
      case NoiseCoord::BetaV: th.proc.beta_v = from_unbounded(z[i], p.beta_v); break;
      case NoiseCoord::MW: th.proc.m_w = z[i]; break;
      case NoiseCoord::Sigma2W: th.proc.sigma2_w = std::exp(z[i]); break;
    }
}

// log |d theta / d z| for the free noise coordinates.
double Chain::noise_param_log_jacobian(const ThetaState& th) const {
  const PriorSpec& p = model_.prior();
  double j = 0.0;
  for (NoiseCoord c : noise_coords_) switch (c) {
      case NoiseCoord::AlphaV: j += logit_log_jacobian(th.proc.alpha_v, p.alpha_v); break;
      case NoiseCoord::BetaV: j += logit_log_jacobian(th.proc.beta_v, p.beta_v); break;
      case NoiseCoord::MW: break;
      case NoiseCoord::Sigma2W: j += std::log(th.proc.sigma2_w); break;
    }
  return j;
}

void Chain::update_noise_joint(Rng& rng) {
  if (noise_coords_.empty()) return;
  const auto innov = model_.innovations(state_.c, state_.v, state_.theta);
  if (!innov) return;
  const LatentLayout& lay = model_.layout();
  const ProcParams& cur = state_.theta.proc;

  std::vector<double> z = noise_point(state_.theta);
  const std::vector<double> step = noise_block_.draw(rng);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += step[i];
  ThetaState prop = state_.theta;
  set_noise_point(prop, z);
  const PriorSpec& p = model_.prior();
  if ((model_.dynamic_variance() && (!p.alpha_v.contains(prop.proc.alpha_v) ||
                                     !p.beta_v.contains(prop.proc.beta_v))) ||
      !(prop.proc.sigma2_w > 0.0) || !std::isfinite(prop.proc.sigma2_w)) {
    noise_block_.count.record(false, true);
    return;
  }

  // standardized innovations held fixed; the path map from them to C has
  // log-Jacobian sum(log v + log omega) over transitions plus (n/2) log sigma2_w
  const std::vector<double> v_new = model_.site_variances(prop);
  const double ratio = std::sqrt(prop.proc.sigma2_w / cur.sigma2_w);
  std::vector<double> e = *innov;
  double jac_old = noise_param_log_jacobian(state_.theta), jac_new = noise_param_log_jacobian(prop);
  for (std::size_t k = 0; k < lay.size(); ++k) {
    if (lay[k].anchor) {
      e[k] *= ratio;
    } else {
      jac_old += std::log(state_.v[k]) + std::log(e[k]);
      e[k] = std::exp(prop.proc.m_w + ratio * (std::log(e[k]) - cur.m_w));
      jac_new += std::log(v_new[k]) + std::log(e[k]);
    }
  }
  const double half_n = 0.5 * double(lay.size());
  jac_old += half_n * std::log(cur.sigma2_w);
  jac_new += half_n * std::log(prop.proc.sigma2_w);
  const std::vector<double> c_new = model_.rebuild(e, v_new, prop);
  const double lp_new = log_posterior(prop, c_new, v_new);
  const double lp_old = log_posterior(state_.theta, state_.c, state_.v);
  const bool support = lp_new == kNegInf;
  const bool ok = !support && accept(rng, lp_new + jac_new - lp_old - jac_old);
  if (ok) {
    state_.theta = prop;
    state_.c = c_new;
    state_.v = v_new;
  }
  noise_block_.count.record(ok, support);
}

void Chain::record_history() {
  if (!adapting_) return;
  if (!mech_.empty()) {
    std::vector<double> z(mech_.size());
    for (std::size_t i = 0; i < mech_.size(); ++i)
      z[i] = to_unbounded(state_.theta.proc.phi.*(mech_[i].field), mech_[i].bounds);
    mech_block_.history.push_back(std::move(z));
  }
  if (!noise_coords_.empty()) noise_block_.history.push_back(noise_point(state_.theta));
}

void Chain::update_m_w(Rng& rng) {
  if (is_fixed("m_w")) return;
  const LatentLayout& lay = model_.layout();
  const StepTerms st = model_.step_terms(state_.theta);
  const PriorSpec& p = model_.prior();
  const double s2 = state_.theta.proc.sigma2_w;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < lay.size(); ++k) {
    if (lay[k].anchor) continue;
    sum += std::log((state_.c[k] - model_.step_mean(k, state_.c, st)) / state_.v[k]);
    ++n;
  }
  const double prec = 1.0 / p.kappa_m + double(n) / s2;
  const double mean = (p.mu_m / p.kappa_m + sum / s2) / prec;
  state_.theta.proc.m_w = mean + standard_normal(rng) / std::sqrt(prec);
}

void Chain::update_sigma2_w(Rng& rng) {
  if (is_fixed("sigma2_w")) return;
  const LatentLayout& lay = model_.layout();
  const StepTerms st = model_.step_terms(state_.theta);
  const double m = state_.theta.proc.m_w;
  double ss = 0.0;
  for (std::size_t k = 0; k < lay.size(); ++k) {
    double r;
    if (lay[k].anchor)
      r = std::log(state_.c[k]) - model_.anchor_log_mean(k, state_.c, st);
    else
      r = std::log((state_.c[k] - model_.step_mean(k, state_.c, st)) / state_.v[k]) - m;
    ss += r * r;
  }
  const InverseGammaPrior& g = model_.prior().sigma2_w;
  state_.theta.proc.sigma2_w =
      inverse_gamma(rng, g.shape + 0.5 * double(lay.size()), g.scale + 0.5 * ss);
}

void Chain::update_obs(Rng& rng) {
  const MeasurementSeries& y = model_.data();
  const LatentLayout& lay = model_.layout();
  const PriorSpec& p = model_.prior();
  const std::size_t n = y.size();
  const std::size_t d = model_.n_beta();
  const bool fix_s2 = is_fixed("sigma2_v");
  bool fix_beta = d == 0;
  for (std::size_t j = 0; j < d; ++j) fix_beta = fix_beta || is_fixed("beta_" + std::to_string(j + 1));

  Eigen::VectorXd z(static_cast<Eigen::Index>(n));
  for (std::size_t r = 0; r < n; ++r)
    z[static_cast<Eigen::Index>(r)] = std::log(y.y[r]) - std::log(state_.c[lay.site_of_observation(r)]);

  ObsParams& obs = state_.theta.obs;
  if (fix_beta) {
    if (fix_s2) return;
    double ss = 0.0, sb = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      double e = z[static_cast<Eigen::Index>(r)];
      for (std::size_t j = 0; j < d; ++j) e -= y.x[r][j] * obs.beta[j];
      ss += e * e;
    }
    for (double b : obs.beta) sb += (b - p.mu_beta) * (b - p.mu_beta);
    obs.sigma2_v = inverse_gamma(rng, p.sigma2_v.shape + 0.5 * double(n + d),
                                 p.sigma2_v.scale + 0.5 * ss + 0.5 * sb / p.beta_scale);
    return;
  }
  // normal-inverse-gamma conjugacy for (beta, sigma2_v)
  const auto di = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), di);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = y.x[r][j];
  const Eigen::VectorXd mu0 = Eigen::VectorXd::Constant(di, p.mu_beta);
  const Eigen::MatrixXd Lambda =
      X.transpose() * X + Eigen::MatrixXd::Identity(di, di) / p.beta_scale;
  const Eigen::LLT<Eigen::MatrixXd> llt(Lambda);
  const Eigen::VectorXd mean = llt.solve(X.transpose() * z + mu0 / p.beta_scale);
  if (!fix_s2) {
    const double bn = p.sigma2_v.scale +
                      0.5 * (z.squaredNorm() + mu0.squaredNorm() / p.beta_scale -
                             mean.dot(Lambda * mean));
    obs.sigma2_v = inverse_gamma(rng, p.sigma2_v.shape + 0.5 * double(n), std::max(bn, 1e-300));
  }
  Eigen::VectorXd xi(di);
  for (Eigen::Index j = 0; j < di; ++j) xi[j] = standard_normal(rng);
  const Eigen::VectorXd draw =
      mean + std::sqrt(obs.sigma2_v) * llt.matrixU().solve(xi);
  for (std::size_t j = 0; j < d; ++j) obs.beta[j] = draw[static_cast<Eigen::Index>(j)];
}

void Chain::update_sigma2_v_mh(Rng& rng) {
  if (is_fixed("sigma2_v")) return;
  const LatentLayout& lay = model_.layout();
  const auto target = [&](const ThetaState& th) {
    double lp = model_.prior().sigma2_v.log_density(th.obs.sigma2_v) + std::log(th.obs.sigma2_v);
    for (double b : th.obs.beta)
      lp += normal_log_density(b, model_.prior().mu_beta, model_.prior().beta_scale * th.obs.sigma2_v);
    for (std::size_t k = 0; k < lay.size(); ++k) lp += model_.obs_factor(k, state_.c, th);
    return lp;
  };
  ThetaState prop = state_.theta;
  prop.obs.sigma2_v *= std::exp(sigma2_v_sd_ * standard_normal(rng));
  const bool ok = accept(rng, target(prop) - target(state_.theta));
  if (ok) state_.theta = prop;
  sigma2_v_count_.record(ok, false);
}

void Chain::update_theta_blocks(Rng& rng) {
  if (cfg_.single_mech_updates) update_mech_single(rng);
  if (cfg_.joint_mech_block) update_mech_joint(rng);
  update_variance_path(rng);
  update_m_w(rng);
  update_sigma2_w(rng);
  update_noise_joint(rng);
  if (cfg_.conjugate_obs)
    update_obs(rng);
  else
    update_sigma2_v_mh(rng);
  record_history();
}

void Chain::adapt() {
  if (!adapting_) return;
  ++window_;
  const double gamma = rm_step(window_);
  const auto rate = [](const Counter& c) {
    return c.w_proposed ? double(c.w_accepted) / double(c.w_proposed) : -1.0;
  };
  const auto tune = [&](double& sd, Counter& c, double target) {
    const double r = rate(c);
    if (r >= 0.0) sd *= std::exp(gamma * (r - target) * 2.0);
    sd = std::clamp(sd, 1e-6, 50.0);
    c.w_proposed = c.w_accepted = 0;
  };
  for (std::size_t k = 0; k < site_sd_.size(); ++k)
    tune(site_sd_[k], site_count_[k], cfg_.target_accept_site);
  for (auto& mp : mech_) tune(mp.sd, mp.count, cfg_.target_accept_site);
  for (auto& vp : var_) tune(vp.sd, vp.count, cfg_.target_accept_site);
  tune(sigma2_v_sd_, sigma2_v_count_, cfg_.target_accept_site);
  mech_block_.adapt(gamma, cfg_.target_accept_block);
  noise_block_.adapt(gamma, cfg_.target_accept_block);
}

void Chain::reset_counts() {
  for (auto& c : site_count_) c = {};
  for (auto& mp : mech_) mp.count = {};
  for (auto& vp : var_) vp.count = {};
  mech_block_.count = {};
  noise_block_.count = {};
  sigma2_v_count_ = {};
}

std::vector<BlockAcceptance> Chain::acceptance() const {
  std::vector<BlockAcceptance> out;
  const auto add = [&](const std::string& name, const Counter& c) {
    if (c.proposed) out.push_back({name, c.proposed, c.accepted, c.support});
  };
  Counter latent;
  for (const auto& c : site_count_) {
    latent.proposed += c.proposed;
    latent.accepted += c.accepted;
    latent.support += c.support;
  }
  add("latent", latent);
  for (const auto& mp : mech_) add(mp.name, mp.count);
  add("mechanistic_joint", mech_block_.count);
  for (const auto& vp : var_) add(vp.name, vp.count);
  add("noise_joint", noise_block_.count);
  add("sigma2_v", sigma2_v_count_);
  return out;
}

// ------------------------------------------------------------ driver

namespace {

PosteriorSamples empty_samples(const StateSpaceModel& model, const ChainConfig& cfg) {
  PosteriorSamples ps;
  ps.kind = model.kind();
  ps.dynamic_variance = model.dynamic_variance();
  ps.V = model.volume();
  ps.n_beta = model.n_beta();
  ps.config = cfg;
  ps.theta_names = theta_names(ps.kind, ps.dynamic_variance, ps.n_beta);
  ps.latent_times = model.layout().times();
  return ps;
}

PosteriorSamples run_one(const StateSpaceModel& model, const ChainConfig& cfg, int chain_id) {
  PosteriorSamples ps = empty_samples(model, cfg);
  Chain chain(model, cfg);
  Rng rng = make_stream(cfg.seed, streams::kChainBase + static_cast<std::uint64_t>(chain_id));
  for (std::size_t it = 0; it < cfg.n_burn; ++it) {
    chain.iterate(rng);
    if ((it + 1) % cfg.adapt_window == 0) chain.adapt();
  }
  chain.freeze();
  chain.reset_counts();
  ps.theta = DrawMatrix(cfg.n_keep, ps.theta_names.size());
  ps.latent = DrawMatrix(cfg.n_keep, ps.latent_times.size());
  ps.chain.assign(cfg.n_keep, chain_id);
  for (std::size_t r = 0; r < cfg.n_keep; ++r) {
    for (std::size_t t = 0; t < cfg.thin; ++t) chain.iterate(rng);
    const auto th = theta_to_vector(chain.state().theta);
    std::copy(th.begin(), th.end(), ps.theta.data.begin() + static_cast<long>(r * ps.theta.cols));
    const auto& c = chain.state().c;
    std::copy(c.begin(), c.end(), ps.latent.data.begin() + static_cast<long>(r * ps.latent.cols));
  }
  ps.acceptance = chain.acceptance();
  return ps;
}

}  // namespace

PosteriorSamples run_chain(const StateSpaceModel& model, const ChainConfig& cfg) {
  cfg.validate();
  return run_one(model, cfg, 0);
}

PosteriorSamples run_chains(const StateSpaceModel& model, const ChainConfig& cfg) {
  cfg.validate();
  const int k = static_cast<int>(cfg.n_chains);
  std::vector<PosteriorSamples> parts(static_cast<std::size_t>(k));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));
#pragma omp parallel for schedule(dynamic, 1)
  for (int i = 0; i < k; ++i) {
    try {
      parts[static_cast<std::size_t>(i)] = run_one(model, cfg, i);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  PosteriorSamples ps = empty_samples(model, cfg);
  const std::size_t rows = cfg.n_keep * cfg.n_chains;
  ps.theta = DrawMatrix(rows, ps.theta_names.size());
  ps.latent = DrawMatrix(rows, ps.latent_times.size());
  ps.theta.data.clear();
  ps.latent.data.clear();
  for (auto& part : parts) {
    ps.theta.data.insert(ps.theta.data.end(), part.theta.data.begin(), part.theta.data.end());
    ps.latent.data.insert(ps.latent.data.end(), part.latent.data.begin(), part.latent.data.end());
    ps.chain.insert(ps.chain.end(), part.chain.begin(), part.chain.end());
    for (const auto& a : part.acceptance) {
      auto it = std::find_if(ps.acceptance.begin(), ps.acceptance.end(),
                             [&](const BlockAcceptance& b) { return b.block == a.block; });
      if (it == ps.acceptance.end()) {
        ps.acceptance.push_back(a);
      } else {
        it->proposed += a.proposed;
        it->accepted += a.accepted;
        it->support_rejected += a.support_rejected;
      }
    }
  }
  return ps;
}

PosteriorSamples run_chain(const MeasurementSeries& y, const CycleSchedule& s, ModelKind kind,
                           const PriorSpec& prior, const ChainConfig& cfg, bool dynamic_variance,
                           double V) {
  const StateSpaceModel model(s, y, kind, prior, dynamic_variance, V);
  return run_chains(model, cfg);
}

// ------------------------------------------------------------ persistence

std::string format_samples_csv(const PosteriorSamples& ps) {
  std::ostringstream out;
  out << "chain";
  for (const auto& n : ps.theta_names) out << ',' << n;
  for (double t : ps.latent_times) out << ",C_" << format_double(t);
  out << '\n';
  for (std::size_t r = 0; r < ps.n_draws(); ++r) {
    out << ps.chain[r];
    for (std::size_t c = 0; c < ps.theta.cols; ++c) out << ',' << format_double(ps.theta(r, c));
    for (std::size_t c = 0; c < ps.latent.cols; ++c) out << ',' << format_double(ps.latent(r, c));
    out << '\n';
  }
  return out.str();
}

nlohmann::json samples_meta_json(const PosteriorSamples& ps) {
  nlohmann::json acc = nlohmann::json::array();
  for (const auto& a : ps.acceptance)
    acc.push_back({{"block", a.block},
                   {"proposed", a.proposed},
                   {"accepted", a.accepted},
                   {"support_rejected", a.support_rejected},
                   {"rate", a.rate()}});
  return {{"seed", ps.config.seed},
          {"config", chain_config_to_json(ps.config)},
          {"model", std::string(to_string(ps.kind))},
          {"dynamic_variance", ps.dynamic_variance},
          {"V", ps.V},
          {"n_beta", ps.n_beta},
          {"n_draws", ps.n_draws()},
          {"theta_names", ps.theta_names},
          {"latent_times", ps.latent_times},
          {"acceptance", acc}};
}

void write_samples(const std::filesystem::path& csv, const std::filesystem::path& meta,
                   const PosteriorSamples& ps) {
  std::ofstream out(csv, std::ios::binary);
  if (!out) throw DataError("cannot write " + csv.string());
  out << format_samples_csv(ps);
  std::ofstream m(meta, std::ios::binary);
  if (!m) throw DataError("cannot write " + meta.string());
  m << samples_meta_json(ps).dump(2) << '\n';
}

PosteriorSamples read_samples(const std::filesystem::path& csv, const std::filesystem::path& meta) {
  std::ifstream min(meta);
  if (!min) throw DataError("cannot open sample metadata " + meta.string());
  nlohmann::json j;
  try {
    min >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse sample metadata: " + std::string(e.what()));
  }
  PosteriorSamples ps;
  try {
    ps.kind = parse_model_kind(j.at("model").get<std::string>());
    ps.dynamic_variance = j.at("dynamic_variance").get<bool>();
    ps.V = j.at("V").get<double>();
    ps.n_beta = j.at("n_beta").get<std::size_t>();
    ps.theta_names = j.at("theta_names").get<std::vector<std::string>>();
    ps.latent_times = j.at("latent_times").get<std::vector<double>>();
    ps.config = chain_config_from_json(j.at("config"));
    for (const auto& a : j.at("acceptance"))
      ps.acceptance.push_back({a.at("block").get<std::string>(), a.at("proposed").get<std::size_t>(),
                               a.at("accepted").get<std::size_t>(),
                               a.at("support_rejected").get<std::size_t>()});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed sample metadata: " + std::string(e.what()));
  }

  std::ifstream in(csv);
  if (!in) throw DataError("cannot open samples " + csv.string());
  std::string line;
  std::getline(in, line);
  const std::size_t p = ps.theta_names.size(), q = ps.latent_times.size();
  std::size_t ncol = std::count(line.begin(), line.end(), ',') + 1;
  if (ncol != 1 + p + q) throw DataError("sample CSV header does not match its metadata");
  ps.theta.cols = p;
  ps.latent.cols = q;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f;
    std::size_t col = 0;
    while (std::getline(ss, f, ',')) {
      const double v = std::strtod(f.c_str(), nullptr);
      if (col == 0)
        ps.chain.push_back(static_cast<int>(v));
      else if (col <= p)
        ps.theta.data.push_back(v);
      else
        ps.latent.data.push_back(v);
      ++col;
    }
    if (col != ncol) throw DataError("sample CSV row has the wrong number of fields");
  }
  ps.theta.rows = ps.latent.rows = ps.chain.size();
  return ps;
}

}  // namespace onebox
