#include "onebox/state_space.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "onebox/errors.hpp"

namespace onebox {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v))
    throw DomainError(std::string(what) + " must be positive and finite");
}

}  // namespace

// ------------------------------------------------------------ scalar densities

double normal_log_density(double x, double mean, double var) {
  const double r = x - mean;
  return -0.5 * (kLog2Pi + std::log(var)) - 0.5 * r * r / var;
}

double lognormal_log_density(double x, double m, double s2) {
  if (!(x > 0.0)) return kNegInf;
  const double lx = std::log(x);
  return normal_log_density(lx, m, s2) - lx;
}

double UniformBounds::log_density(double x) const {
  return contains(x) ? -std::log(hi - lo) : kNegInf;
}

double InverseGammaPrior::log_density(double x) const {
  if (!(x > 0.0)) return kNegInf;
  return shape * std::log(scale) - std::lgamma(shape) - (shape + 1.0) * std::log(x) - scale / x;
}

double log_obs_density(double y, double c, std::span<const double> x, const ObsParams& th1) {
  require_positive(y, "observed concentration y");
  require_positive(c, "latent concentration c");
  if (x.size() != th1.beta.size())
    throw StructuralError("covariate vector length " + std::to_string(x.size()) +
                          " does not match beta length " + std::to_string(th1.beta.size()));
  double mean = std::log(c);
  for (std::size_t j = 0; j < x.size(); ++j) mean += x[j] * th1.beta[j];
  return normal_log_density(std::log(y), mean, th1.sigma2_v);
}

double shifted_lognormal_log_density(double c_t, double theta, double v, double m, double s2) {
  if (!(c_t > theta)) return kNegInf;
  return lognormal_log_density((c_t - theta) / v, m, s2) - std::log(v);
}

double log_trans_density(double c_t, double c_prev, double t, const ProcParams& th2,
                         ModelKind kind, const CycleSchedule& s, double v_t) {
  require_positive(c_prev, "previous concentration");
  require_positive(v_t, "variance scale v_t");
  const auto tc = transition_coefficients(th2.phi, kind, s.dt(), s.step_generating(t));
  return shifted_lognormal_log_density(c_t, tc.A * c_prev + tc.B, v_t, th2.m_w, th2.sigma2_w);
}

std::vector<double> variance_path(const ProcParams& th2, const CycleSchedule& s, double v0) {
  require_positive(v0, "v0");
  const long last = std::lround(std::floor(s.horizon() / s.dt() + 1e-9));
  std::vector<double> v(static_cast<std::size_t>(last + 1));
  v[0] = v0;
  for (long k = 1; k <= last; ++k)
    v[k] = variance_step(v[k - 1], s.step_generating(s.grid_time(k)), th2.alpha_v, th2.beta_v);
  return v;
}

double log_bridge_density(double c_start, double c_prev_end, const ProcParams& th2,
                          ModelKind kind, double gap) {
  require_positive(c_start, "cycle-start concentration");
  require_positive(c_prev_end, "previous cycle-end concentration");
  if (!(gap >= 0.0)) throw DomainError("bridge gap must be >= 0");
  const EffectiveParams eff = effective_params_unchecked(interpret(th2.phi, kind));
  const double mean = std::log(c_prev_end) - eff.Q_eff / th2.phi.V * gap;
  return normal_log_density(std::log(c_start), mean, th2.sigma2_w);
}

double log_initial_density(double c_start, double c0_guess, double sigma2_w) {
  require_positive(c_start, "initial concentration");
  require_positive(c0_guess, "initial-condition centre");
  return normal_log_density(std::log(c_start), std::log(c0_guess), sigma2_w);
}

double log_prior(const ThetaState& th, const PriorSpec& p) {
  const MechParams& m = th.proc.phi;
  double lp = p.G.log_density(m.G) + p.Q.log_density(m.Q);
  if (th.kind == ModelKind::Model111) {
    lp += p.Q_L.log_density(m.Q_L) + p.Q_R.log_density(m.Q_R) + p.eps_L.log_density(m.eps_L) +
          p.eps_LF.log_density(m.eps_LF) + p.eps_RF.log_density(m.eps_RF);
  }
  if (lp == kNegInf) return kNegInf;
  lp += p.sigma2_v.log_density(th.obs.sigma2_v);
  lp += p.sigma2_w.log_density(th.proc.sigma2_w);
  lp += normal_log_density(th.proc.m_w, p.mu_m, p.kappa_m);
  for (double b : th.obs.beta)
    lp += normal_log_density(b, p.mu_beta, p.beta_scale * th.obs.sigma2_v);
  if (th.proc.dynamic_variance)
    lp += p.alpha_v.log_density(th.proc.alpha_v) + p.beta_v.log_density(th.proc.beta_v);
  return std::isnan(lp) ? kNegInf : lp;
}

// ------------------------------------------------------------ prior spec

void PriorSpec::validate() const {
  const auto check_u = [](const UniformBounds& b, const char* name) {
    if (!std::isfinite(b.lo) || !std::isfinite(b.hi) || !(b.lo < b.hi))
      throw ConfigError(std::string("prior bounds for ") + name + " must be finite with a < b");
  };
  check_u(G, "G");
  check_u(Q, "Q");
  check_u(Q_L, "Q_L");
  check_u(Q_R, "Q_R");
  check_u(eps_L, "eps_L");
  check_u(eps_LF, "eps_LF");
  check_u(eps_RF, "eps_RF");
  check_u(alpha_v, "alpha_v");
  check_u(beta_v, "beta_v");
  if (G.lo < 0 || Q.lo < 0 || Q_L.lo < 0 || Q_R.lo < 0)
    throw ConfigError("prior bounds for rates must be non-negative");
  for (const auto* b : {&eps_L, &eps_LF, &eps_RF, &beta_v})
    if (b->lo < 0 || b->hi > 1) throw ConfigError("prior bounds for fractions must lie in [0, 1]");
  if (alpha_v.lo < 0) throw ConfigError("prior bounds for alpha_v must be non-negative");
  for (const auto* g : {&sigma2_v, &sigma2_w})
    if (!(g->shape > 0) || !(g->scale > 0))
      throw ConfigError("inverse-gamma shape and scale must be positive");
  if (!(kappa_m > 0) || !(beta_scale > 0)) throw ConfigError("prior variances must be positive");
  if (c0 && !(*c0 > 0)) throw ConfigError("c0 must be positive");
}

namespace {
void read_bounds(const nlohmann::json& j, const char* key, UniformBounds& b) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2)
    throw ConfigError(std::string("prior '") + key + "' must be a two-element array [a, b]");
  b = {v[0].get<double>(), v[1].get<double>()};
}
void read_ig(const nlohmann::json& j, const char* key, InverseGammaPrior& g) {
  if (!j.contains(key)) return;
  g = {j.at(key).at("a").get<double>(), j.at(key).at("b").get<double>()};
}
}  // namespace

PriorSpec prior_from_json(const nlohmann::json& j) {
  PriorSpec p;
  try {
    read_bounds(j, "G", p.G);
    read_bounds(j, "Q", p.Q);
    read_bounds(j, "Q_L", p.Q_L);
    read_bounds(j, "Q_R", p.Q_R);
    read_bounds(j, "eps_L", p.eps_L);
    read_bounds(j, "eps_LF", p.eps_LF);
    read_bounds(j, "eps_RF", p.eps_RF);
    read_bounds(j, "alpha_v", p.alpha_v);
    read_bounds(j, "beta_v", p.beta_v);
    read_ig(j, "sigma2_v", p.sigma2_v);
    read_ig(j, "sigma2_w", p.sigma2_w);
    if (j.contains("m_w")) {
      p.mu_m = j.at("m_w").value("mu", p.mu_m);
      p.kappa_m = j.at("m_w").value("kappa", p.kappa_m);
    }
    if (j.contains("beta")) {
      p.mu_beta = j.at("beta").value("mu", p.mu_beta);
      p.beta_scale = j.at("beta").value("scale", p.beta_scale);
    }
    if (j.contains("c0") && !j.at("c0").is_null()) p.c0 = j.at("c0").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed prior JSON: ") + e.what());
  }
  p.validate();
  return p;
}

nlohmann::json prior_to_json(const PriorSpec& p) {
  const auto b = [](const UniformBounds& u) { return nlohmann::json::array({u.lo, u.hi}); };
  nlohmann::json j = {{"G", b(p.G)},
                      {"Q", b(p.Q)},
                      {"Q_L", b(p.Q_L)},
                      {"Q_R", b(p.Q_R)},
                      {"eps_L", b(p.eps_L)},
                      {"eps_LF", b(p.eps_LF)},
                      {"eps_RF", b(p.eps_RF)},
                      {"sigma2_v", {{"a", p.sigma2_v.shape}, {"b", p.sigma2_v.scale}}},
                      {"sigma2_w", {{"a", p.sigma2_w.shape}, {"b", p.sigma2_w.scale}}},
                      {"m_w", {{"mu", p.mu_m}, {"kappa", p.kappa_m}}},
                      {"beta", {{"mu", p.mu_beta}, {"scale", p.beta_scale}}},
                      {"alpha_v", b(p.alpha_v)},
                      {"beta_v", b(p.beta_v)}};
  j["c0"] = p.c0 ? nlohmann::json(*p.c0) : nlohmann::json(nullptr);
  return j;
}

PriorSpec load_prior(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open prior file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse prior file " + path.string() + ": " + e.what());
  }
  return prior_from_json(j);
}

// ------------------------------------------------------------ parameter vector

std::vector<std::string> theta_names(ModelKind kind, bool dynamic_variance, std::size_t n_beta) {
  std::vector<std::string> n = {"G", "Q"};
  if (kind == ModelKind::Model111)
    n.insert(n.end(), {"Q_L", "Q_R", "eps_L", "eps_LF", "eps_RF"});
  n.insert(n.end(), {"m_w", "sigma2_w", "sigma2_v"});
  for (std::size_t j = 0; j < n_beta; ++j) n.push_back("beta_" + std::to_string(j + 1));
  if (dynamic_variance) n.insert(n.end(), {"alpha_v", "beta_v"});
  return n;
}

std::vector<double> theta_to_vector(const ThetaState& th) {
  const MechParams& m = th.proc.phi;
  std::vector<double> v = {m.G, m.Q};
  if (th.kind == ModelKind::Model111) v.insert(v.end(), {m.Q_L, m.Q_R, m.eps_L, m.eps_LF, m.eps_RF});
  v.insert(v.end(), {th.proc.m_w, th.proc.sigma2_w, th.obs.sigma2_v});
  v.insert(v.end(), th.obs.beta.begin(), th.obs.beta.end());
  if (th.proc.dynamic_variance) v.insert(v.end(), {th.proc.alpha_v, th.proc.beta_v});
  return v;
}

ThetaState theta_from_vector(std::span<const double> x, ModelKind kind, bool dynamic_variance,
                             std::size_t n_beta, double V) {
  const std::size_t expected = theta_names(kind, dynamic_variance, n_beta).size();
  if (x.size() != expected)
    throw StructuralError("parameter vector has " + std::to_string(x.size()) + " entries, expected " +
                          std::to_string(expected));
  ThetaState th;
  th.kind = kind;
  std::size_t i = 0;
  MechParams& m = th.proc.phi;
  m.V = V;
  m.G = x[i++];
  m.Q = x[i++];
  if (kind == ModelKind::Model111) {
    m.Q_L = x[i++];
    m.Q_R = x[i++];
    m.eps_L = x[i++];
    m.eps_LF = x[i++];
    m.eps_RF = x[i++];
  }
  th.proc.m_w = x[i++];
  th.proc.sigma2_w = x[i++];
  th.obs.sigma2_v = x[i++];
  th.obs.beta.assign(x.begin() + static_cast<long>(i), x.begin() + static_cast<long>(i + n_beta));
  i += n_beta;
  th.proc.dynamic_variance = dynamic_variance;
  if (dynamic_variance) {
    th.proc.alpha_v = x[i++];
    th.proc.beta_v = x[i++];
  }
  return th;
}

// ------------------------------------------------------------ layout

LatentLayout::LatentLayout(const CycleSchedule& s, const MeasurementSeries& y) {
  for (std::size_t i = 0; i < s.n_cycles(); ++i) {
    const Cycle& c = s.cycles()[i];
    const long g0 = s.grid_index(c.start);
    const long g1 = s.grid_index(c.measure.back());
    anchors_.push_back(sites_.size());
    for (long g = g0; g <= g1; ++g) {
      LatentSite site;
      site.grid = g;
      site.time = s.grid_time(g);
      site.cycle = static_cast<int>(i);
      site.anchor = g == g0;
      site.last_in_cycle = g == g1;
      site.gen_step = s.step_generating(site.time);
      sites_.push_back(site);
    }
  }
  obs_site_.resize(y.size());
  for (std::size_t r = 0; r < y.size(); ++r) {
    const int ci = y.cycle[r] - 1;
    if (ci < 0 || static_cast<std::size_t>(ci) >= anchors_.size())
      throw StructuralError("measurement row " + std::to_string(r + 1) + " has cycle label " +
                            std::to_string(y.cycle[r]) + " outside the schedule");
    const long g = s.grid_index(y.times[r]);
    const std::size_t a = anchors_[static_cast<std::size_t>(ci)];
    const long offset = g - sites_[a].grid;
    const std::size_t k = a + static_cast<std::size_t>(offset);
    if (offset < 0 || k >= sites_.size() || sites_[k].cycle != ci)
      throw StructuralError("measurement row " + std::to_string(r + 1) + " at time " +
                            format_double(y.times[r]) + " lies outside cycle " +
                            std::to_string(y.cycle[r]));
    if (sites_[k].obs >= 0)
      throw StructuralError("two measurements share latent time " + format_double(y.times[r]));
    sites_[k].obs = static_cast<long>(r);
    obs_site_[r] = k;
  }
}

std::vector<double> LatentLayout::times() const {
  std::vector<double> t;
  t.reserve(sites_.size());
  for (const auto& s : sites_) t.push_back(s.time);
  return t;
}

std::optional<std::size_t> LatentLayout::find(double t, double dt) const {
  const double kk = t / dt;
  if (std::abs(kk - std::round(kk)) > 1e-9 * std::max(1.0, std::abs(kk))) return std::nullopt;
  const long g = std::lround(kk);
  auto it = std::lower_bound(sites_.begin(), sites_.end(), g,
                             [](const LatentSite& s, long gg) { return s.grid < gg; });
  if (it == sites_.end() || it->grid != g) return std::nullopt;
  return static_cast<std::size_t>(it - sites_.begin());
}

// ------------------------------------------------------------ model

StateSpaceModel::StateSpaceModel(CycleSchedule schedule, MeasurementSeries y, ModelKind kind,
                                 PriorSpec prior, bool dynamic_variance, double volume)
    : schedule_(std::move(schedule)),
      y_(std::move(y)),
      kind_(kind),
      prior_(std::move(prior)),
      dynamic_(dynamic_variance),
      layout_(schedule_, y_),
      volume_(volume) {
  prior_.validate();
  if (!(volume > 0.0)) throw DomainError("chamber volume V must be positive");
  if (y_.size() == 0) throw StructuralError("no measurements");
  if (!y_.x.empty() && y_.x.size() != y_.size())
    throw StructuralError("covariate rows do not match measurement rows");
  c0_guess_ = prior_.c0.value_or(y_.y.front());
}

std::vector<double> StateSpaceModel::site_variances(const ThetaState& theta) const {
  std::vector<double> v(layout_.size(), 1.0);
  if (!dynamic_) return v;
  const auto path = variance_path(theta.proc, schedule_, 1.0);
  for (std::size_t k = 0; k < layout_.size(); ++k) v[k] = path[static_cast<std::size_t>(layout_[k].grid)];
  return v;
}

LatentPath StateSpaceModel::make_path(std::vector<double> c, const ThetaState& theta) const {
  if (c.size() != layout_.size())
    throw StructuralError("latent path has " + std::to_string(c.size()) + " sites, layout has " +
                          std::to_string(layout_.size()));
  return {std::move(c), site_variances(theta)};
}

StepTerms StateSpaceModel::step_terms(const ThetaState& theta) const {
  const EffectiveParams eff = effective_params_unchecked(theta.proc.phi);
  const double V = theta.proc.phi.V;
  const double dt = schedule_.dt();
  StepTerms st;
  st.A = 1.0 - eff.Q_eff * dt / V;
  st.B_gen = eff.G_eff * dt / V;
  st.decay_rate = eff.Q_eff / V;
  st.stable = euler_stable(eff, V, dt);
  return st;
}

bool StateSpaceModel::stable(const ThetaState& theta) const { return step_terms(theta).stable; }

double StateSpaceModel::obs_factor(std::size_t k, std::span<const double> c,
                                   const ThetaState& theta) const {
  const long r = layout_[k].obs;
  if (r < 0) return 0.0;
  const auto row = static_cast<std::size_t>(r);
  double mean = std::log(c[k]);
  if (!y_.x.empty())
    for (std::size_t j = 0; j < theta.obs.beta.size(); ++j) mean += y_.x[row][j] * theta.obs.beta[j];
  return normal_log_density(std::log(y_.y[row]), mean, theta.obs.sigma2_v);
}

double StateSpaceModel::anchor_log_mean(std::size_t k, std::span<const double> c,
                                        const StepTerms& st) const {
  const LatentSite& s = layout_[k];
  if (s.cycle == 0) return std::log(c0_guess_);
  const double gap = s.time - layout_[k - 1].time;
  return std::log(c[k - 1]) - st.decay_rate * gap;
}

double StateSpaceModel::step_mean(std::size_t k, std::span<const double> c,
                                  const StepTerms& st) const {
  return st.A * c[k - 1] + (layout_[k].gen_step ? st.B_gen : 0.0);
}

double StateSpaceModel::incoming_factor(std::size_t k, std::span<const double> c,
                                        std::span<const double> v, const ThetaState& theta,
                                        const StepTerms& st) const {
  if (!(c[k] > 0.0)) return kNegInf;
  if (layout_[k].anchor)
    return normal_log_density(std::log(c[k]), anchor_log_mean(k, c, st), theta.proc.sigma2_w);
  if (!st.stable) return kNegInf;
  return shifted_lognormal_log_density(c[k], step_mean(k, c, st), v[k], theta.proc.m_w,
                                       theta.proc.sigma2_w);
}

double StateSpaceModel::local_log_density(std::size_t k, std::span<const double> c,
                                          std::span<const double> v, const ThetaState& theta,
                                          const StepTerms& st) const {
  double lp = obs_factor(k, c, theta) + incoming_factor(k, c, v, theta, st);
  if (lp == kNegInf) return kNegInf;
  if (k + 1 < layout_.size()) lp += incoming_factor(k + 1, c, v, theta, st);
  return lp;
}

double StateSpaceModel::log_likelihood(const LatentPath& path, const ThetaState& theta) const {
  if (path.c.size() != layout_.size())
    throw StructuralError("latent path has " + std::to_string(path.c.size()) +
                          " sites, layout has " + std::to_string(layout_.size()));
  if (theta.obs.beta.size() != y_.n_covariates())
    throw StructuralError("beta has " + std::to_string(theta.obs.beta.size()) +
                          " entries, data has " + std::to_string(y_.n_covariates()) +
                          " covariates");
  if (theta.kind != kind_ || theta.proc.dynamic_variance != dynamic_)
    throw StructuralError("parameter state does not match the model variant");
  const auto v = site_variances(theta);
  const StepTerms st = step_terms(theta);
  double ll = 0.0;
  for (std::size_t k = 0; k < layout_.size(); ++k) {
    ll += obs_factor(k, path.c, theta) + incoming_factor(k, path.c, v, theta, st);
    if (ll == kNegInf) return kNegInf;
  }
  return ll;
}

double StateSpaceModel::log_joint(const LatentPath& path, const ThetaState& theta) const {
  const double lp = log_prior(theta);
  if (lp == kNegInf) return kNegInf;
  const double ll = log_likelihood(path, theta);
  return ll == kNegInf ? kNegInf : lp + ll;
}

std::optional<std::vector<double>> StateSpaceModel::innovations(std::span<const double> c,
                                                                std::span<const double> v,
                                                                const ThetaState& theta) const {
  const StepTerms st = step_terms(theta);
  if (!st.stable) return std::nullopt;
  std::vector<double> e(layout_.size());
  for (std::size_t k = 0; k < layout_.size(); ++k) {
    if (layout_[k].anchor) {
      e[k] = std::log(c[k]) - anchor_log_mean(k, c, st);
    } else {
      e[k] = (c[k] - step_mean(k, c, st)) / v[k];
      if (!(e[k] > 0.0)) return std::nullopt;
    }
  }
  return e;
}

std::vector<double> StateSpaceModel::rebuild(std::span<const double> innov,
                                             std::span<const double> v,
                                             const ThetaState& theta) const {
  const StepTerms st = step_terms(theta);
  std::vector<double> c(layout_.size());
  for (std::size_t k = 0; k < layout_.size(); ++k) {
    if (layout_[k].anchor)
      c[k] = std::exp(anchor_log_mean(k, c, st) + innov[k]);
    else
      c[k] = step_mean(k, c, st) + v[k] * innov[k];
  }
  return c;
}

double log_joint(const MeasurementSeries& y, const LatentPath& path, const ThetaState& theta,
                 const CycleSchedule& s, const PriorSpec& prior) {
  const StateSpaceModel model(s, y, theta.kind, prior, theta.proc.dynamic_variance,
                              theta.proc.phi.V);
  return model.log_joint(path, theta);
}

ModelDraw simulate_state_space(const ThetaState& theta, const CycleSchedule& s, double C0,
                               std::uint64_t seed) {
  validate(theta.proc.phi);
  require_positive(C0, "C0");
  ModelDraw out;
  MeasurementSeries& ms = out.series;
  for (std::size_t i = 0; i < s.n_cycles(); ++i)
    for (double t : s.cycles()[i].measure) {
      ms.times.push_back(t);
      ms.cycle.push_back(static_cast<int>(i + 1));
      ms.generator_on.push_back(s.generating(t) ? 1 : 0);
      ms.y.push_back(1.0);
    }
  PriorSpec prior;
  prior.c0 = C0;
  const StateSpaceModel model(s, ms, theta.kind, prior, theta.proc.dynamic_variance,
                              theta.proc.phi.V);
  const LatentLayout& lay = model.layout();
  const StepTerms st = model.step_terms(theta);
  if (!st.stable)
    throw StepSizeError("explicit step unstable: Q'*dt/V >= 1; use a smaller dt");
  const auto v = model.site_variances(theta);

  Rng rng = make_stream(seed, streams::kSimulation);
  const double sw = std::sqrt(theta.proc.sigma2_w);
  std::vector<double> c(lay.size());
  for (std::size_t k = 0; k < lay.size(); ++k) {
    if (k == 0) {
      c[k] = C0;
    } else if (lay[k].anchor) {
      c[k] = std::exp(model.anchor_log_mean(k, c, st) + sw * standard_normal(rng));
    } else {
      c[k] = model.step_mean(k, c, st) +
             v[k] * std::exp(theta.proc.m_w + sw * standard_normal(rng));
    }
  }
  const double sv = std::sqrt(theta.obs.sigma2_v);
  for (std::size_t r = 0; r < ms.size(); ++r)
    ms.y[r] = c[lay.site_of_observation(r)] * std::exp(sv * standard_normal(rng));
  out.latent_times = lay.times();
  out.latent = std::move(c);
  return out;
}

}  // namespace onebox
