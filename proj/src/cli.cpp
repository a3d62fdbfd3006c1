#include "onebox/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "onebox/diagnostics.hpp"
#include "onebox/errors.hpp"
#include "onebox/model_eval.hpp"
#include "onebox/predictive.hpp"
#include "onebox/sampler.hpp"
#include "onebox/state_space.hpp"

namespace fs = std::filesystem;

namespace onebox::cli {

namespace {

std::string read_text(const fs::path& p, bool config) {
  std::ifstream in(p, std::ios::binary);
  if (!in) {
    const std::string msg = "cannot open " + p.string();
    if (config) throw ConfigError(msg);
    throw DataError(msg);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_text(p, true));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void copy_verbatim(const fs::path& from, const fs::path& to) {
  write_text(to, read_text(from, true));
}

MechParams params_from_json(const nlohmann::json& j) {
  MechParams p;
  p.G = j.value("G", p.G);
  p.Q = j.value("Q", p.Q);
  p.Q_L = j.value("Q_L", p.Q_L);
  p.Q_R = j.value("Q_R", p.Q_R);
  p.eps_L = j.value("eps_L", p.eps_L);
  p.eps_LF = j.value("eps_LF", p.eps_LF);
  p.eps_RF = j.value("eps_RF", p.eps_RF);
  p.V = j.value("V", p.V);
  return p;
}

struct FitDir {
  PosteriorSamples ps;
  CycleSchedule schedule;
  MeasurementSeries data;
};

FitDir load_fit(const fs::path& dir) {
  FitDir f;
  f.ps = read_samples(dir / "samples.csv", dir / "meta.json");
  f.schedule = load_schedule(dir / "schedule.json");
  f.data = load_measurements(dir / "data.csv", f.schedule).series;
  return f;
}

void write_predictions(const PredictOptions& o, const FitDir& f, const PredictionRequest& req,
                       const std::string& name, std::ostream& log) {
  prepare_dir(o.out);
  const PredictiveDraws d = o.observations ? predict_observations(f.ps, f.schedule, req)
                                           : smooth_latent(f.ps, f.schedule, req);
  write_text(o.out / (name + ".csv"), format_predictions_csv(d, f.schedule.horizon()));
  write_json(o.out / "request.json", {{"command", name},
                                      {"fit", o.fit.string()},
                                      {"seed", req.seed},
                                      {"times", req.z_times},
                                      {"observations", req.want_observations},
                                      {"generator_after_horizon", req.generator_after_horizon}});
  log << name << ": " << d.times.size() << " time points, " << f.ps.n_draws() << " draws, seed "
      << req.seed << " -> " << (o.out / (name + ".csv")).string() << "\n";
}

}  // namespace

SimulationConfig simulation_config_from_json(const nlohmann::json& j) {
  SimulationConfig c;
  try {
    c.kind = parse_model_kind(j.value("model", std::string("101")));
    c.params = interpret(params_from_json(j.at("params")), c.kind);
    const auto& s = j.at("schedule");
    if (s.contains("cycles") && s.at("cycles").is_array())
      c.schedule = schedule_from_json(s);
    else
      c.schedule = standard_schedule(s.at("cycles").get<int>(), s.at("rise").get<double>(),
                                     s.at("measure").get<double>(), s.value("gap", 0.0),
                                     s.value("dt", 1.0));
    c.obs_noise = j.value("obs_noise", c.obs_noise);
    c.C0 = j.value("C0", c.C0);
    c.beta = j.value("beta", c.beta);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed simulation config: ") + e.what());
  }
  validate(c.params);
  if (!(c.obs_noise >= 0.0)) throw ConfigError("obs_noise must be non-negative");
  if (!(c.C0 > 0.0)) throw ConfigError("C0 must be positive");
  return c;
}

std::vector<double> parse_times(const std::string& spec, double dt) {
  std::vector<double> out;
  const auto num = [](const std::string& s) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw ConfigError("cannot parse time '" + s + "'");
    return v;
  };
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() < 2 || parts.size() > 3) throw ConfigError("time range must be a:b or a:b:step");
    const double a = num(parts[0]), b = num(parts[1]);
    const double step = parts.size() == 3 ? num(parts[2]) : dt;
    if (!(step > 0.0) || b < a) throw ConfigError("empty or invalid time range '" + spec + "'");
    const long n = std::lround((b - a) / step);
    for (long k = 0; k <= n; ++k) out.push_back(a + double(k) * step);
    return out;
  }
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
  if (out.empty()) throw ConfigError("no prediction times given");
  return out;
}

void cmd_simulate(const SimulateOptions& o, std::ostream& log) {
  const nlohmann::json j = read_json(o.config);
  SimulationConfig c = simulation_config_from_json(j);
  if (o.seed) c.seed = *o.seed;
  const EffectiveParams eff = effective_params(c.params, c.kind);
  if (!euler_stable(eff, c.params.V, c.schedule.dt())) {
    std::ostringstream msg;
    msg << "Q'*dt/V = " << eff.Q_eff * c.schedule.dt() / c.params.V
        << " >= 1: explicit step is unstable; use dt < " << c.params.V / eff.Q_eff;
    throw StepSizeError(msg.str());
  }
  const SimulatedExperiment sim =
      simulate_experiment(c.params, c.kind, c.schedule, c.obs_noise, c.beta, c.C0, c.seed);
  prepare_dir(o.out);
  write_measurements(o.out / "measurements.csv", sim.series);
  write_text(o.out / "latent.csv", format_latent(sim.latent_times, sim.latent));
  write_json(o.out / "schedule.json", schedule_to_json(c.schedule));
  copy_verbatim(o.config, o.out / "config.json");
  write_json(o.out / "run.json", {{"command", "simulate"}, {"seed", c.seed}});
  log << "simulate: seed " << c.seed << ", " << sim.series.size() << " measurements -> "
      << o.out.string() << "\n";
}

void cmd_fit(const FitOptions& o, std::ostream& log) {
  const ModelKind kind = parse_model_kind(o.model);
  const LoadedMeasurements data = o.schedule ? load_measurements(o.data, load_schedule(*o.schedule))
                                             : load_measurements(o.data);
  PriorSpec prior;
  if (o.prior) prior = prior_from_json(read_json(*o.prior));
  prior.validate();
  ChainConfig cfg;
  if (o.chain) cfg = chain_config_from_json(read_json(*o.chain));
  if (o.seed) cfg.seed = *o.seed;
  if (o.chains) cfg.n_chains = *o.chains;
  cfg.validate();
  if (!(o.volume > 0.0)) throw ConfigError("volume must be positive");

  const StateSpaceModel model(data.schedule, data.series, kind, prior, o.dynamic_variance, o.volume);
  const PosteriorSamples ps = run_chains(model, cfg);

  prepare_dir(o.out);
  write_samples(o.out / "samples.csv", o.out / "meta.json", ps);
  write_json(o.out / "diagnostics.json", diagnostics_to_json(diagnostics(ps)));
  copy_verbatim(o.data, o.out / "data.csv");
  write_json(o.out / "schedule.json", schedule_to_json(data.schedule));
  if (o.prior)
    copy_verbatim(*o.prior, o.out / "prior.json");
  else
    write_json(o.out / "prior.json", prior_to_json(prior));
  if (o.chain)
    copy_verbatim(*o.chain, o.out / "chain.json");
  else
    write_json(o.out / "chain.json", chain_config_to_json(cfg));

  log << "fit: model " << to_string(kind) << (o.dynamic_variance ? " (dynamic variance)" : "")
      << ", seed " << cfg.seed << ", " << cfg.n_chains << " chain(s), " << ps.n_draws()
      << " draws -> " << o.out.string() << "\n";
  for (const auto& a : ps.acceptance)
    log << "  acceptance " << a.block << ": " << a.rate() << " (support rejections "
        << a.support_rejected << ")\n";
}

void cmd_smooth(const PredictOptions& o, std::ostream& log) {
  const FitDir f = load_fit(o.fit);
  PredictionRequest req;
  req.seed = o.seed;
  req.want_observations = o.observations;
  req.generator_after_horizon = o.generator_on;
  if (o.times.empty()) {
    const long a = f.schedule.grid_index(f.schedule.cycles().front().start);
    const long b = f.schedule.grid_index(f.schedule.horizon());
    for (long k = a; k <= b; ++k) req.z_times.push_back(f.schedule.grid_time(k));
  } else {
    req.z_times = parse_times(o.times, f.schedule.dt());
  }
  if (o.observations && f.ps.n_beta > 0)
    throw ConfigError("prediction of observations with covariates needs covariate values");
  write_predictions(o, f, req, "smooth", log);
}

void cmd_forecast(const PredictOptions& o, std::ostream& log) {
  if (!(o.horizon > 0.0)) throw ConfigError("forecast horizon must be positive");
  const FitDir f = load_fit(o.fit);
  PredictionRequest req;
  req.seed = o.seed;
  req.want_observations = o.observations;
  req.generator_after_horizon = o.generator_on;
  const CycleSchedule& s = f.schedule;
  const long a = s.grid_index(f.ps.latent_times.back()) + 1;
  const long b = std::lround((s.horizon() + o.horizon) / s.dt());
  for (long k = a; k <= b; ++k) req.z_times.push_back(s.grid_time(k));
  if (req.z_times.empty()) throw ConfigError("forecast window is empty");
  if (o.observations && f.ps.n_beta > 0)
    throw ConfigError("prediction of observations with covariates needs covariate values");
  write_predictions(o, f, req, "forecast", log);
}

void cmd_derive(const DeriveOptions& o, std::ostream& log) {
  const FitDir f = load_fit(o.fit);
  const Cycle& first = f.schedule.cycles().front();
  const double T = o.T.value_or(first.gen_end - first.start);
  const double V = o.volume.value_or(f.ps.V);
  if (!(T > 0.0) || !(V > 0.0)) throw ConfigError("T and volume must be positive");
  const auto d = derived_posteriors(f.ps, V, T, o.thresholds);
  prepare_dir(o.out);
  nlohmann::json j = derived_to_json(d, V, T);
  j["thresholds"] = o.thresholds;
  write_json(o.out / "derived.json", j);
  for (const auto& q : d)
    log << q.name << ": median " << q.summary.median << " (" << q.summary.lo << ", "
        << q.summary.hi << ")\n";
}

void cmd_waic(const WaicOptions& o, std::ostream& log) {
  const FitDir f = load_fit(o.fit);
  const DrawMatrix ll = pointwise_loglik(f.ps, f.data);
  const WaicResult w = waic(ll);
  const double rss = residual_ss(f.ps, f.data);
  const nlohmann::json j = evaluation_json(w, rss, f.data.size(), f.ps.n_draws());
  const fs::path dir = o.out.value_or(o.fit);
  prepare_dir(dir);
  write_json(dir / "evaluation.json", j);
  log << j.dump(2) << "\n";
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bayesian melding of one-box aerosol models with concentration data"};
  app.require_subcommand(1);

  SimulateOptions sim;
  auto* c_sim = app.add_subcommand("simulate", "simulate an experiment from a config");
  c_sim->add_option("config", sim.config, "simulation config JSON")->required();
  c_sim->add_option("--out", sim.out, "output directory")->required();
  std::uint64_t sim_seed = 0;
  auto* sim_seed_opt = c_sim->add_option("--seed", sim_seed, "master seed (overrides config)");

  FitOptions fit;
  std::string fit_schedule, fit_prior, fit_chain;
  std::uint64_t fit_seed = 0;
  std::size_t fit_chains = 1;
  auto* c_fit = app.add_subcommand("fit", "run the sampler");
  c_fit->add_option("data", fit.data, "measurement CSV")->required();
  c_fit->add_option("--schedule", fit_schedule, "schedule JSON (default: inferred from data)");
  c_fit->add_option("--prior", fit_prior, "prior JSON");
  c_fit->add_option("--chain", fit_chain, "chain config JSON");
  c_fit->add_option("--model", fit.model, "mechanistic model")
      ->check(CLI::IsMember({"101", "111"}))
      ->capture_default_str();
  c_fit->add_flag("--dynamic-variance", fit.dynamic_variance, "time-varying transition variance");
  auto* fit_chains_opt = c_fit->add_option("--chains", fit_chains, "independent chains");
  auto* fit_seed_opt = c_fit->add_option("--seed", fit_seed, "master seed");
  c_fit->add_option("--volume", fit.volume, "room volume (m^3)")->capture_default_str();
  c_fit->add_option("--out", fit.out, "output directory")->required();

  PredictOptions sm;
  auto* c_sm = app.add_subcommand("smooth", "latent concentrations at arbitrary times");
  c_sm->add_option("fit", sm.fit, "fit directory")->required();
  c_sm->add_option("--times", sm.times, "a:b[:step] or t1,t2,... (default: whole grid)");
  c_sm->add_flag("--observations", sm.observations, "also predict measurements");
  c_sm->add_option("--seed", sm.seed)->capture_default_str();
  c_sm->add_option("--out", sm.out)->required();

  PredictOptions fc;
  auto* c_fc = app.add_subcommand("forecast", "forecast past the data horizon");
  c_fc->add_option("fit", fc.fit, "fit directory")->required();
  c_fc->add_option("--horizon", fc.horizon, "minutes past T")->capture_default_str();
  c_fc->add_flag("--generator-on", fc.generator_on, "keep the generator on past T");
  c_fc->add_flag("--observations", fc.observations, "also predict measurements");
  c_fc->add_option("--seed", fc.seed)->capture_default_str();
  c_fc->add_option("--out", fc.out)->required();

  DeriveOptions dv;
  std::string thresholds = "0.1";
  double dv_T = 0.0, dv_V = 0.0;
  auto* c_dv = app.add_subcommand("derive", "posterior of derived exposure quantities");
  c_dv->add_option("fit", dv.fit, "fit directory")->required();
  c_dv->add_option("--thresholds", thresholds, "decay fractions, comma separated")
      ->capture_default_str();
  auto* dv_T_opt = c_dv->add_option("--T", dv_T, "averaging window (default: first rise)");
  auto* dv_V_opt = c_dv->add_option("--volume", dv_V, "room volume (default: from the fit)");
  c_dv->add_option("--out", dv.out)->required();

  WaicOptions wa;
  std::string wa_out;
  auto* c_wa = app.add_subcommand("waic", "WAIC and residual sum of squares");
  c_wa->add_option("fit", wa.fit, "fit directory")->required();
  c_wa->add_option("--out", wa_out, "output directory (default: the fit directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfig;
  }

  try {
    if (*c_sim) {
      if (*sim_seed_opt) sim.seed = sim_seed;
      cmd_simulate(sim, out);
    } else if (*c_fit) {
      if (!fit_schedule.empty()) fit.schedule = fit_schedule;
      if (!fit_prior.empty()) fit.prior = fit_prior;
      if (!fit_chain.empty()) fit.chain = fit_chain;
      if (*fit_seed_opt) fit.seed = fit_seed;
      if (*fit_chains_opt) fit.chains = fit_chains;
      cmd_fit(fit, out);
    } else if (*c_sm) {
      cmd_smooth(sm, out);
    } else if (*c_fc) {
      cmd_forecast(fc, out);
    } else if (*c_dv) {
      for (const double t : parse_times(thresholds, 1.0)) dv.thresholds.push_back(t);
      if (*dv_T_opt) dv.T = dv_T;
      if (*dv_V_opt) dv.volume = dv_V;
      cmd_derive(dv, out);
    } else if (*c_wa) {
      if (!wa_out.empty()) wa.out = wa_out;
      cmd_waic(wa, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DomainError& e) {
    err << "invalid value: " << e.what() << "\n";
    return kConfig;
  } catch (const RangeError& e) {
    err << "range error: " << e.what() << "\n";
    return kConfig;
  } catch (const StepSizeError& e) {
    err << "step-size error: " << e.what() << "\n";
    return kNumerical;
  } catch (const StartupError& e) {
    err << "startup error: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}

}  // namespace onebox::cli
