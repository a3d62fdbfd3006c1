#include "onebox/mechanistic.hpp"

#include <cmath>
#include <sstream>
#include <string>

#include "onebox/errors.hpp"

namespace onebox {

namespace {

void require(bool ok, const char* field, const char* rule, double value) {
  if (!ok) {
    std::ostringstream msg;
    msg << "invalid mechanistic parameter " << field << " = " << value << " (requires " << rule
        << ")";
    throw DomainError(msg.str());
  }
}

void require_unit(const char* field, double value) {
  require(value >= 0.0 && value <= 1.0, field, "0 <= value <= 1", value);
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  return kind == ModelKind::Model101 ? "101" : "111";
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "101" || text == "Model101" || text == "model101") return ModelKind::Model101;
  if (text == "111" || text == "Model111" || text == "model111") return ModelKind::Model111;
  throw DomainError("unknown model kind '" + std::string(text) + "' (expected 101 or 111)");
}

void validate(const MechParams& p) {
  require(std::isfinite(p.G) && p.G > 0.0, "G", "G > 0", p.G);
  require(std::isfinite(p.Q) && p.Q > 0.0, "Q", "Q > 0", p.Q);
  require(std::isfinite(p.Q_L) && p.Q_L >= 0.0, "Q_L", "Q_L >= 0", p.Q_L);
  require(std::isfinite(p.Q_R) && p.Q_R >= 0.0, "Q_R", "Q_R >= 0", p.Q_R);
  require_unit("eps_L", p.eps_L);
  require_unit("eps_LF", p.eps_LF);
  require_unit("eps_RF", p.eps_RF);
  require(std::isfinite(p.V) && p.V > 0.0, "V", "V > 0", p.V);
}

MechParams interpret(const MechParams& p, ModelKind kind) {
  MechParams out = p;
  if (kind == ModelKind::Model101) {
    out.Q_L = out.Q_R = 0.0;
    out.eps_L = out.eps_LF = out.eps_RF = 0.0;
  }
  return out;
}

EffectiveParams effective_params(const MechParams& p, ModelKind kind) {
  const MechParams q = interpret(p, kind);
  validate(q);
  return effective_params_unchecked(q);
}

double concentration_closed_form(double t, double c0, const EffectiveParams& eff, double V,
                                 double T0) {
  if (!(t >= 0.0)) throw DomainError("closed form requires t >= 0");
  if (!(T0 > 0.0)) throw DomainError("closed form requires T0 > 0");
  if (!(c0 >= 0.0)) throw DomainError("closed form requires C0 >= 0");
  if (!(eff.Q_eff > 0.0) || !(V > 0.0)) throw DomainError("closed form requires Q' > 0, V > 0");
  const double k = eff.Q_eff / V;
  const double ss = eff.G_eff / eff.Q_eff;
  const auto rise = [&](double s) { return c0 * std::exp(-k * s) - ss * std::expm1(-k * s); };
  if (t <= T0) return rise(t);
  return rise(T0) * std::exp(-k * (t - T0));
}

TransitionCoefficients transition_coefficients(const EffectiveParams& eff, double V, double dt,
                                               bool gen_on) {
  if (!(dt > 0.0)) throw DomainError("step size dt must be positive");
  if (!euler_stable(eff, V, dt)) {
    std::ostringstream msg;
    msg << "explicit step unstable: Q'*dt/V = " << eff.Q_eff * dt / V
        << " >= 1; use a step size smaller than " << V / eff.Q_eff << " min";
    throw StepSizeError(msg.str());
  }
  return {1.0 - eff.Q_eff * dt / V, gen_on ? eff.G_eff * dt / V : 0.0};
}

TransitionCoefficients transition_coefficients(const MechParams& p, ModelKind kind, double dt,
                                               bool gen_on) {
  return transition_coefficients(effective_params(p, kind), p.V, dt, gen_on);
}

double steady_state(const EffectiveParams& eff) {
  if (!(eff.Q_eff > 0.0)) throw DomainError("steady state requires Q' > 0");
  return eff.G_eff / eff.Q_eff;
}

double average_concentration(const EffectiveParams& eff, double V, double T) {
  if (!(T > 0.0)) throw DomainError("average concentration requires T > 0");
  const double kT = eff.Q_eff / V * T;
  // 1 - (1 - e^{-kT})/kT, written with expm1 for small kT
  return steady_state(eff) * (1.0 + std::expm1(-kT) / kT);
}

double decay_time(const EffectiveParams& eff, double V, double C1, double C2) {
  if (!(C2 > 0.0) || !(C1 > C2)) throw DomainError("decay time requires C1 > C2 > 0");
  return V / eff.Q_eff * std::log(C1 / C2);
}

double removal_rate(const EffectiveParams& eff, double V) {
  if (!(V > 0.0)) throw DomainError("removal rate requires V > 0");
  return 60.0 * eff.Q_eff / V;
}

}  // namespace onebox
