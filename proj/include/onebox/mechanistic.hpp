#pragma once

// Deterministic one-box aerosol physics.
//
// Units are fixed throughout: mg, m^3, minutes. Rates are converted to
// per-hour only by removal_rate().

#include <string_view>

namespace onebox {

enum class ModelKind { Model101, Model111 };

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);  // "101" / "111" / "Model101" ...

// Physical parameters of the one-box model plus the chamber volume.
struct MechParams {
  double G = 0.0;       // generation rate, mg/min
  double Q = 0.0;       // general ventilation rate, m^3/min
  double Q_L = 0.0;     // local exhaust ventilation rate, m^3/min
  double Q_R = 0.0;     // recirculation ventilation rate, m^3/min
  double eps_L = 0.0;   // fraction captured by the local exhaust
  double eps_LF = 0.0;  // local exhaust return filtration efficiency
  double eps_RF = 0.0;  // recirculation filtration efficiency
  double V = 100.0;     // chamber volume, m^3
};

// Throws DomainError naming the first offending field.
void validate(const MechParams& p);

// Copy of p with the local-control parameters zeroed under Model101.
MechParams interpret(const MechParams& p, ModelKind kind);

struct EffectiveParams {
  double G_eff = 0.0;  // (1 - eps_L eps_LF) G
  double Q_eff = 0.0;  // Q + eps_LF Q_L + eps_RF Q_R
};

EffectiveParams effective_params(const MechParams& p, ModelKind kind);

// Unchecked arithmetic core of effective_params(); p must already be
// interpreted for the model kind.
constexpr EffectiveParams effective_params_unchecked(const MechParams& p) {
  return {(1.0 - p.eps_L * p.eps_LF) * p.G, p.Q + p.eps_LF * p.Q_L + p.eps_RF * p.Q_R};
}

// Rise branch for t <= T0, exponential decay from C_r(T0) afterwards.
double concentration_closed_form(double t, double c0, const EffectiveParams& eff, double V,
                                 double T0);

// One explicit-Euler step C_t = A C_{t-1} + B.
struct TransitionCoefficients {
  double A = 1.0;
  double B = 0.0;
};

TransitionCoefficients transition_coefficients(const MechParams& p, ModelKind kind, double dt,
                                               bool gen_on);
TransitionCoefficients transition_coefficients(const EffectiveParams& eff, double V, double dt,
                                               bool gen_on);

// True when Q'·dt/V < 1.
constexpr bool euler_stable(const EffectiveParams& eff, double V, double dt) {
  return eff.Q_eff * dt / V < 1.0;
}

double steady_state(const EffectiveParams& eff);
double average_concentration(const EffectiveParams& eff, double V, double T);
double decay_time(const EffectiveParams& eff, double V, double C1, double C2);
// Air changes per hour, 60 Q'/V.
double removal_rate(const EffectiveParams& eff, double V);

}  // namespace onebox
