#pragma once

// Layer dynamics: how a stack of SMoE layers advances its hidden state.
//
// Each step consumes f_out, the layer output at the current (or a lookahead)
// point, and a LayerState, and returns the next LayerState. f_out plays the
// role of the negative gradient, so the momentum-free step is x + gamma*f_out.
//
// Coefficients (mu, gamma, ...) are tensors so they may be learnable. A
// coefficient is either a scalar or, for per-token step sizes, a vector with
// one entry per row of x.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "momoe/tensor.hpp"

namespace momoe {

enum class Mode {
  baseline,
  heavy_ball,
  adam,
  robust,
  nag,
  rmsprop,
  sam,
  time_varying,
  scheduled_restart,
  zoh,
  negative,
  complex,
  learnable,
};

inline const std::vector<std::pair<Mode, const char*>>& mode_names() {
  static const std::vector<std::pair<Mode, const char*>> names = {
      {Mode::baseline, "baseline"},
      {Mode::heavy_ball, "heavy_ball"},
      {Mode::adam, "adam"},
      {Mode::robust, "robust"},
      {Mode::nag, "nag"},
      {Mode::rmsprop, "rmsprop"},
      {Mode::sam, "sam"},
      {Mode::time_varying, "time_varying"},
      {Mode::scheduled_restart, "scheduled_restart"},
      {Mode::zoh, "zoh"},
      {Mode::negative, "negative"},
      {Mode::complex, "complex"},
      {Mode::learnable, "learnable"},
  };
  return names;
}

inline const char* to_string(Mode m) {
  for (const auto& [mode, name] : mode_names())
    if (mode == m) return name;
  return "?";
}

inline std::optional<Mode> parse_mode(const std::string& s) {
  for (const auto& [mode, name] : mode_names())
    if (s == name) return mode;
  return std::nullopt;
}

/// Which of (mu, gamma) are trained by the outer optimizer.
enum class Learnable {
  none,
  mu_and_gamma,   // both scalars
  gamma_only,     // scalar gamma, fixed mu
  gamma_network,  // per-token gamma = sigmoid(linear(x)), fixed mu
};

inline const std::vector<std::pair<Learnable, const char*>>& learnable_names() {
  static const std::vector<std::pair<Learnable, const char*>> names = {
      {Learnable::none, "none"},
      {Learnable::mu_and_gamma, "mu_and_gamma"},
      {Learnable::gamma_only, "gamma_only"},
      {Learnable::gamma_network, "gamma_network"},
  };
  return names;
}

inline const char* to_string(Learnable l) {
  for (const auto& [v, name] : learnable_names())
    if (v == l) return name;
  return "?";
}

inline std::optional<Learnable> parse_learnable(const std::string& s) {
  for (const auto& [v, name] : learnable_names())
    if (s == name) return v;
  return std::nullopt;
}

struct RobustSettings {
  double p = 0.5;
  double L = 1.0;
  double m_strong = 0.1;
};

struct RobustParams {
  double gamma;
  double mu;
  double alpha;
  double k;
};

// Robust momentum coefficients for condition ratio k = L / m_strong.
// p = 0 is accepted as the momentum-free limit.
inline RobustParams robust_params(double p, double L, double m_strong) {
  if (!(m_strong > 0.0) || !(L > 0.0)) throw ContractError("robust: L and m_strong must be positive");
  const double k = L / m_strong;
  if (!(k > 1.0)) throw ContractError("robust: k = L/m_strong must exceed 1, got " + std::to_string(k));
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("robust: p must lie in [0, 1)");
  const double q = 1.0 - p;
  return {k * q * q * (1.0 + p) / L, k * p * p * p / (k - 1.0), p * p * p / ((k - 1.0) * q * q * (1.0 + p)), k};
}

// Left end -v of the stability interval on the negative real axis.
inline double robust_boundary(double p, double k) {
  if (!(p > 0.0 && p < 1.0)) throw ContractError("robust_boundary: p must lie in (0, 1)");
  return (1.0 + p) * (1.0 - k + 2.0 * k * p - k * p * p) / (2.0 * p);
}

struct DynamicsConfig {
  Mode mode = Mode::heavy_ball;
  double mu = 0.7;
  double gamma = 1.0;
  double mu_im = 0.0;     // complex momentum, imaginary part
  double adam_mu = 0.9;   // first-moment decay of the adaptive step
  double beta = 0.99;     // second-moment decay of the adaptive step
  double rms_mu = 0.9;    // squared-magnitude decay for rmsprop
  double eps = 1e-8;
  double kappa = 0.0;     // decay applied to x by the adaptive step
  double rho = 0.05;      // sam neighbourhood radius
  RobustSettings robust;
  int restart_period = 3;
  Learnable learnable = Learnable::mu_and_gamma;  // consulted by Mode::learnable only

  bool allow_unstable_mu = false;
  bool adaptive_first_layer_only = true;  // adam and rmsprop: first layer only, heavy ball after
  bool nag_lookahead_plus = false;        // evaluate at x + mu*p instead of x - mu*p
  bool detach_momentum = false;           // cut the tape through p between layers
  bool per_layer_params = false;          // one set of learnable scalars per layer

  // Throws ContractError whose message starts with the offending field name.
  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ContractError(field + ": " + why);
    };
    auto finite = [&](const char* field, double v) {
      if (!std::isfinite(v)) fail(field, "must be finite");
    };
    finite("mu", mu);
    finite("gamma", gamma);
    finite("mu_im", mu_im);
    finite("kappa", kappa);
    finite("rho", rho);
    if (!(gamma > 0.0)) fail("gamma", "must be positive");
    if (!(eps > 0.0)) fail("eps", "must be positive");
    if (restart_period < 1) fail("restart_period", "must be at least 1");
    const bool unit = mu > -1.0 && mu < 1.0;
    switch (mode) {
      case Mode::heavy_ball:
      case Mode::time_varying:
      case Mode::scheduled_restart:
      case Mode::learnable:
        if (!unit && !allow_unstable_mu) fail("mu", "must lie in (-1, 1) unless allow_unstable_mu is set");
        break;
      case Mode::negative:
        if (!(mu < 0.0)) fail("mu", "negative momentum needs mu < 0");
        if (!unit && !allow_unstable_mu) fail("mu", "must lie in (-1, 1) unless allow_unstable_mu is set");
        break;
      case Mode::complex:
        if (!(std::hypot(mu, mu_im) < 1.0) && !allow_unstable_mu) {
          fail("mu", "|mu + i mu_im| must be below 1 unless allow_unstable_mu is set");
        }
        break;
      case Mode::adam:
        if (!(adam_mu >= 0.0 && adam_mu < 1.0)) fail("adam_mu", "must lie in [0, 1)");
        if (!(beta >= 0.0 && beta < 1.0)) fail("beta", "must lie in [0, 1)");
        if (!(kappa >= 0.0)) fail("kappa", "must be nonnegative");
        if (!unit && !allow_unstable_mu) fail("mu", "must lie in (-1, 1) unless allow_unstable_mu is set");
        break;
      case Mode::rmsprop:
        if (!(rms_mu >= 0.0 && rms_mu < 1.0)) fail("rms_mu", "must lie in [0, 1)");
        if (!unit && !allow_unstable_mu) fail("mu", "must lie in (-1, 1) unless allow_unstable_mu is set");
        break;
      case Mode::robust:
        if (!(robust.m_strong > 0.0 && robust.m_strong < robust.L)) {
          fail("robust.m_strong", "must satisfy 0 < m_strong < L");
        }
        if (!(robust.p >= 0.0 && robust.p < 1.0)) fail("robust.p", "must lie in [0, 1)");
        break;
      case Mode::nag:
        if (!(mu >= 0.0 && mu < 1.0)) fail("mu", "nag needs mu in [0, 1)");
        break;
      case Mode::sam:
        if (!(rho >= 0.0)) fail("rho", "must be nonnegative");
        break;
      case Mode::zoh:
        if (!(mu > 0.0)) fail("mu", "zoh starts from log(mu) and needs mu > 0");
        break;
      case Mode::baseline:
        break;
    }
    if (mode == Mode::learnable && learnable == Learnable::none) {
      fail("learnable", "learnable mode needs a setting other than none");
    }
  }
};

/// Per-layer dynamical state. p, m and p_im start at zero; x_prev starts at x.
struct LayerState {
  Tensor x;
  Tensor p;
  Tensor m;
  Tensor x_prev;
  Tensor p_im;

  static LayerState start(const Tensor& x0) {
    return {x0, Tensor::zeros(x0.shape()), Tensor::zeros(x0.shape()), x0, Tensor::zeros(x0.shape())};
  }
};

inline Tensor constant(double v) { return Tensor::scalar(v); }

// t * c for a scalar coefficient, or row-wise for a per-token coefficient.
inline Tensor scale_by(const Tensor& t, const Tensor& c) {
  if (c.size() == 1 && c.rank() <= 1) return scale(t, c);
  return scale_rows(t, c);
}

inline LayerState baseline_step(const Tensor& f_out, const LayerState& s, const Tensor& gamma) {
  LayerState n = s;
  n.x_prev = s.x;
  n.x = add(s.x, scale_by(f_out, gamma));
  return n;
}

// p' = f_out + mu p;  x' = x + gamma p'.
inline LayerState heavy_ball_step(const Tensor& f_out, const LayerState& s, const Tensor& mu, const Tensor& gamma) {
  LayerState n = s;
  n.p = add(f_out, scale_by(s.p, mu));
  n.x_prev = s.x;
  n.x = add(s.x, scale_by(n.p, gamma));
  return n;
}

inline LayerState heavy_ball_step(const Tensor& f_out, const LayerState& s, double mu, double gamma) {
  return heavy_ball_step(f_out, s, constant(mu), constant(gamma));
}

// Position-only form, driven by the descent field f = -f_out:
// x' = x - gamma f + mu (x - x_prev).
inline Tensor two_form_step(const Tensor& f, const Tensor& x, const Tensor& x_prev, double mu, double gamma) {
  return add(sub(x, scale(f, gamma)), scale(sub(x, x_prev), mu));
}

// p' = mu p + (1-mu) f_out;  m' = beta m + (1-beta) f_out^2;
// x' = x + gamma p' / (sqrt(m') + eps) - kappa x.
inline LayerState adam_step(const Tensor& f_out, const LayerState& s, double mu, double beta, const Tensor& gamma,
                            double eps, double kappa) {
  LayerState n = s;
  n.p = add(scale(s.p, mu), scale(f_out, 1.0 - mu));
  n.m = add(scale(s.m, beta), scale(square(f_out), 1.0 - beta));
  const Tensor step = divide(n.p, add_scalar(sqrt(n.m), eps));
  n.x_prev = s.x;
  n.x = sub(add(s.x, scale_by(step, gamma)), scale(s.x, kappa));
  return n;
}

// m' = mu m + (1-mu) f_out^2;  x' = x + gamma f_out / sqrt(m' + eps).
inline LayerState rmsprop_step(const Tensor& f_out, const LayerState& s, double mu, const Tensor& gamma, double eps) {
  LayerState n = s;
  n.m = add(scale(s.m, mu), scale(square(f_out), 1.0 - mu));
  n.x_prev = s.x;
  n.x = add(s.x, scale_by(divide(f_out, sqrt(add_scalar(n.m, eps))), gamma));
  return n;
}

// Complex momentum stored as (p, p_im); x advances along the real part only.
inline LayerState complex_momentum_step(const Tensor& f_out, const LayerState& s, double mu_re, double mu_im,
                                        const Tensor& gamma) {
  LayerState n = s;
  n.p = sub(add(f_out, scale(s.p, mu_re)), scale(s.p_im, mu_im));
  n.p_im = add(scale(s.p_im, mu_re), scale(s.p, mu_im));
  n.x_prev = s.x;
  n.x = add(s.x, scale_by(n.p, gamma));
  return n;
}

// Lookahead variant: y = x + alpha gamma p;  p' = f_out(y) + mu p;  x' = x + gamma p'.
template <class Field>
LayerState robust_momentum_step(Field&& field, const LayerState& s, const RobustParams& rp) {
  const Tensor y = add(s.x, scale(s.p, rp.alpha * rp.gamma));
  return heavy_ball_step(field(y), s, constant(rp.mu), constant(rp.gamma));
}

// p' = gamma f_out(x - mu p) + mu p;  x' = x + p'.
// The lookahead sign follows the written update; `lookahead_plus` flips it.
template <class Field>
LayerState nag_step(Field&& field, const LayerState& s, const Tensor& mu, const Tensor& gamma,
                    bool lookahead_plus = false) {
  const Tensor shift = scale_by(s.p, mu);
  const Tensor look = lookahead_plus ? add(s.x, shift) : sub(s.x, shift);
  LayerState n = s;
  n.p = add(scale_by(field(look), gamma), shift);
  n.x_prev = s.x;
  n.x = add(s.x, n.p);
  return n;
}

// Rows whose f_out norm is below this skip the perturbation.
inline constexpr double kSamGuard = 1e-12;

// eps = -rho f_out / ||f_out|| per row;  x' = x + gamma f_out(x + eps).
template <class Field>
LayerState sam_step(Field&& field, const LayerState& s, double rho, const Tensor& gamma) {
  const Tensor f0 = field(s.x);
  const Tensor norms = row_norms(f0);
  const std::size_t rows = f0.rows();
  std::vector<double> num(rows), pad(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const bool guarded = norms[i] < kSamGuard;
    num[i] = guarded ? 0.0 : -rho;
    pad[i] = guarded ? 1.0 : 0.0;
  }
  const Tensor coef = divide(Tensor::vector(num), add(norms, Tensor::vector(pad)));
  const Tensor perturbed = add(s.x, scale_rows(f0, coef));
  LayerState n = s;
  n.x_prev = s.x;
  n.x = add(s.x, scale_by(field(perturbed), gamma));
  return n;
}

// (t-1)/(t+2) for the 0-based layer index t.
inline double time_varying_mu(std::size_t t) {
  const double d = static_cast<double>(t);
  return (d - 1.0) / (d + 2.0);
}

// (t mod r)/((t mod r) + 3): zero at every multiple of the period.
inline double restart_mu(std::size_t t, int period) {
  if (period < 1) throw ContractError("restart_period must be at least 1");
  const double r = static_cast<double>(t % static_cast<std::size_t>(period));
  return r / (r + 3.0);
}

struct ZohValues {
  double mu;
  double gamma;
};

// Zero-order-hold discretization. z = softplus(delta_raw) * mu_raw;
// mu_t = e^z;  gamma_t = (e^z - 1)/z * softplus(delta_raw) * gamma_net_out.
inline ZohValues zoh_params(double delta_raw, double mu_raw, double gamma_net_out) {
  const double delta = softplus_value(delta_raw);
  const double z = delta * mu_raw;
  return {std::exp(z), expm1_over_value(z) * delta * gamma_net_out};
}

// Same map on tape. gamma_net_out may be a per-token vector.
inline std::pair<Tensor, Tensor> zoh_coefficients(const Tensor& delta_raw, const Tensor& mu_raw,
                                                  const Tensor& gamma_net_out) {
  const Tensor delta = softplus(delta_raw);
  const Tensor z = mul(delta, mu_raw);
  return {exp(z), scale(gamma_net_out, mul(expm1_over(z), delta))};
}

/// Trainable dynamics parameters. Undefined tensors are not in use.
struct DynamicsParams {
  Tensor mu, gamma;          // learnable scalars
  Tensor gamma_w, gamma_b;   // per-token gamma network, [D x 1] and [1]
  Tensor delta_raw, mu_raw;  // zero-order hold

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const Tensor* t : {&mu, &gamma, &gamma_w, &gamma_b, &delta_raw, &mu_raw})
      if (t->defined() && t->requires_grad()) out.push_back(*t);
    return out;
  }
};

// Returns a learnable heavy-ball configuration with the requested setting.
inline DynamicsConfig make_learnable(const DynamicsConfig& cfg, Learnable setting) {
  if (cfg.mode != Mode::heavy_ball && cfg.mode != Mode::learnable) {
    throw ContractError("make_learnable: only heavy_ball configurations can be made learnable");
  }
  DynamicsConfig out = cfg;
  out.mode = setting == Learnable::none ? Mode::heavy_ball : Mode::learnable;
  out.learnable = setting;
  return out;
}

// Parameters for one layer (or for all layers when shared).
inline DynamicsParams init_params(const DynamicsConfig& cfg, std::size_t width) {
  DynamicsParams p;
  if (cfg.mode == Mode::learnable) {
    switch (cfg.learnable) {
      case Learnable::mu_and_gamma:
        p.mu = Tensor::scalar(cfg.mu, true);
        p.gamma = Tensor::scalar(cfg.gamma, true);
        break;
      case Learnable::gamma_only:
        p.gamma = Tensor::scalar(cfg.gamma, true);
        break;
      case Learnable::gamma_network:
        // sigmoid(2) ~ 0.88 at start
        p.gamma_w = Tensor::zeros({width, 1}, true);
        p.gamma_b = Tensor::vector({2.0}, true);
        break;
      case Learnable::none:
        break;
    }
  } else if (cfg.mode == Mode::zoh) {
    // Start at mu_t = cfg.mu and gamma_t = cfg.gamma.
    const double delta0 = softplus_value(0.0);
    const double mu_raw = std::log(cfg.mu) / delta0;
    p.delta_raw = Tensor::scalar(0.0, true);
    p.mu_raw = Tensor::scalar(mu_raw, true);
    p.gamma_w = Tensor::zeros({width, 1}, true);
    p.gamma_b = Tensor::vector({cfg.gamma / (expm1_over_value(delta0 * mu_raw) * delta0)}, true);
  }
  return p;
}

// Per-token output of the gamma network on the normalized state, shape [B].
inline Tensor gamma_network(const DynamicsParams& p, const Tensor& x) {
  const Tensor xb = x.rank() == 1 ? reshape(x, {1, x.size()}) : x;
  const Tensor lin = add_bias(matmul(rms_norm_rows(xb), p.gamma_w), p.gamma_b);
  return reshape(lin, {xb.shape()[0]});
}

// Layer modes for a stack of `layers`: enabled -> [adam, heavy_ball, ...].
inline std::vector<Mode> adam_first_layer_policy(std::size_t layers, bool enabled = true) {
  if (layers < 1) throw ContractError("adam_first_layer_policy: need at least one layer");
  std::vector<Mode> modes(layers, Mode::heavy_ball);
  if (enabled) modes[0] = Mode::adam;
  return modes;
}

inline std::vector<Mode> layer_modes(const DynamicsConfig& cfg, std::size_t layers) {
  if (layers < 1) throw ContractError("layer_modes: need at least one layer");
  std::vector<Mode> modes(layers, cfg.mode);
  if ((cfg.mode == Mode::adam || cfg.mode == Mode::rmsprop) && cfg.adaptive_first_layer_only) {
    modes.assign(layers, Mode::heavy_ball);
    modes[0] = cfg.mode;
  }
  return modes;
}

/// One layer of the stack. `field(x)` evaluates the layer output at x and
/// may be called more than once (lookahead and sam modes).
template <class Field>
LayerState dynamics_step(Field&& field, const LayerState& s, Mode mode, std::size_t t, const DynamicsConfig& cfg,
                         const DynamicsParams& params) {
  const Tensor mu = constant(cfg.mu);
  const Tensor gamma = constant(cfg.gamma);
  LayerState n;
  switch (mode) {
    case Mode::baseline:
      n = baseline_step(field(s.x), s, gamma);
      break;
    case Mode::heavy_ball:
    case Mode::negative:
      n = heavy_ball_step(field(s.x), s, mu, gamma);
      break;
    case Mode::learnable: {
      const Tensor m = params.mu.defined() ? params.mu : mu;
      Tensor g = gamma;
      if (params.gamma.defined()) g = params.gamma;
      if (params.gamma_w.defined()) g = sigmoid(gamma_network(params, s.x));
      n = heavy_ball_step(field(s.x), s, m, g);
      break;
    }
    case Mode::adam:
      n = adam_step(field(s.x), s, cfg.adam_mu, cfg.beta, gamma, cfg.eps, cfg.kappa);
      break;
    case Mode::rmsprop:
      n = rmsprop_step(field(s.x), s, cfg.rms_mu, gamma, cfg.eps);
      break;
    case Mode::robust:
      n = robust_momentum_step(field, s, robust_params(cfg.robust.p, cfg.robust.L, cfg.robust.m_strong));
      break;
    case Mode::nag:
      n = nag_step(field, s, mu, gamma, cfg.nag_lookahead_plus);
      break;
    case Mode::sam:
      n = sam_step(field, s, cfg.rho, gamma);
      break;
    case Mode::time_varying:
      n = heavy_ball_step(field(s.x), s, constant(time_varying_mu(t)), gamma);
      break;
    case Mode::scheduled_restart:
      n = heavy_ball_step(field(s.x), s, constant(restart_mu(t, cfg.restart_period)), gamma);
      break;
    case Mode::zoh: {
      auto [mu_t, gamma_t] = zoh_coefficients(params.delta_raw, params.mu_raw, gamma_network(params, s.x));
      n = heavy_ball_step(field(s.x), s, mu_t, gamma_t);
      break;
    }
    case Mode::complex:
      n = complex_momentum_step(field(s.x), s, cfg.mu, cfg.mu_im, gamma);
      break;
  }
  if (cfg.detach_momentum) {
    n.p = n.p.detach();
    n.p_im = n.p_im.detach();
    n.m = n.m.detach();
  }
  return n;
}

}  // namespace momoe
