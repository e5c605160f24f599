#pragma once

// Stacks of SMoE layers wrapped in layer dynamics, and the two task models
// built on them: a quadratic multi-objective task whose experts are exact
// gradient fields, and a small next-token language model.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "momoe/diagnostics.hpp"
#include "momoe/dynamics.hpp"
#include "momoe/mgda.hpp"
#include "momoe/moe.hpp"
#include "momoe/optim.hpp"
#include "momoe/tensor.hpp"

namespace momoe {

struct StackShape {
  std::size_t layers = 6;
  std::size_t width = 64;
  std::size_t experts = 8;
  std::size_t top_k = 2;
  ExpertKind expert = ExpertKind::mlp;
  bool pre_norm = true;
  double expert_scale = 1.0;
};

/// Per-layer record of one forward pass: the first evaluation of each layer.
struct StackTrace {
  std::vector<LayerOutput> outputs;
};

struct MomentumSmoeStack {
  std::vector<SmoeLayer> layers;
  DynamicsConfig dynamics;
  std::vector<Mode> modes;
  std::vector<DynamicsParams> params;  // one entry when shared

  static MomentumSmoeStack make(const StackShape& shape, const DynamicsConfig& dyn, Rng& rng) {
    dyn.validate();
    MomentumSmoeStack s;
    for (std::size_t t = 0; t < shape.layers; ++t) {
      s.layers.push_back(SmoeLayer::make(shape.width, shape.experts, shape.top_k, shape.expert, rng, shape.expert_scale));
      s.layers.back().pre_norm = shape.pre_norm;
    }
    s.configure(dyn);
    return s;
  }

  // Sets dynamics, per-layer modes and fresh dynamics parameters.
  void configure(const DynamicsConfig& dyn) {
    dyn.validate();
    dynamics = dyn;
    modes = layer_modes(dyn, layers.size());
    params.clear();
    const std::size_t copies = dyn.per_layer_params ? layers.size() : 1;
    for (std::size_t i = 0; i < copies; ++i) params.push_back(init_params(dyn, width()));
  }

  std::size_t width() const { return layers.front().width(); }
  std::size_t depth() const { return layers.size(); }

  const DynamicsParams& params_for(std::size_t t) const { return params[params.size() == 1 ? 0 : t]; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers)
      for (auto& p : l.parameters())
        if (p.requires_grad()) out.push_back(p);
    for (const auto& p : params)
      for (auto& q : p.parameters()) out.push_back(q);
    return out;
  }

  // Runs every layer in turn, threading the momentum state through. Any
  // non-finite value is reported as a divergence of the layer that made it.
  Tensor forward(const Tensor& x0, StackTrace* trace = nullptr, const ForwardOptions& opt = {}, long step = -1) const {
    LayerState s = LayerState::start(x0);
    if (trace) trace->outputs.clear();
    for (std::size_t t = 0; t < layers.size(); ++t) {
      bool first = true;
      auto field = [&](const Tensor& x) {
        LayerOutput out = smoe_forward(layers[t], x, opt);
        if (trace && first) trace->outputs.push_back(out);
        first = false;
        return out.f_out;
      };
      try {
        s = dynamics_step(field, s, modes[t], t, dynamics, params_for(t));
      } catch (const NonFiniteError& e) {
        throw TrainingDivergence("layer " + std::to_string(t) + " diverged at step " + std::to_string(step) + ": " +
                                     e.what(),
                                 static_cast<long>(t), step);
      }
      if (!detail::all_finite(s.x.data())) {
        throw TrainingDivergence("layer " + std::to_string(t) + " produced a non-finite state at step " +
                                     std::to_string(step),
                                 static_cast<long>(t), step);
      }
    }
    return s.x;
  }
};

// ---------------------------------------------------------------------------
// Quadratic multi-objective task

struct QuadraticTask {
  ObjectiveSet objectives;
  SmoeLayer layer;  // expert i outputs -H_i (x - c_i); router trainable
};

struct QuadraticSpec {
  std::size_t objectives = 3;
  std::size_t dim = 4;
  double m = 0.1;  // smallest Hessian eigenvalue
  double L = 1.0;  // largest Hessian eigenvalue
  double center_scale = 1.0;
};

namespace detail {

// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
inline Vec random_orthogonal(std::size_t n, Rng& rng) {
  std::normal_distribution<double> n01;
  Vec q(n * n);
  for (auto& v : q) v = n01(rng);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += q[i * n + j] * q[i * n + k];
      for (std::size_t i = 0; i < n; ++i) q[i * n + j] -= d * q[i * n + k];
    }
    double nn = 0.0;
    for (std::size_t i = 0; i < n; ++i) nn += q[i * n + j] * q[i * n + j];
    nn = std::sqrt(nn);
    for (std::size_t i = 0; i < n; ++i) q[i * n + j] /= nn;
  }
  return q;
}

}  // namespace detail

// H = Q diag(sigma) Q^T with sigma log-spaced over [m, L], symmetrized.
inline Vec spectrum_matrix(std::size_t n, double m, double L, Rng& rng) {
  const Vec q = detail::random_orthogonal(n, rng);
  Vec sigma(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    sigma[i] = m * std::pow(L / m, f);
  }
  Vec h(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += q[i * n + k] * sigma[k] * q[j * n + k];
      h[i * n + j] = s;
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) h[i * n + j] = h[j * n + i] = 0.5 * (h[i * n + j] + h[j * n + i]);
  return h;
}

// One linear expert per objective, u_i(x) = -H_i (x - c_i); the expert
// weights are fixed, the router is trainable and routes with K = top_k.
inline QuadraticTask build_quadratic_task(const QuadraticSpec& spec, std::size_t top_k, Rng& rng) {
  if (spec.objectives < 1 || spec.dim < 1) throw ContractError("quadratic task: need at least one objective and dimension");
  QuadraticTask task;
  task.objectives.n = spec.dim;
  std::normal_distribution<double> n01;
  for (std::size_t k = 0; k < spec.objectives; ++k) {
    task.objectives.h.push_back(spectrum_matrix(spec.dim, spec.m, spec.L, rng));
    Vec c(spec.dim);
    for (auto& v : c) v = spec.center_scale * n01(rng);
    task.objectives.c.push_back(std::move(c));
  }
  task.objectives.validate();
  const std::size_t n = spec.dim;
  for (std::size_t k = 0; k < spec.objectives; ++k) {
    const Vec& h = task.objectives.h[k];
    std::vector<double> w(n * n), b(n, 0.0);
    for (std::size_t i = 0; i < n * n; ++i) w[i] = -h[i];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) b[i] += h[i * n + j] * task.objectives.c[k][j];
    task.layer.experts.push_back(Expert::linear_from(Tensor::matrix(n, n, w), Tensor::vector(b)));
  }
  task.layer.router = Router{randn({spec.objectives, n}, rng, 0.1, true), Tensor::zeros({spec.objectives}, true),
                             std::min(top_k, spec.objectives)};
  task.layer.validate();
  return task;
}

// Mean over rows of sum_i F_i(x_row), on tape.
inline Tensor quadratic_loss(const ObjectiveSet& obj, const Tensor& x) {
  const std::size_t n = obj.n;
  Tensor total;
  for (std::size_t k = 0; k < obj.size(); ++k) {
    Vec neg_c(n);
    for (std::size_t i = 0; i < n; ++i) neg_c[i] = -obj.c[k][i];
    const Tensor d = add_bias(x, Tensor::vector(neg_c));
    const Tensor hd = matmul(d, Tensor::matrix(n, n, obj.h[k]));
    const Tensor f = scale(sum(mul(d, hd)), 0.5 / static_cast<double>(x.rows()));
    total = total.defined() ? add(total, f) : f;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Tiny language model

struct TinyLm {
  std::size_t vocab = 128;
  Tensor emb_cur;   // [V x D], current token
  Tensor emb_prev;  // [V x D], previous token
  MomentumSmoeStack stack;
  Tensor head_w;  // [D x V]
  Tensor head_b;  // [V]

  std::size_t sentinel() const { return vocab - 1; }

  static TinyLm make(std::size_t vocab, const StackShape& shape, const DynamicsConfig& dyn, Rng& rng) {
    TinyLm m;
    m.vocab = vocab;
    const std::size_t d = shape.width;
    m.emb_cur = randn({vocab, d}, rng, 1.0, true);
    m.emb_prev = randn({vocab, d}, rng, 1.0, true);
    m.stack = MomentumSmoeStack::make(shape, dyn, rng);
    m.head_w = randn({d, vocab}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    m.head_b = Tensor::zeros({vocab}, true);
    return m;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out{emb_cur, emb_prev};
    for (auto& p : stack.parameters()) out.push_back(p);
    out.push_back(head_w);
    out.push_back(head_b);
    return out;
  }

  Tensor embed(const std::vector<std::size_t>& cur, const std::vector<std::size_t>& prev) const {
    return add(gather_rows(emb_cur, cur), gather_rows(emb_prev, prev));
  }

  Tensor logits(const std::vector<std::size_t>& cur, const std::vector<std::size_t>& prev, StackTrace* trace = nullptr,
                const ForwardOptions& opt = {}, long step = -1) const {
    const Tensor x = stack.forward(embed(cur, prev), trace, opt, step);
    return add_bias(matmul(rms_norm_rows(x), head_w), head_b);
  }
};

/// Positions of a batch of sequences flattened into model inputs/targets.
/// Position i of a sequence reads (s[i], s[i-1]) and predicts s[i+1]; the
/// token before the first is the sentinel.
struct LmBatch {
  std::vector<std::size_t> cur, prev, target;
};

inline LmBatch make_batch(const std::vector<std::vector<std::size_t>>& seqs, const std::vector<std::size_t>& pick,
                          std::size_t sentinel) {
  LmBatch b;
  for (std::size_t k : pick) {
    const auto& s = seqs.at(k);
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      b.cur.push_back(s[i]);
      b.prev.push_back(i == 0 ? sentinel : s[i - 1]);
      b.target.push_back(s[i + 1]);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Norm probes

// Mean ||f_out|| per layer for one forward pass.
inline std::vector<double> layer_output_norms(const MomentumSmoeStack& stack, const Tensor& x0) {
  StackTrace trace;
  stack.forward(x0, &trace);
  std::vector<double> out;
  for (const auto& o : trace.outputs) out.push_back(mean_row_norm(o.f_out));
  return out;
}

inline void record_norms(NormTrace& trace, const MomentumSmoeStack& stack, const Tensor& x0, const std::string& checkpoint) {
  const auto norms = layer_output_norms(stack, x0);
  for (std::size_t t = 0; t < norms.size(); ++t) trace.push_back({t, checkpoint, norms[t]});
}

struct AnalogyReport {
  std::vector<double> mean_norms;  // per layer
  double monotone_fraction = 0.0;  // share of consecutive layer pairs where the norm drops
  bool last_layer_rises = false;   // the final layer increases the norm (overshoot)
};

// Descriptive statistics of how the output norm evolves over depth. Makes
// no pass/fail claim.
inline AnalogyReport analogy_probe(const MomentumSmoeStack& stack, const Tensor& batch) {
  AnalogyReport r;
  r.mean_norms = layer_output_norms(stack, batch);
  const std::size_t n = r.mean_norms.size();
  if (n >= 2) {
    std::size_t drops = 0;
    for (std::size_t t = 1; t < n; ++t)
      if (r.mean_norms[t] < r.mean_norms[t - 1]) ++drops;
    r.monotone_fraction = static_cast<double>(drops) / static_cast<double>(n - 1);
    r.last_layer_rises = r.mean_norms[n - 1] > r.mean_norms[n - 2];
  }
  return r;
}

}  // namespace momoe
