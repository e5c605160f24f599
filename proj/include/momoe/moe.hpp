#pragma once

// Routers, experts and the (sparse) mixture-of-experts layer.
//
// A layer maps a batch of tokens X [B x D] to its output f_out [B x D],
//   f_out[b] = sum_i w_i(x_b) * u_i(x_b),   w = softmax(topk_mask(W x_b + b, K)).
// Only the K selected experts are evaluated for a token. f_out is the
// residual branch; every dynamics wrapper consumes it as the descent
// direction.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "momoe/tensor.hpp"

namespace momoe {

enum class ExpertKind { mlp, linear };

inline const char* to_string(ExpertKind k) { return k == ExpertKind::mlp ? "mlp" : "linear"; }

/// Expert network u_i : R^D -> R^D.
///
/// mlp:    relu(x W1 + b1) W2 + b2, hidden width 4D.
/// linear: x W + b.
struct Expert {
  ExpertKind kind = ExpertKind::mlp;
  Tensor w1, b1, w2, b2;  // linear experts use w1, b1 only

  std::size_t width() const { return w1.shape()[0]; }

  static Expert make(ExpertKind kind, std::size_t d, Rng& rng, double out_scale = 1.0) {
    Expert e;
    e.kind = kind;
    if (kind == ExpertKind::mlp) {
      const std::size_t h = 4 * d;
      e.w1 = randn({d, h}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
      e.b1 = Tensor::zeros({h}, true);
      e.w2 = randn({h, d}, rng, out_scale / std::sqrt(static_cast<double>(h)), true);
      e.b2 = Tensor::zeros({d}, true);
    } else {
      e.w1 = randn({d, d}, rng, out_scale / std::sqrt(static_cast<double>(d)), true);
      e.b1 = Tensor::zeros({d}, true);
    }
    return e;
  }

  static Expert linear_from(Tensor w, Tensor b) {
    Expert e;
    e.kind = ExpertKind::linear;
    e.w1 = std::move(w);
    e.b1 = std::move(b);
    return e;
  }

  Tensor forward(const Tensor& x) const {
    if (kind == ExpertKind::linear) return add_bias(matmul(x, w1), b1);
    return add_bias(matmul(relu(add_bias(matmul(x, w1), b1)), w2), b2);
  }

  std::vector<Tensor> parameters() const {
    if (kind == ExpertKind::linear) return {w1, b1};
    return {w1, b1, w2, b2};
  }
};

/// Affine router g(x) = W x + b with TopK selection.
struct Router {
  Tensor weight;  // [E x D]
  Tensor bias;    // [E]
  std::size_t top_k = 2;

  std::size_t experts() const { return weight.shape()[0]; }
  std::size_t width() const { return weight.shape()[1]; }

  void validate() const {
    if (weight.rank() != 2 || bias.rank() != 1 || bias.size() != weight.shape()[0]) {
      throw DimensionError("router: W must be [E x D] and b must be [E]");
    }
    if (top_k < 1 || top_k > experts()) {
      throw ContractError("router: K=" + std::to_string(top_k) + " outside [1, " +
                          std::to_string(experts()) + "]");
    }
  }

  static Router make(std::size_t e, std::size_t d, std::size_t k, Rng& rng) {
    Router r{randn({e, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true), Tensor::zeros({e}, true), k};
    r.validate();
    return r;
  }

  std::vector<Tensor> parameters() const { return {weight, bias}; }
};

/// Routing outcome for a batch of B tokens.
struct RouterDecision {
  Tensor scores;                                   // g(x), [B x E]
  Tensor weights;                                  // softmax over the kept scores, [B x E]
  std::vector<std::vector<std::size_t>> selected;  // per token, ascending expert index

  std::size_t tokens() const { return selected.size(); }
};

namespace detail {

inline Tensor as_batch(const Tensor& x, std::size_t d, const char* who) {
  if (x.rank() == 1 && x.size() == d) return reshape(x, {1, d});
  if (x.rank() == 2 && x.shape()[1] == d) return x;
  throw DimensionError(std::string(who) + ": expected width " + std::to_string(d) + ", got " +
                       shape_str(x.shape()));
}

}  // namespace detail

inline RouterDecision route(const Router& router, const Tensor& x) {
  router.validate();
  const Tensor xb = detail::as_batch(x, router.width(), "route");
  RouterDecision d;
  d.scores = add_bias(matmul(xb, transpose(router.weight)), router.bias);
  d.weights = softmax(topk_mask(d.scores, router.top_k));
  const std::size_t b = xb.shape()[0], e = router.experts();
  const auto s = d.scores.data();
  d.selected.reserve(b);
  for (std::size_t i = 0; i < b; ++i) d.selected.push_back(topk_indices(s.subspan(i * e, e), router.top_k));
  return d;
}

struct SmoeLayer {
  Router router;
  std::vector<Expert> experts;
  bool pre_norm = false;  // route and evaluate experts on rms_norm_rows(x)

  std::size_t width() const { return router.width(); }
  std::size_t num_experts() const { return experts.size(); }

  void validate() const {
    router.validate();
    if (experts.size() != router.experts()) {
      throw DimensionError("smoe: router scores " + std::to_string(router.experts()) + " experts but layer has " +
                           std::to_string(experts.size()));
    }
    for (const auto& e : experts) {
      if (e.width() != width()) throw DimensionError("smoe: expert width differs from router width");
    }
  }

  static SmoeLayer make(std::size_t d, std::size_t e, std::size_t k, ExpertKind kind, Rng& rng,
                        double expert_scale = 1.0) {
    SmoeLayer layer;
    layer.router = Router::make(e, d, k, rng);
    for (std::size_t i = 0; i < e; ++i) layer.experts.push_back(Expert::make(kind, d, rng, expert_scale));
    layer.validate();
    return layer;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out = router.parameters();
    for (const auto& e : experts)
      for (auto& p : e.parameters()) out.push_back(p);
    return out;
  }

  // Copy with every parameter detached; used for Jacobians and probes.
  SmoeLayer frozen() const {
    SmoeLayer c = *this;
    c.router.weight = router.weight.detach();
    c.router.bias = router.bias.detach();
    for (auto& e : c.experts) {
      e.w1 = e.w1.detach();
      e.b1 = e.b1.detach();
      if (e.kind == ExpertKind::mlp) {
        e.w2 = e.w2.detach();
        e.b2 = e.b2.detach();
      }
    }
    return c;
  }
};

struct ForwardOptions {
  // Evaluate every expert on every token so norm ranks can be recorded.
  // The extra evaluations are off the tape and never touch f_out.
  bool dense_diagnostics = false;
};

struct LayerOutput {
  Tensor f_out;             // same shape as the input
  RouterDecision decision;
  std::vector<double> expert_norms;  // [B x E] row-major, ||u_i(x_b)||; NaN where not evaluated
};

inline LayerOutput smoe_forward(const SmoeLayer& layer, const Tensor& x, const ForwardOptions& opt = {}) {
  layer.validate();
  const std::size_t d = layer.width(), e = layer.num_experts();
  const Tensor xb = detail::as_batch(x, d, "smoe_forward");
  const std::size_t b = xb.shape()[0];
  const Tensor h = layer.pre_norm ? rms_norm_rows(xb) : xb;

  LayerOutput out;
  out.decision = route(layer.router, h);
  out.expert_norms.assign(b * e, std::numeric_limits<double>::quiet_NaN());

  std::vector<std::vector<std::size_t>> tokens(e);
  for (std::size_t t = 0; t < b; ++t)
    for (std::size_t i : out.decision.selected[t]) tokens[i].push_back(t);

  Tensor acc;
  for (std::size_t i = 0; i < e; ++i) {
    if (tokens[i].empty()) continue;
    const Tensor u = layer.experts[i].forward(gather_rows(h, tokens[i]));
    const auto ud = u.data();
    for (std::size_t r = 0; r < tokens[i].size(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += ud[r * d + j] * ud[r * d + j];
      out.expert_norms[tokens[i][r] * e + i] = std::sqrt(s);
    }
    const Tensor gated = scale_rows(u, gather_column(out.decision.weights, tokens[i], i));
    const Tensor spread = scatter_rows(gated, tokens[i], b);
    acc = acc.defined() ? add(acc, spread) : spread;
  }

  if (opt.dense_diagnostics) {
    const Tensor hd = h.detach();
    const SmoeLayer fz = layer.frozen();
    for (std::size_t i = 0; i < e; ++i) {
      const Tensor u = fz.experts[i].forward(hd);
      const auto ud = u.data();
      for (std::size_t t = 0; t < b; ++t) {
        if (!std::isnan(out.expert_norms[t * e + i])) continue;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += ud[t * d + j] * ud[t * d + j];
        out.expert_norms[t * e + i] = std::sqrt(s);
      }
    }
  }

  out.f_out = x.rank() == 1 ? reshape(acc, {d}) : acc;
  return out;
}

// Dense mixture: the same layer with every expert selected.
inline LayerOutput moe_forward(const SmoeLayer& layer, const Tensor& x, const ForwardOptions& opt = {}) {
  SmoeLayer dense = layer;
  dense.router.top_k = layer.num_experts();
  return smoe_forward(dense, x, opt);
}

// sum_i w_i u_i(x) with caller-supplied mixing weights, one per expert.
// Experts with weight exactly zero are skipped.
inline Tensor combine_with_weights(const SmoeLayer& layer, const Tensor& x, const std::vector<double>& w) {
  layer.validate();
  if (w.size() != layer.num_experts()) throw DimensionError("combine_with_weights: one weight per expert required");
  const Tensor h = layer.pre_norm ? rms_norm_rows(detail::as_batch(x, layer.width(), "combine_with_weights")) : x;
  Tensor acc;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == 0.0) continue;
    Tensor u = layer.experts[i].forward(h.rank() == 1 ? reshape(h, {1, h.size()}) : h);
    if (x.rank() == 1) u = reshape(u, {x.size()});
    const Tensor term = scale(u, w[i]);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc.defined() ? acc : Tensor::zeros(x.shape());
}

// Momentum-free residual update x + gamma * f_out.
inline Tensor plain_residual_step(const SmoeLayer& layer, const Tensor& x, double gamma) {
  if (!(gamma > 0.0)) throw ContractError("plain_residual_step: gamma must be positive");
  return add(x, scale(smoe_forward(layer, x).f_out, gamma));
}

}  // namespace momoe
