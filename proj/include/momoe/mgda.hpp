#pragma once

// Multiple-gradient descent on quadratic objectives
//   F_i(x) = 1/2 (x - c_i)^T H_i (x - c_i),   i = 1..E.
//
// min_norm_point finds the convex combination of E vectors with the
// smallest norm. A point is Pareto-stationary when that minimum is zero for
// the raw gradients. mgda_step moves along minus the min-norm combination of
// the normalized gradients, which decreases every objective at once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "momoe/tensor.hpp"

namespace momoe {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

/// E quadratics in R^N. H[i] is row-major N x N.
struct ObjectiveSet {
  std::size_t n = 0;
  std::vector<Vec> h;
  std::vector<Vec> c;

  std::size_t size() const { return h.size(); }

  // Symmetric within 1e-12 and positive definite (Cholesky succeeds).
  void validate() const {
    if (h.size() != c.size() || h.empty()) throw DimensionError("objectives: need matching, nonempty H and c lists");
    for (std::size_t k = 0; k < h.size(); ++k) {
      if (h[k].size() != n * n || c[k].size() != n) throw DimensionError("objectives: H or c has the wrong size");
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j)
          if (std::abs(h[k][i * n + j] - h[k][j * n + i]) > 1e-12) {
            throw ContractError("objectives: H_" + std::to_string(k) + " is not symmetric");
          }
      Vec l(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          double s = h[k][i * n + j];
          for (std::size_t q = 0; q < j; ++q) s -= l[i * n + q] * l[j * n + q];
          if (i == j) {
            if (!(s > 0.0)) throw ContractError("objectives: H_" + std::to_string(k) + " is not positive definite");
            l[i * n + i] = std::sqrt(s);
          } else {
            l[i * n + j] = s / l[j * n + j];
          }
        }
      }
    }
  }

  double value(std::size_t k, const Vec& x) const {
    Vec d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - c[k][i];
    return 0.5 * dot(d, gradient(k, x));
  }

  // H_k (x - c_k)
  Vec gradient(std::size_t k, const Vec& x) const {
    if (x.size() != n) throw DimensionError("objectives: x has the wrong width");
    Vec g(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i] += h[k][i * n + j] * (x[j] - c[k][j]);
    return g;
  }
};

inline constexpr double kZeroGradient = 1e-12;

struct GradientSet {
  std::vector<Vec> raw;
  std::vector<Vec> normalized;  // zero vector where `zero` is set
  std::vector<bool> zero;       // ||f_i|| <= 1e-12: objective i is stationary on its own
};

inline GradientSet local_gradients(const ObjectiveSet& obj, const Vec& x) {
  GradientSet g;
  for (std::size_t k = 0; k < obj.size(); ++k) {
    Vec f = obj.gradient(k, x);
    const double nf = norm2(f);
    const bool z = nf <= kZeroGradient;
    Vec u(f.size(), 0.0);
    if (!z)
      for (std::size_t i = 0; i < f.size(); ++i) u[i] = f[i] / nf;
    g.raw.push_back(std::move(f));
    g.normalized.push_back(std::move(u));
    g.zero.push_back(z);
  }
  return g;
}

struct MinNormOptions {
  double gap_tol = 1e-10;
  std::size_t max_iter = 10000;
  bool exact_finish = true;
};

struct MinNormResult {
  Vec alpha;  // on the simplex
  Vec v;      // sum_i alpha_i v_i
  double norm = 0.0;
  double gap = 0.0;  // Frank-Wolfe duality gap <v, v - v_s> at exit
  std::size_t iterations = 0;
  bool converged = false;
};

namespace detail {

// Solves the symmetric KKT system [G_S 1; 1^T 0] [l; m] = [0; 1] by Gaussian
// elimination with partial pivoting. Returns false when it is singular.
inline bool affine_min_norm(const std::vector<Vec>& g, const std::vector<std::size_t>& s, Vec& out) {
  const std::size_t m = s.size(), n = m + 1;
  std::vector<Vec> a(n, Vec(n + 1, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) a[i][j] = g[s[i]][s[j]];
    a[i][m] = 1.0;
    a[m][i] = 1.0;
  }
  a[m][n] = 1.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < m; ++i) scale = std::max(scale, g[s[i]][s[i]]);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    if (std::abs(a[piv][c]) <= 1e-14 * std::max(scale, 1.0)) return false;
    std::swap(a[piv], a[c]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k <= n; ++k) a[r][k] -= f * a[c][k];
    }
  }
  out.assign(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) out[i] = a[i][n] / a[i][i];
  return true;
}

// Wolfe's corral method on the Gram matrix: exact in finitely many steps.
// Used to finish when Frank-Wolfe stalls with the origin inside the hull.
inline Vec wolfe_min_norm(const std::vector<Vec>& g, std::size_t start, double gap_tol, std::size_t max_iter) {
  const std::size_t e = g.size();
  std::vector<std::size_t> s{start};
  Vec w{1.0};
  auto full = [&] {
    Vec a(e, 0.0);
    for (std::size_t i = 0; i < s.size(); ++i) a[s[i]] = w[i];
    return a;
  };
  for (std::size_t it = 0; it < max_iter; ++it) {
    const Vec a = full();
    Vec ga(e, 0.0);
    for (std::size_t i = 0; i < e; ++i)
      for (std::size_t j = 0; j < e; ++j) ga[i] += g[i][j] * a[j];
    const double vv = dot(a, ga);
    std::size_t j = 0;
    for (std::size_t i = 1; i < e; ++i)
      if (ga[i] < ga[j]) j = i;
    if (vv - ga[j] <= gap_tol || std::find(s.begin(), s.end(), j) != s.end()) break;
    s.push_back(j);
    w.push_back(0.0);
    for (std::size_t minor = 0; minor < e + 1; ++minor) {
      Vec l;
      if (!affine_min_norm(g, s, l)) {
        s.pop_back();
        w.pop_back();
        return full();
      }
      if (*std::min_element(l.begin(), l.end()) > 0.0) {
        w = l;
        break;
      }
      double theta = 1.0;
      for (std::size_t i = 0; i < s.size(); ++i)
        if (l[i] <= 0.0 && w[i] - l[i] > 0.0) theta = std::min(theta, w[i] / (w[i] - l[i]));
      for (std::size_t i = 0; i < s.size(); ++i) w[i] += theta * (l[i] - w[i]);
      std::size_t keep = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (w[i] > 1e-15) {
          s[keep] = s[i];
          w[keep] = w[i];
          ++keep;
        }
      }
      s.resize(keep);
      w.resize(keep);
      double total = 0.0;
      for (double x : w) total += x;
      for (double& x : w) x /= total;
    }
  }
  return full();
}

}  // namespace detail

// Frank-Wolfe with away steps on the Gram matrix. Each step is an exact
// line search along a segment between the current point and one vertex.
// If the gap is still open after max_iter steps (the origin deep inside the
// hull makes the linear rate very slow), an exact corral solve takes over and
// is kept when it is no worse. converged reports the final gap test.
inline MinNormResult min_norm_point(const std::vector<Vec>& vs, const MinNormOptions& opt = {}) {
  const std::size_t e = vs.size();
  if (e == 0) throw ContractError("min_norm_point: need at least one vector");
  for (const auto& v : vs)
    if (v.size() != vs[0].size()) throw DimensionError("min_norm_point: vectors differ in length");

  std::vector<Vec> g(e, Vec(e));
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t j = 0; j <= i; ++j) g[i][j] = g[j][i] = dot(vs[i], vs[j]);

  MinNormResult r;
  r.alpha.assign(e, 0.0);
  std::size_t start = 0;
  for (std::size_t i = 1; i < e; ++i)
    if (g[i][i] < g[start][start]) start = i;
  r.alpha[start] = 1.0;

  Vec ga(e);  // G alpha
  auto refresh = [&] {
    for (std::size_t i = 0; i < e; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < e; ++j) s += g[i][j] * r.alpha[j];
      ga[i] = s;
    }
  };
  refresh();

  for (r.iterations = 0; r.iterations < opt.max_iter; ++r.iterations) {
    const double vv = dot(r.alpha, ga);
    std::size_t s = 0;
    for (std::size_t i = 1; i < e; ++i)
      if (ga[i] < ga[s]) s = i;
    r.gap = vv - ga[s];
    if (r.gap <= opt.gap_tol) {
      r.converged = true;
      break;
    }
    std::size_t a = e;
    for (std::size_t i = 0; i < e; ++i)
      if (r.alpha[i] > 0.0 && (a == e || ga[i] > ga[a])) a = i;
    const double away_gap = ga[a] - vv;

    if (r.gap >= away_gap) {
      // Toward vertex s: minimize ||(1-t) v + t v_s||, t in [0, 1].
      const double denom = vv - 2.0 * ga[s] + g[s][s];
      const double t = denom > 0.0 ? std::clamp((vv - ga[s]) / denom, 0.0, 1.0) : 1.0;
      for (auto& al : r.alpha) al *= 1.0 - t;
      r.alpha[s] += t;
    } else {
      // Away from vertex a: v + t (v - v_a), t in [0, alpha_a / (1 - alpha_a)].
      const double t_max = r.alpha[a] / (1.0 - r.alpha[a]);
      const double denom = vv - 2.0 * ga[a] + g[a][a];
      const double t = denom > 0.0 ? std::clamp((ga[a] - vv) / denom, 0.0, t_max) : t_max;
      for (auto& al : r.alpha) al *= 1.0 + t;
      r.alpha[a] -= t;
      if (t == t_max) r.alpha[a] = 0.0;
    }
    for (auto& al : r.alpha) al = std::max(al, 0.0);
    double total = 0.0;
    for (double al : r.alpha) total += al;
    for (auto& al : r.alpha) al /= total;
    refresh();
  }

  if (!r.converged && opt.exact_finish) {
    const Vec fw = r.alpha;
    const double fw_norm = dot(r.alpha, ga);
    r.alpha = detail::wolfe_min_norm(g, start, opt.gap_tol, 4 * e + 16);
    refresh();
    if (dot(r.alpha, ga) > fw_norm) {
      r.alpha = fw;
      refresh();
    }
    const double vv = dot(r.alpha, ga);
    r.gap = vv - *std::min_element(ga.begin(), ga.end());
    r.converged = r.gap <= opt.gap_tol;
  }

  r.v.assign(vs[0].size(), 0.0);
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t j = 0; j < r.v.size(); ++j) r.v[j] += r.alpha[i] * vs[i][j];
  r.norm = norm2(r.v);
  return r;
}

inline bool is_pareto_stationary(const ObjectiveSet& obj, const Vec& x, double tol) {
  if (!(tol > 0.0)) throw ContractError("is_pareto_stationary: tol must be positive");
  return min_norm_point(local_gradients(obj, x).raw).norm < tol;
}

struct MgdaStep {
  Vec x_next;
  MinNormResult direction;
  std::vector<bool> dropped;  // objectives excluded because their gradient vanished
  std::vector<std::size_t> used;
};

// x - gamma * sum_i alpha*_i f_i over the normalized (or raw) gradients.
// Objectives whose gradient vanishes are left out of the hull; when all of
// them vanish x is returned unchanged.
inline MgdaStep mgda_step(const ObjectiveSet& obj, const Vec& x, double gamma, bool normalize = true) {
  const GradientSet gs = local_gradients(obj, x);
  MgdaStep out;
  out.dropped = gs.zero;
  std::vector<Vec> hull;
  for (std::size_t k = 0; k < obj.size(); ++k) {
    if (normalize && gs.zero[k]) continue;
    out.used.push_back(k);
    hull.push_back(normalize ? gs.normalized[k] : gs.raw[k]);
  }
  if (!normalize) out.dropped.assign(obj.size(), false);
  out.x_next = x;
  if (hull.empty()) return out;
  out.direction = min_norm_point(hull);
  for (std::size_t i = 0; i < x.size(); ++i) out.x_next[i] = x[i] - gamma * out.direction.v[i];
  return out;
}

}  // namespace momoe
