#pragma once

// Stability of the linearized momentum recurrence
//   x_{t+1} = x_t - gs x_t + mu (x_t - x_{t-1}),
// whose state (x_{t-1}, x_t) evolves by the companion matrix
//   A = [[0, 1], [-mu, 1 + mu - gs]].
// The recurrence converges iff both eigenvalues of A lie inside the unit
// disc, which happens exactly for mu in (-1, 1) and gs in (0, 2 + 2 mu).
//
// Also here: a dense eigen-solver used to inspect the Jacobian of a real
// layer, which is where gs comes from in practice.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "momoe/moe.hpp"
#include "momoe/tensor.hpp"

namespace momoe {

using cplx = std::complex<double>;

struct CompanionMatrix {
  double mu;
  double gs;  // gamma * sigma, one coordinate

  // Row-major [[a00, a01], [a10, a11]].
  std::array<double, 4> entries() const { return {0.0, 1.0, -mu, 1.0 + mu - gs}; }
  double trace() const { return 1.0 + mu - gs; }
  double determinant() const { return mu; }
};

struct EigenPair {
  cplx l1;
  cplx l2;
};

// Closed-form roots of l^2 - (1 + mu - gs) l + mu. l1 takes the + branch.
inline EigenPair eigenvalues(double mu, double gs) {
  const double b = 1.0 + mu - gs;
  const double disc = b * b - 4.0 * mu;
  if (disc >= 0.0) {
    const double s = std::sqrt(disc);
    return {cplx((b + s) / 2.0, 0.0), cplx((b - s) / 2.0, 0.0)};
  }
  const double s = std::sqrt(-disc);
  return {cplx(b / 2.0, s / 2.0), cplx(b / 2.0, -s / 2.0)};
}

inline double spectral_radius(const EigenPair& e) { return std::max(std::abs(e.l1), std::abs(e.l2)); }

inline double spectral_radius(double mu, double gs) { return spectral_radius(eigenvalues(mu, gs)); }

// Strict inequalities at every boundary.
inline bool analytic_region(double mu, double gs) {
  return mu > -1.0 && mu < 1.0 && gs > 0.0 && gs < 2.0 + 2.0 * mu;
}

struct StabilityVerdict {
  cplx l1, l2;
  double spectral_radius = 0.0;
  bool analytic_stable = false;
  bool empirical_stable = false;
};

struct SimulationConfig {
  std::size_t steps = 500;
  double tau = 1e-3;  // stable when |x_T| < tau |x_0|
};

struct Simulation {
  std::vector<double> trajectory;  // x_0 .. x_T, truncated on overflow
  bool overflow = false;
  bool empirical_stable = false;
};

// Runs the scalar recurrence from x_{-1} = x_0 (zero initial momentum).
inline Simulation simulate_scalar(double mu, double gs, std::size_t steps, double x0,
                                  double tau = SimulationConfig{}.tau) {
  if (steps < 2) throw ContractError("simulate_scalar: need at least 2 steps");
  if (!std::isfinite(mu) || !std::isfinite(gs) || !std::isfinite(x0)) {
    throw ContractError("simulate_scalar: inputs must be finite");
  }
  Simulation out;
  out.trajectory.reserve(steps + 1);
  out.trajectory.push_back(x0);
  double prev = x0, cur = x0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double next = cur - gs * cur + mu * (cur - prev);
    if (!std::isfinite(next) || std::abs(next) > 1e300) {
      out.overflow = true;
      return out;
    }
    prev = cur;
    cur = next;
    out.trajectory.push_back(cur);
  }
  out.empirical_stable = std::abs(cur) < std::abs(x0) * tau;
  return out;
}

inline StabilityVerdict verdict(double mu, double gs, const SimulationConfig& sim = {}) {
  const EigenPair e = eigenvalues(mu, gs);
  StabilityVerdict v;
  v.l1 = e.l1;
  v.l2 = e.l2;
  v.spectral_radius = spectral_radius(e);
  v.analytic_stable = analytic_region(mu, gs);
  v.empirical_stable = simulate_scalar(mu, gs, sim.steps, 1.0, sim.tau).empirical_stable;
  return v;
}

// Asymptotic per-step contraction of the 2-d recurrence, estimated by a
// least-squares line through log ||(x_{t-1}, x_t)|| over the last
// `tail` of `steps` iterations. The state is renormalized every step so
// neither underflow nor overflow can occur.
inline double fitted_decay_rate(double mu, double gs, std::size_t steps = 400, std::size_t tail = 300,
                                std::uint64_t seed = 1) {
  if (tail < 2 || tail > steps) throw ContractError("fitted_decay_rate: need 2 <= tail <= steps");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  double a = n01(rng), b = n01(rng);  // (x_{t-1}, x_t)
  double log_scale = 0.0;
  std::vector<double> ts, ys;
  for (std::size_t t = 1; t <= steps; ++t) {
    const double next = b - gs * b + mu * (b - a);
    a = b;
    b = next;
    const double r = std::hypot(a, b);
    if (r == 0.0) return 0.0;
    log_scale += std::log(r);
    a /= r;
    b /= r;
    if (t > steps - tail) {
      ts.push_back(static_cast<double>(t));
      ys.push_back(log_scale);
    }
  }
  const double n = static_cast<double>(ts.size());
  double st = 0.0, sy = 0.0, stt = 0.0, sty = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    st += ts[i];
    sy += ys[i];
    stt += ts[i] * ts[i];
    sty += ts[i] * ys[i];
  }
  const double slope = (n * sty - st * sy) / (n * stt - st * st);
  return std::exp(slope);
}

/// Regions of the case analysis for gs >= 0; negative gs is outside it.
enum class RegionCase {
  negative_gs,  // gs < 0: an eigenvalue exceeds 1
  case_1a,      // mu >= (1 + sqrt gs)^2: real roots, unstable
  case_1bi,     // mu <= (1 - sqrt gs)^2, 1 + mu - gs >= 0
  case_1bii,    // mu <= (1 - sqrt gs)^2, 1 + mu - gs < 0
  case_2,       // complex roots with |l| = sqrt(mu)
};

inline const char* to_string(RegionCase c) {
  switch (c) {
    case RegionCase::negative_gs: return "negative_gs";
    case RegionCase::case_1a: return "1a";
    case RegionCase::case_1bi: return "1bi";
    case RegionCase::case_1bii: return "1bii";
    case RegionCase::case_2: return "2";
  }
  return "?";
}

inline RegionCase classify(double mu, double gs) {
  if (gs < 0.0) return RegionCase::negative_gs;
  const double r = std::sqrt(gs);
  if (mu >= (1.0 + r) * (1.0 + r)) return RegionCase::case_1a;
  if (mu <= (1.0 - r) * (1.0 - r)) return 1.0 + mu - gs >= 0.0 ? RegionCase::case_1bi : RegionCase::case_1bii;
  return RegionCase::case_2;
}

// Stability predicted by the conditions specific to each case.
inline bool case_prediction(double mu, double gs) {
  switch (classify(mu, gs)) {
    case RegionCase::negative_gs:
    case RegionCase::case_1a:
      return false;
    case RegionCase::case_1bi:
      return gs > 0.0 && std::abs(mu) < 1.0;
    case RegionCase::case_1bii:
      return 2.0 + 2.0 * mu - gs > 0.0 && std::abs(mu) < 1.0;
    case RegionCase::case_2:
      return mu < 1.0;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Sweeps

struct Grid {
  double lo, hi, step;

  // Points lo + i*step up to hi (inclusive within half a step), each snapped
  // to a multiple of 1e-9 so decimal grids land on the nearest double.
  std::vector<double> points() const {
    if (!(step > 0.0) || !(hi >= lo)) throw ContractError("grid: need step > 0 and hi >= lo");
    const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 0.5)) + 1;
    std::vector<double> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(std::round((lo + static_cast<double>(i) * step) * 1e9) / 1e9);
    }
    return out;
  }
};

inline Grid default_mu_grid() { return {-1.5, 1.5, 0.05}; }
inline Grid default_gs_grid() { return {-0.5, 4.5, 0.05}; }

struct SweepRow {
  double mu;
  double gs;
  StabilityVerdict v;
  bool near_boundary;  // |spectral_radius - 1| < guard
};

struct SweepSummary {
  std::size_t cells = 0;
  std::size_t outside_guard = 0;
  std::size_t analytic_vs_spectral_agree = 0;  // over cells outside the guard band
  std::size_t all_three_agree = 0;             // over cells outside the guard band
  double spectral_agreement() const { return outside_guard ? double(analytic_vs_spectral_agree) / double(outside_guard) : 1.0; }
  double empirical_agreement() const { return outside_guard ? double(all_three_agree) / double(outside_guard) : 1.0; }
};

struct SweepResult {
  std::vector<SweepRow> rows;  // mu-major, then gs, both ascending
  SweepSummary summary;
};

inline SweepResult region_sweep(const std::vector<double>& mus, const std::vector<double>& gss,
                                const SimulationConfig& sim = {}, double guard = 1e-2) {
  SweepResult r;
  r.rows.reserve(mus.size() * gss.size());
  for (double mu : mus) {
    for (double gs : gss) {
      SweepRow row{mu, gs, verdict(mu, gs, sim), false};
      row.near_boundary = std::abs(row.v.spectral_radius - 1.0) < guard;
      auto& s = r.summary;
      ++s.cells;
      if (!row.near_boundary) {
        ++s.outside_guard;
        const bool spectral = row.v.spectral_radius < 1.0;
        if (spectral == row.v.analytic_stable) {
          ++s.analytic_vs_spectral_agree;
          if (row.v.empirical_stable == spectral) ++s.all_three_agree;
        }
      }
      r.rows.push_back(row);
    }
  }
  return r;
}

// Number of grid cells in the row `mu` whose spectral radius is below 1,
// times the grid step: the stable gs-measure of that row.
inline double stable_measure(double mu, const std::vector<double>& gss, double step) {
  std::size_t count = 0;
  for (double gs : gss)
    if (analytic_region(mu, gs)) ++count;
  return static_cast<double>(count) * step;
}

inline const char* sweep_csv_header() {
  return "mu,gamma_sigma,lambda1_re,lambda1_im,lambda2_re,lambda2_im,spectral_radius,analytic,empirical";
}

inline std::string sweep_csv_row(const SweepRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d", r.mu, r.gs, r.v.l1.real(),
                r.v.l1.imag(), r.v.l2.real(), r.v.l2.imag(), r.v.spectral_radius, r.v.analytic_stable ? 1 : 0,
                r.v.empirical_stable ? 1 : 0);
  return buf;
}

// ---------------------------------------------------------------------------
// Dense eigenvalues (complex Hessenberg reduction + shifted QR)

using CMatrix = std::vector<std::vector<cplx>>;

namespace detail {

inline void hessenberg(CMatrix& h) {
  const std::size_t n = h.size();
  for (std::size_t k = 0; k + 2 < n; ++k) {
    double norm = 0.0;
    for (std::size_t i = k + 1; i < n; ++i) norm += std::norm(h[i][k]);
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const cplx x0 = h[k + 1][k];
    const cplx phase = std::abs(x0) > 0.0 ? x0 / std::abs(x0) : cplx(1.0, 0.0);
    std::vector<cplx> v(n, 0.0);
    for (std::size_t i = k + 1; i < n; ++i) v[i] = h[i][k];
    v[k + 1] += phase * norm;
    double vn = 0.0;
    for (std::size_t i = k + 1; i < n; ++i) vn += std::norm(v[i]);
    vn = std::sqrt(vn);
    for (std::size_t i = k + 1; i < n; ++i) v[i] /= vn;
    // H <- (I - 2 v v*) H
    for (std::size_t j = 0; j < n; ++j) {
      cplx dot = 0.0;
      for (std::size_t i = k + 1; i < n; ++i) dot += std::conj(v[i]) * h[i][j];
      for (std::size_t i = k + 1; i < n; ++i) h[i][j] -= 2.0 * v[i] * dot;
    }
    // H <- H (I - 2 v v*)
    for (std::size_t i = 0; i < n; ++i) {
      cplx dot = 0.0;
      for (std::size_t j = k + 1; j < n; ++j) dot += h[i][j] * v[j];
      for (std::size_t j = k + 1; j < n; ++j) h[i][j] -= 2.0 * dot * std::conj(v[j]);
    }
    for (std::size_t i = k + 2; i < n; ++i) h[i][k] = 0.0;
  }
}

inline cplx wilkinson_shift(cplx a, cplx b, cplx c, cplx d) {
  const cplx half = (a - d) / 2.0;
  const cplx root = std::sqrt(half * half + b * c);
  const cplx s1 = (a + d) / 2.0 + root, s2 = (a + d) / 2.0 - root;
  return std::abs(s1 - d) < std::abs(s2 - d) ? s1 : s2;
}

}  // namespace detail

// All eigenvalues of a square complex matrix, in the order they deflate.
inline std::vector<cplx> eigenvalues_dense(CMatrix h) {
  const std::size_t n = h.size();
  for (const auto& row : h)
    if (row.size() != n) throw DimensionError("eigenvalues_dense: matrix must be square");
  if (n == 0) return {};
  detail::hessenberg(h);
  const double eps = std::numeric_limits<double>::epsilon();
  double scale = 0.0;
  for (const auto& row : h)
    for (const auto& v : row) scale = std::max(scale, std::abs(v));
  std::vector<cplx> out(n);
  std::size_t hi = n - 1;
  std::size_t iter = 0, since_deflation = 0;
  const std::size_t max_iter = 200 * n;
  while (true) {
    if (hi == 0) {
      out[0] = h[0][0];
      break;
    }
    // Find the start of the active unreduced block.
    std::size_t lo = hi;
    while (lo > 0) {
      const double s = std::abs(h[lo][lo]) + std::abs(h[lo - 1][lo - 1]);
      if (std::abs(h[lo][lo - 1]) <= eps * (s > 0.0 ? s : scale)) {
        h[lo][lo - 1] = 0.0;
        break;
      }
      --lo;
    }
    if (lo == hi) {
      out[hi] = h[hi][hi];
      --hi;
      since_deflation = 0;
      continue;
    }
    if (++iter > max_iter) throw ContractError("eigenvalues_dense: QR iteration did not converge");
    ++since_deflation;
    cplx shift = detail::wilkinson_shift(h[hi - 1][hi - 1], h[hi - 1][hi], h[hi][hi - 1], h[hi][hi]);
    if (since_deflation % 11 == 10) shift = h[hi][hi] + std::abs(h[hi][hi - 1]) * cplx(0.75, 0.4375);
    for (std::size_t i = lo; i <= hi; ++i) h[i][i] -= shift;
    std::vector<std::pair<cplx, cplx>> rot;
    rot.reserve(hi - lo);
    for (std::size_t j = lo; j < hi; ++j) {
      const cplx a = h[j][j], b = h[j + 1][j];
      const double r = std::sqrt(std::norm(a) + std::norm(b));
      cplx c(1.0, 0.0), s(0.0, 0.0);
      if (r > 0.0) {
        c = a / r;
        s = b / r;
      }
      rot.emplace_back(c, s);
      for (std::size_t k = j; k <= hi; ++k) {
        const cplx x = h[j][k], y = h[j + 1][k];
        h[j][k] = std::conj(c) * x + std::conj(s) * y;
        h[j + 1][k] = -s * x + c * y;
      }
    }
    for (std::size_t j = lo; j < hi; ++j) {
      const auto [c, s] = rot[j - lo];
      const std::size_t last = std::min(j + 2, hi);
      for (std::size_t i = lo; i <= last; ++i) {
        const cplx x = h[i][j], y = h[i][j + 1];
        h[i][j] = x * c + y * s;
        h[i][j + 1] = -x * std::conj(s) + y * std::conj(c);
      }
    }
    for (std::size_t i = lo; i <= hi; ++i) h[i][i] += shift;
  }
  return out;
}

inline std::vector<cplx> eigenvalues_dense(const std::vector<std::vector<double>>& a) {
  CMatrix c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i].assign(a[i].begin(), a[i].end());
  return eigenvalues_dense(std::move(c));
}

// Numerical rank of a complex matrix by Gaussian elimination with complete
// pivoting; pivots below tol count as zero.
inline std::size_t numerical_rank(CMatrix a, double tol) {
  const std::size_t m = a.size(), n = m ? a[0].size() : 0;
  std::size_t rank = 0;
  for (std::size_t k = 0; k < std::min(m, n); ++k) {
    std::size_t pr = k, pc = k;
    double best = 0.0;
    for (std::size_t i = k; i < m; ++i)
      for (std::size_t j = k; j < n; ++j)
        if (std::abs(a[i][j]) > best) {
          best = std::abs(a[i][j]);
          pr = i;
          pc = j;
        }
    if (best <= tol) break;
    std::swap(a[k], a[pr]);
    for (auto& row : a) std::swap(row[k], row[pc]);
    for (std::size_t i = k + 1; i < m; ++i) {
      const cplx f = a[i][k] / a[k][k];
      for (std::size_t j = k; j < n; ++j) a[i][j] -= f * a[k][j];
    }
    ++rank;
  }
  return rank;
}

struct JacobianSpectrum {
  std::vector<std::vector<double>> jacobian;  // d(-f_out)/dx, row i = output i
  std::vector<cplx> eigenvalues;
  bool defective_warning = false;
};

inline constexpr std::size_t kJacobianCap = 64;

// Spectrum of the descent-field Jacobian -d f_out / dx of one layer at a
// single token x, with the routing selection held at x. Rows come from one
// reverse pass each.
inline JacobianSpectrum jacobian_spectrum(const SmoeLayer& layer, const Tensor& x, std::size_t cap = kJacobianCap,
                                          double cluster_tol = 1e-6) {
  const std::size_t d = layer.width();
  if (d > cap) {
    throw DimensionError("jacobian_spectrum: width " + std::to_string(d) + " exceeds cap " + std::to_string(cap));
  }
  if (x.size() != d) throw DimensionError("jacobian_spectrum: x must have width " + std::to_string(d));
  const SmoeLayer frozen = layer.frozen();
  Tensor xv = Tensor::vector(x.values(), true);
  const Tensor f = smoe_forward(frozen, xv).f_out;
  JacobianSpectrum out;
  out.jacobian.assign(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i) {
    xv.zero_grad();
    backward(element(f, i));
    const auto g = xv.grad();
    for (std::size_t j = 0; j < d; ++j) out.jacobian[i][j] = -g[j];
  }
  out.eigenvalues = eigenvalues_dense(out.jacobian);

  // Defectiveness: an eigenvalue cluster of size k whose eigenspace has
  // dimension below k.
  double scale = 1.0;
  for (const auto& row : out.jacobian)
    for (double v : row) scale = std::max(scale, std::abs(v));
  const auto& ev = out.eigenvalues;
  std::vector<bool> done(ev.size(), false);
  for (std::size_t i = 0; i < ev.size(); ++i) {
    if (done[i]) continue;
    std::size_t mult = 0;
    cplx centre = 0.0;
    for (std::size_t j = i; j < ev.size(); ++j) {
      if (!done[j] && std::abs(ev[j] - ev[i]) <= cluster_tol * scale) {
        done[j] = true;
        centre += ev[j];
        ++mult;
      }
    }
    if (mult < 2) continue;
    centre /= static_cast<double>(mult);
    CMatrix shifted(d, std::vector<cplx>(d));
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) shifted[r][c] = out.jacobian[r][c] - (r == c ? centre : cplx(0.0));
    const std::size_t nullity = d - numerical_rank(shifted, std::sqrt(cluster_tol) * scale);
    if (nullity < mult) out.defective_warning = true;
  }
  return out;
}

}  // namespace momoe
