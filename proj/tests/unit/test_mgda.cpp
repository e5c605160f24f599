#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "momoe/mgda.hpp"

using namespace momoe;

namespace {

std::vector<Vec> random_vectors(std::size_t e, std::size_t n, std::mt19937_64& rng, double shift = 0.0) {
  std::normal_distribution<double> n01;
  std::vector<Vec> vs(e, Vec(n));
  for (auto& v : vs)
    for (std::size_t j = 0; j < n; ++j) v[j] = n01(rng) + (j == 0 ? shift : 0.0);
  return vs;
}

Eigen::MatrixXd gram(const std::vector<Vec>& vs) {
  const auto e = static_cast<Eigen::Index>(vs.size());
  Eigen::MatrixXd g(e, e);
  for (Eigen::Index i = 0; i < e; ++i)
    for (Eigen::Index j = 0; j < e; ++j) g(i, j) = dot(vs[i], vs[j]);
  return g;
}

// Simplex grid at step 1/div. The quadratic form is updated incrementally
// along the innermost coordinate so E = 4 at div = 1000 stays cheap.
double brute_force_norm(const std::vector<Vec>& vs, int div) {
  const Eigen::MatrixXd g = gram(vs);
  const std::size_t e = vs.size();
  const double h = 1.0 / div;
  double best = 1e300;
  std::vector<int> c(e, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t i, int left) {
    if (i + 2 == e) {
      // Coordinates i and i+1 share `left`; a = fixed part + t e_i + (left - t) e_{i+1}.
      Eigen::VectorXd base = Eigen::VectorXd::Zero(Eigen::Index(e));
      for (std::size_t k = 0; k < i; ++k) base[Eigen::Index(k)] = c[k] * h;
      const Eigen::VectorXd gb = g * base;
      const double bb = base.dot(gb);
      const auto a = Eigen::Index(i), b = Eigen::Index(i + 1);
      for (int t = 0; t <= left; ++t) {
        const double x = t * h, y = (left - t) * h;
        const double q = bb + 2.0 * (x * gb[a] + y * gb[b]) + x * x * g(a, a) + 2.0 * x * y * g(a, b) + y * y * g(b, b);
        best = std::min(best, q);
      }
      return;
    }
    for (int v = 0; v <= left; ++v) {
      c[i] = v;
      rec(i + 1, left - v);
    }
  };
  if (e == 1) return std::sqrt(g(0, 0));
  rec(0, div);
  return std::sqrt(std::max(best, 0.0));
}

// Exact oracle: the minimum over every support set S of the affine-hull
// minimizer, kept when its weights are nonnegative.
double active_set_norm(const std::vector<Vec>& vs) {
  const Eigen::MatrixXd g = gram(vs);
  const std::size_t e = vs.size();
  double best = 1e300;
  for (std::size_t mask = 1; mask < (std::size_t(1) << e); ++mask) {
    std::vector<Eigen::Index> idx;
    for (std::size_t k = 0; k < e; ++k)
      if (mask >> k & 1) idx.push_back(Eigen::Index(k));
    const auto m = Eigen::Index(idx.size());
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + 1, m + 1);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) kkt(i, j) = 2.0 * g(idx[i], idx[j]);
      kkt(i, m) = 1.0;
      kkt(m, i) = 1.0;
    }
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + 1);
    rhs[m] = 1.0;
    const Eigen::VectorXd sol = kkt.completeOrthogonalDecomposition().solve(rhs);
    if ((kkt * sol - rhs).norm() > 1e-8) continue;
    Eigen::VectorXd a = sol.head(m);
    if (a.minCoeff() < -1e-12) continue;
    Eigen::VectorXd full = Eigen::VectorXd::Zero(Eigen::Index(e));
    for (Eigen::Index i = 0; i < m; ++i) full[idx[i]] = a[i];
    best = std::min(best, full.dot(g * full));
  }
  return std::sqrt(std::max(best, 0.0));
}

void expect_on_simplex(const Vec& a) {
  double s = 0.0;
  for (double x : a) {
    EXPECT_GE(x, 0.0);
    s += x;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
}

ObjectiveSet random_objectives(std::size_t e, std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  ObjectiveSet o;
  o.n = n;
  for (std::size_t k = 0; k < e; ++k) {
    Vec b(n * n);
    for (double& v : b) v = n01(rng);
    Vec h(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t q = 0; q < n; ++q) h[i * n + j] += b[i * n + q] * b[j * n + q];
        if (i == j) h[i * n + j] += 0.5;
      }
    o.h.push_back(h);
    Vec c(n);
    for (double& v : c) v = n01(rng);
    o.c.push_back(c);
  }
  return o;
}

}  // namespace

TEST(MinNorm, HandExamples) {
  const MinNormResult orth = min_norm_point({{1, 0}, {0, 1}});
  EXPECT_NEAR(orth.alpha[0], 0.5, 1e-9);
  EXPECT_NEAR(orth.norm, 1.0 / std::sqrt(2.0), 1e-9);
  const MinNormResult opp = min_norm_point({{2, 0}, {-1, 0}});
  EXPECT_NEAR(opp.norm, 0.0, 1e-10);
  EXPECT_NEAR(opp.alpha[0], 1.0 / 3.0, 1e-9);
  const MinNormResult one = min_norm_point({{3, 4}});
  EXPECT_EQ(one.alpha, Vec{1.0});
  EXPECT_EQ(one.norm, 5.0);
  // Dominated vertex: the short vector already satisfies the optimality test.
  const MinNormResult dom = min_norm_point({{1, 0}, {3, 1}});
  EXPECT_NEAR(dom.alpha[0], 1.0, 1e-12);
  EXPECT_TRUE(dom.converged);
}

TEST(MinNorm, Errors) {
  EXPECT_THROW(min_norm_point({}), ContractError);
  EXPECT_THROW(min_norm_point({{1, 0}, {1}}), DimensionError);
  MinNormOptions capped;
  capped.max_iter = 0;
  capped.gap_tol = 0.0;
  capped.exact_finish = false;
  EXPECT_FALSE(min_norm_point({{1, 0}, {0, 1}}, capped).converged);
}

// Closed-form projection of the origin onto the segment [v1, v2].
TEST(MinNorm, SegmentProjectionForTwoVectors) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto vs = random_vectors(2, 2 + i % 7, rng, i % 3 == 0 ? 2.0 : 0.0);
    Vec d(vs[0].size());
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = vs[0][j] - vs[1][j];
    const double t = std::clamp(-dot(vs[1], d) / dot(d, d), 0.0, 1.0);
    Vec p(d.size());
    for (std::size_t j = 0; j < d.size(); ++j) p[j] = vs[1][j] + t * d[j];
    EXPECT_NEAR(min_norm_point(vs).norm, norm2(p), 1e-9);
  }
}

TEST(MinNorm, MatchesSimplexGridBruteForce) {
  std::mt19937_64 rng(2);
  for (std::size_t e : {2u, 3u}) {
    for (std::size_t n = 2; n <= 8; ++n) {
      for (int rep = 0; rep < 3; ++rep) {
        const auto vs = random_vectors(e, n, rng, rep == 0 ? 1.5 : 0.0);
        const MinNormResult r = min_norm_point(vs);
        const double brute = brute_force_norm(vs, 1000);
        EXPECT_GE(brute, r.norm - 1e-9) << "E=" << e << " N=" << n;
        EXPECT_NEAR(r.norm, brute, 1e-5) << "E=" << e << " N=" << n;
        expect_on_simplex(r.alpha);
      }
    }
  }
}

TEST(MinNorm, FourVectorsAgainstBruteForce) {
  std::mt19937_64 rng(3);
  for (std::size_t n : {3u, 8u}) {
    const auto vs = random_vectors(4, n, rng, 1.0);
    const MinNormResult r = min_norm_point(vs);
    EXPECT_NEAR(r.norm, brute_force_norm(vs, 1000), 1e-5) << "N=" << n;
  }
}

TEST(MinNorm, MatchesActiveSetOracle) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 300; ++i) {
    const std::size_t e = 2 + i % 5, n = 2 + (i / 5) % 7;
    const auto vs = random_vectors(e, n, rng, (i % 4) * 0.7);
    const MinNormResult r = min_norm_point(vs);
    ASSERT_TRUE(r.converged);
    EXPECT_NEAR(r.norm, active_set_norm(vs), 1e-7) << "E=" << e << " N=" << n;
  }
}

TEST(MinNorm, CommonDescentCondition) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 300; ++i) {
    const auto vs = random_vectors(2 + i % 6, 2 + i % 7, rng, (i % 3) * 1.0);
    const MinNormResult r = min_norm_point(vs);
    expect_on_simplex(r.alpha);
    const double vv = dot(r.v, r.v);
    for (const auto& v : vs) EXPECT_GE(dot(r.v, v), vv - 1e-9);
  }
}

// Origin well inside the hull (E > N + 1) is where plain Frank-Wolfe stalls.
TEST(MinNorm, OriginInsideHullConverges) {
  std::mt19937_64 rng(10);
  for (int i = 0; i < 400; ++i) {
    const std::size_t n = 2 + i % 4;
    const auto vs = random_vectors(n + 2 + i % 3, n, rng);
    const MinNormResult r = min_norm_point(vs);
    EXPECT_TRUE(r.converged) << i;
    EXPECT_LE(r.gap, 1e-10);
    // Weak duality: ||v||^2 - opt^2 <= gap.
    const double opt = active_set_norm(vs);
    EXPECT_LE(r.norm * r.norm - opt * opt, r.gap + 1e-12);
  }
}

TEST(MinNorm, DuplicateAndPermutedInputs) {
  std::mt19937_64 rng(6);
  auto vs = random_vectors(3, 4, rng, 1.0);
  const double base = min_norm_point(vs).norm;
  vs.push_back(vs[1]);
  EXPECT_NEAR(min_norm_point(vs).norm, base, 1e-9);
  std::swap(vs[0], vs[3]);
  EXPECT_NEAR(min_norm_point(vs).norm, base, 1e-9);
}

TEST(Objectives, ValidationErrors) {
  ObjectiveSet o{2, {{1, 0.5, 0.4, 1}}, {{0, 0}}};
  EXPECT_THROW(o.validate(), ContractError);
  ObjectiveSet nd{2, {{1, 0, 0, -1}}, {{0, 0}}};
  EXPECT_THROW(nd.validate(), ContractError);
  ObjectiveSet sz{2, {{1, 0, 0, 1}}, {{0, 0, 0}}};
  EXPECT_THROW(sz.validate(), DimensionError);
  ObjectiveSet ok{2, {{2, 0.5, 0.5, 1}}, {{0, 1}}};
  EXPECT_NO_THROW(ok.validate());
  EXPECT_THROW(ok.gradient(0, {1.0}), DimensionError);
}

TEST(Objectives, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const ObjectiveSet o = random_objectives(3, 5, rng);
  o.validate();
  const Vec x{0.1, -0.4, 1.2, 0.0, 0.7};
  for (std::size_t k = 0; k < 3; ++k) {
    const Vec g = o.gradient(k, x);
    for (std::size_t i = 0; i < 5; ++i) {
      Vec up = x, dn = x;
      up[i] += 1e-6;
      dn[i] -= 1e-6;
      EXPECT_NEAR(g[i], (o.value(k, up) - o.value(k, dn)) / 2e-6, 1e-6);
    }
  }
}

TEST(Pareto, TwoQuadraticStationaryExample) {
  const ObjectiveSet o{2, {{1, 0, 0, 1}, {1, 0, 0, 1}}, {{0, 0}, {1, 0}}};
  const MinNormResult r = min_norm_point(local_gradients(o, {0.3, 0.0}).raw);
  EXPECT_NEAR(r.norm, 0.0, 1e-10);
  EXPECT_NEAR(r.alpha[0], 0.7, 1e-9);
  EXPECT_TRUE(is_pareto_stationary(o, {0.3, 0.0}, 1e-8));
  EXPECT_FALSE(is_pareto_stationary(o, {0.3, 0.5}, 1e-8));
  EXPECT_FALSE(is_pareto_stationary(o, {1.5, 0.0}, 1e-8));
  EXPECT_THROW(is_pareto_stationary(o, {0.3, 0.0}, 0.0), ContractError);
}

TEST(Pareto, MinimizerOfOneObjectiveIsStationary) {
  std::mt19937_64 rng(8);
  const ObjectiveSet o = random_objectives(3, 4, rng);
  const GradientSet g = local_gradients(o, o.c[1]);
  EXPECT_TRUE(g.zero[1]);
  EXPECT_FALSE(g.zero[0]);
  EXPECT_NEAR(norm2(g.normalized[0]), 1.0, 1e-12);
  EXPECT_EQ(norm2(g.normalized[1]), 0.0);
  EXPECT_TRUE(is_pareto_stationary(o, o.c[1], 1e-10));
}

TEST(Step, DecreasesEveryObjective) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t e = 2 + inst % 3, n = 2 + inst % 7;
    const ObjectiveSet o = random_objectives(e, n, rng);
    Vec x(n);
    for (double& v : x) v = 3.0 * n01(rng);
    const MgdaStep s = mgda_step(o, x, 1e-4);
    if (s.direction.norm < 1e-6) continue;
    for (std::size_t k = 0; k < e; ++k) EXPECT_LT(o.value(k, s.x_next), o.value(k, x)) << inst << " " << k;
  }
}

TEST(Step, DropsVanishingGradientsAndStopsWhenAllVanish) {
  const ObjectiveSet o{2, {{1, 0, 0, 1}, {2, 0, 0, 2}}, {{0, 0}, {0, 0}}};
  const MgdaStep all = mgda_step(o, {0.0, 0.0}, 0.5);
  EXPECT_EQ(all.x_next, (Vec{0.0, 0.0}));
  EXPECT_TRUE(all.used.empty());

  const ObjectiveSet one{2, {{1, 0, 0, 1}, {1, 0, 0, 1}}, {{0, 0}, {1, 1}}};
  const MgdaStep s = mgda_step(one, {0.0, 0.0}, 0.1);
  EXPECT_TRUE(s.dropped[0]);
  ASSERT_EQ(s.used, std::vector<std::size_t>{1});
  // Only objective 2 remains, with unit gradient (-1, -1)/sqrt 2.
  EXPECT_NEAR(s.x_next[0], 0.1 / std::sqrt(2.0), 1e-12);

  const MgdaStep raw = mgda_step(one, {0.0, 0.0}, 0.1, false);
  EXPECT_EQ(raw.used.size(), 2u);
  EXPECT_NEAR(norm2(raw.x_next), 0.0, 1e-12);  // min-norm of {0, (-1,-1)} is 0
}
