#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "momoe/experiment.hpp"
#include "momoe/moe.hpp"
#include "support/finite_difference.hpp"

using namespace momoe;
using momoe::testing::check_gradients;

namespace {

SmoeLayer linear_layer(std::size_t d, std::size_t e, std::size_t k, Rng& rng) {
  SmoeLayer l = SmoeLayer::make(d, e, k, ExpertKind::linear, rng);
  for (auto& ex : l.experts) ex.b1 = randn({d}, rng, 0.5, true);
  l.router.bias = randn({e}, rng, 0.5, true);
  return l;
}

// Dense oracle: every expert evaluated, masked softmax weights computed by a
// plain loop from the raw scores.
std::vector<double> dense_oracle(const SmoeLayer& l, const std::vector<double>& x) {
  const std::size_t d = x.size(), e = l.num_experts(), k = l.router.top_k;
  std::vector<double> g(e);
  for (std::size_t i = 0; i < e; ++i) {
    double s = l.router.bias[i];
    for (std::size_t j = 0; j < d; ++j) s += l.router.weight.at(i, j) * x[j];
    g[i] = s;
  }
  std::vector<bool> keep(e, false);
  for (std::size_t i = 0; i < e; ++i) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < e; ++j)
      if (g[j] > g[i] || (g[j] == g[i] && j < i)) ++ahead;
    keep[i] = ahead < k;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < e; ++i)
    if (keep[i]) mx = std::max(mx, g[i]);
  std::vector<double> w(e, 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < e; ++i)
    if (keep[i]) z += (w[i] = std::exp(g[i] - mx));
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < e; ++i) {
    const auto& ex = l.experts[i];
    for (std::size_t c = 0; c < d; ++c) {
      double u = ex.b1[c];
      for (std::size_t r = 0; r < d; ++r) u += x[r] * ex.w1.at(r, c);
      out[c] += (w[i] / z) * u;
    }
  }
  return out;
}

}  // namespace

TEST(Router, UniformWeightsWhenScoresTie) {
  Router r{Tensor::zeros({4, 3}), Tensor::zeros({4}), 4};
  const auto d = route(r, Tensor::vector({1, 2, 3}));
  for (double w : d.weights.data()) EXPECT_EQ(w, 0.25);
}

TEST(Router, BiasOnlyExample) {
  Router r{Tensor::zeros({3, 2}), Tensor::vector({3, 1, 2}), 2};
  const auto d = route(r, Tensor::vector({0.4, -0.2}));
  EXPECT_NEAR(d.weights[0], 0.7310586, 1e-7);
  EXPECT_EQ(d.weights[1], 0.0);
  EXPECT_NEAR(d.weights[2], 0.2689414, 1e-7);
  EXPECT_EQ(d.selected[0], (std::vector<std::size_t>{0, 2}));
}

TEST(Router, SingleSelectionHasWeightExactlyOne) {
  Rng rng(1);
  Router r = Router::make(5, 4, 1, rng);
  const auto d = route(r, randn({6, 4}, rng, 1.0));
  for (std::size_t t = 0; t < 6; ++t) {
    ASSERT_EQ(d.selected[t].size(), 1u);
    EXPECT_EQ(d.weights.at(t, d.selected[t][0]), 1.0);
  }
}

TEST(Router, InvalidK) {
  Rng rng(1);
  EXPECT_THROW(Router::make(3, 2, 0, rng), ContractError);
  EXPECT_THROW(Router::make(3, 2, 4, rng), ContractError);
}

TEST(Router, ExactlyKNonzeroWeightsSummingToOne) {
  Rng rng(2);
  for (std::size_t k = 1; k <= 6; ++k) {
    Router r = Router::make(6, 5, k, rng);
    const auto d = route(r, randn({20, 5}, rng, 2.0));
    for (std::size_t t = 0; t < 20; ++t) {
      std::size_t nz = 0;
      double total = 0.0;
      for (std::size_t i = 0; i < 6; ++i) {
        const double w = d.weights.at(t, i);
        EXPECT_GE(w, 0.0);
        nz += w > 0.0;
        total += w;
      }
      EXPECT_EQ(nz, k);
      EXPECT_NEAR(total, 1.0, 1e-12);
      // Selected indices are the k largest scores.
      for (std::size_t i : d.selected[t])
        for (std::size_t j = 0; j < 6; ++j)
          if (std::find(d.selected[t].begin(), d.selected[t].end(), j) == d.selected[t].end()) {
            EXPECT_GE(d.scores.at(t, i), d.scores.at(t, j));
          }
    }
  }
}

TEST(Smoe, ZeroExpertsGiveZeroOutput) {
  Rng rng(3);
  SmoeLayer l = SmoeLayer::make(3, 4, 2, ExpertKind::linear, rng);
  for (auto& e : l.experts) e = Expert::linear_from(Tensor::zeros({3, 3}), Tensor::zeros({3}));
  const Tensor f = smoe_forward(l, Tensor::vector({1, 2, 3})).f_out;
  for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Smoe, SingleSelectedExpertIsReturnedExactly) {
  Rng rng(4);
  SmoeLayer l = SmoeLayer::make(4, 3, 1, ExpertKind::mlp, rng);
  const Tensor x = randn({4}, rng, 1.0);
  const auto out = smoe_forward(l, x);
  const std::size_t i = out.decision.selected[0][0];
  EXPECT_EQ(out.f_out.values(), reshape(l.experts[i].forward(reshape(x, {1, 4})), {4}).values());
}

TEST(Smoe, MatchesDenseLoopOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    SmoeLayer l = linear_layer(6, 4, 2, rng);
    const Tensor x = randn({8, 6}, rng, 1.0);
    const Tensor f = smoe_forward(l, x).f_out;
    for (std::size_t t = 0; t < 8; ++t) {
      std::vector<double> row(x.data().begin() + t * 6, x.data().begin() + (t + 1) * 6);
      const auto ref = dense_oracle(l, row);
      for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(f.at(t, j), ref[j], 1e-12);
    }
  }
}

TEST(Smoe, OnlySelectedExpertsAreEvaluated) {
  Rng rng(6);
  SmoeLayer l = SmoeLayer::make(4, 5, 2, ExpertKind::mlp, rng);
  const auto out = smoe_forward(l, randn({7, 4}, rng, 1.0));
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t i = 0; i < 5; ++i) {
      const bool sel = std::find(out.decision.selected[t].begin(), out.decision.selected[t].end(), i) !=
                       out.decision.selected[t].end();
      EXPECT_EQ(std::isnan(out.expert_norms[t * 5 + i]), !sel);
    }
}

TEST(Moe, EqualsSmoeWithKEqualE) {
  Rng rng(7);
  SmoeLayer l = SmoeLayer::make(5, 4, 2, ExpertKind::mlp, rng);
  const Tensor x = randn({6, 5}, rng, 1.0);
  SmoeLayer full = l;
  full.router.top_k = 4;
  EXPECT_EQ(moe_forward(l, x).f_out.values(), smoe_forward(full, x).f_out.values());
}

TEST(Moe, SingleExpertIsItsOutput) {
  Rng rng(8);
  SmoeLayer l = SmoeLayer::make(3, 1, 1, ExpertKind::mlp, rng);
  const Tensor x = randn({2, 3}, rng, 1.0);
  EXPECT_EQ(moe_forward(l, x).f_out.values(), l.experts[0].forward(x).values());
}

TEST(Moe, OutputNormBoundedByLargestExpertNorm) {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    SmoeLayer l = SmoeLayer::make(4, 5, 5, ExpertKind::mlp, rng);
    const auto out = moe_forward(l, randn({3, 4}, rng, 1.0));
    for (std::size_t t = 0; t < 3; ++t) {
      double mx = 0.0, f = 0.0;
      for (std::size_t i = 0; i < 5; ++i) mx = std::max(mx, out.expert_norms[t * 5 + i]);
      for (std::size_t j = 0; j < 4; ++j) f += out.f_out.at(t, j) * out.f_out.at(t, j);
      EXPECT_LE(std::sqrt(f), mx * (1.0 + 1e-12));
    }
  }
}

TEST(PlainResidual, Examples) {
  Rng rng(10);
  SmoeLayer l = SmoeLayer::make(3, 3, 2, ExpertKind::mlp, rng);
  const Tensor x = randn({3}, rng, 1.0);
  const Tensor f = smoe_forward(l, x).f_out;
  const auto one = plain_residual_step(l, x, 1.0).values();
  const auto half = plain_residual_step(l, x, 0.5).values();
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(one[j], x[j] + f[j]);
    EXPECT_NEAR(half[j] - x[j], 0.5 * (one[j] - x[j]), 1e-15);
  }
  EXPECT_THROW(plain_residual_step(l, x, 0.0), ContractError);
  SmoeLayer z = l;
  for (auto& e : z.experts) {
    e.b2 = Tensor::zeros({3}, true);
    e.w2 = Tensor::zeros({12, 3}, true);
  }
  EXPECT_EQ(plain_residual_step(z, x, 1.0).values(), x.values());
}

TEST(Smoe, GradientsReachRouterAndExperts) {
  Rng rng(11);
  SmoeLayer l = SmoeLayer::make(3, 2, 2, ExpertKind::mlp, rng);
  const Tensor x = randn({4, 3}, rng, 1.0);
  const Tensor probe = randn({4, 3}, rng, 1.0);
  std::vector<Tensor> leaves = l.parameters();
  const auto r = check_gradients([&] { return sum(mul(smoe_forward(l, x).f_out, probe)); }, leaves);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
  backward(sum(mul(smoe_forward(l, x).f_out, probe)));
  EXPECT_TRUE(l.router.weight.has_grad());
  double gnorm = 0.0;
  for (double g : l.router.weight.grad()) gnorm += g * g;
  EXPECT_GT(gnorm, 0.0);
}

TEST(Smoe, GradientWithSparseSelectionHoldsSetFixed) {
  Rng rng(12);
  SmoeLayer l = linear_layer(4, 5, 2, rng);
  const Tensor x = randn({6, 4}, rng, 1.0);
  const Tensor probe = randn({6, 4}, rng, 1.0);
  const auto r = check_gradients([&] { return sum(mul(smoe_forward(l, x).f_out, probe)); }, l.parameters());
  EXPECT_LT(r.max_rel_error, 1e-5) << r.worst;
}

TEST(Smoe, DenseDiagnosticsLeaveOutputsBitIdentical) {
  Rng rng(13);
  SmoeLayer l = SmoeLayer::make(8, 6, 2, ExpertKind::mlp, rng);
  l.pre_norm = true;
  const Tensor x = randn({10, 8}, rng, 1.0);
  const auto a = smoe_forward(l, x);
  const auto b = smoe_forward(l, x, ForwardOptions{true});
  EXPECT_EQ(a.f_out.values(), b.f_out.values());
  EXPECT_EQ(a.decision.selected, b.decision.selected);
  for (double n : b.expert_norms) EXPECT_FALSE(std::isnan(n));
}

TEST(Smoe, ShapeErrors) {
  Rng rng(14);
  SmoeLayer l = SmoeLayer::make(3, 2, 1, ExpertKind::linear, rng);
  EXPECT_THROW(smoe_forward(l, Tensor::zeros({4})), DimensionError);
  EXPECT_THROW(smoe_forward(l, Tensor::zeros({2, 4})), DimensionError);
}

TEST(Checkpoint, LayerParametersRoundTripBitExact) {
  Rng rng(15);
  MomentumSmoeStack s = MomentumSmoeStack::make(StackShape{2, 5, 3, 2}, DynamicsConfig{}, rng);
  const fs::path dir = fs::temp_directory_path() / "momoe_ckpt_test";
  fs::create_directories(dir);
  ExperimentConfig cfg;
  save_checkpoint(dir / "c.json", cfg, named_parameters(s));
  const Checkpoint c = load_checkpoint(dir / "c.json");
  Rng other(99);
  MomentumSmoeStack t = MomentumSmoeStack::make(StackShape{2, 5, 3, 2}, DynamicsConfig{}, other);
  restore(c, named_parameters(t));
  const auto a = named_parameters(s), b = named_parameters(t);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.shape(), b[i].second.shape());
    EXPECT_EQ(a[i].second.values(), b[i].second.values()) << a[i].first;
  }
  fs::remove_all(dir);
}
