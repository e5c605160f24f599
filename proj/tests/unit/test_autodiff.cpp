#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <unordered_map>

#include "momoe/optim.hpp"
#include "momoe/tensor.hpp"
#include "support/finite_difference.hpp"

using namespace momoe;
using momoe::testing::check_gradients;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> vals(const Tensor& t) { return t.values(); }

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  const Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(Tensor::scalar(2.0).size(), 1u);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), DimensionError);
}

TEST(Tensor, InteriorNodesAreImmutable) {
  Tensor a = Tensor::vector({1, 2}, true);
  Tensor b = add(a, a);
  EXPECT_THROW(b.mutable_data(), ContractError);
  EXPECT_NO_THROW(a.mutable_data());
}

TEST(Matmul, IdentityAndDot) {
  EXPECT_EQ(vals(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1, 0}, {0, 1}}))),
            (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).item(), 11.0);
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}}, true);
  Tensor b = Tensor::matrix({{1, 1}, {1, 1}});
  backward(sum(matmul(a, b)));
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), (std::vector<double>{2, 2, 2, 2}));
  a.clear_grad();
  const auto r = check_gradients([&] { return sum(matmul(a, b)); }, {a});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Softmax, Examples) {
  EXPECT_EQ(vals(softmax(Tensor::vector({0, 0}))), (std::vector<double>{0.5, 0.5}));
  const auto s = vals(softmax(Tensor::vector({3, -kInf, 2})));
  const double e = std::exp(1.0);
  EXPECT_NEAR(s[0], e / (e + 1.0), 1e-15);
  EXPECT_EQ(s[1], 0.0);
  EXPECT_NEAR(s[2], 1.0 / (e + 1.0), 1e-15);
  EXPECT_NEAR(s[0], 0.7310586, 1e-7);
  EXPECT_NEAR(s[2], 0.2689414, 1e-7);
  EXPECT_EQ(vals(softmax(Tensor::vector({1000, 1000}))), (std::vector<double>{0.5, 0.5}));
}

TEST(Softmax, DegenerateAndNonFiniteInputs) {
  EXPECT_THROW(softmax(Tensor::vector({-kInf, -kInf})), DegenerateInputError);
  EXPECT_THROW(softmax(Tensor::vector({0.0, std::nan("")})), NonFiniteError);
  EXPECT_THROW(softmax(Tensor::vector({0.0, kInf})), NonFiniteError);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor v = randn({7}, rng, 3.0);
    const auto s = vals(softmax(v));
    double total = 0.0;
    for (double x : s) {
      EXPECT_GE(x, 0.0);
      total += x;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    const auto t = vals(softmax(add_scalar(v, 123.456)));
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], t[i], 1e-12);
  }
}

TEST(Backward, SquareAtThree) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(square(x));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Tensor v = Tensor::vector({0.3, -1.2, 2.0, 0.1}, true);
  backward(sum(softmax(v)));
  for (double g : v.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, LogSumExpComposite) {
  Tensor v = Tensor::vector({0.3, -1.2, 2.0, 0.1}, true);
  // Softmax-weighted mean, then the fused cross-entropy (a logsumexp minus
  // one logit).
  const auto r = check_gradients([&] { return sum(mul(v, softmax(v))); }, {v});
  EXPECT_LT(r.max_rel_error, 1e-5);
  const auto r2 = check_gradients([&] { return cross_entropy(reshape(v, {1, 4}), {2}); }, {v});
  EXPECT_LT(r2.max_rel_error, 1e-5);
}

TEST(Backward, RejectsNonScalarRoot) {
  Tensor v = Tensor::vector({1, 2}, true);
  EXPECT_THROW(backward(add(v, v)), ContractError);
  EXPECT_THROW(backward(Tensor::scalar(1.0)), ContractError);
}

TEST(Backward, SharedSubexpressionsAccumulate) {
  Tensor x = Tensor::scalar(2.0, true);
  const Tensor y = mul(x, x);         // x^2
  backward(add(y, mul(y, x)));        // x^2 + x^3 -> 2x + 3x^2 = 16
  EXPECT_DOUBLE_EQ(x.grad()[0], 16.0);
}

TEST(Backward, RepeatedCallsSumIntoLeaves) {
  Tensor x = Tensor::scalar(3.0, true);
  const Tensor y = square(x);
  backward(y);
  backward(y);
  EXPECT_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  backward(y);
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Graph, EveryNodeFollowsItsParents) {
  Rng rng(5);
  Tensor a = randn({3, 3}, rng, 1.0, true);
  Tensor b = randn({3}, rng, 1.0, true);
  const Tensor h = relu(add_bias(matmul(a, a), b));
  const Tensor root = sum(mul(softmax(h), h));
  const Graph g = Graph::trace(root);
  std::unordered_map<const detail::Node*, std::size_t> pos;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) pos[g.nodes[i].get()] = i;
  EXPECT_EQ(g.nodes.back().get(), root.node().get());
  for (const auto& n : g.nodes) {
    for (const auto& p : n->parents) {
      if (pos.count(p.get())) {
        EXPECT_LT(pos[p.get()], pos[n.get()]);
      }
    }
  }
}

TEST(Backward, EveryReachableLeafGetsAGradient) {
  Rng rng(6);
  Tensor a = randn({2, 2}, rng, 1.0, true), b = randn({2}, rng, 1.0, true), c = randn({2, 2}, rng, 1.0);
  backward(sum(add_bias(matmul(a, c), b)));
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(c.has_grad());
}

// Each differentiable op against central differences at 10 random points.
TEST(GradientCheck, EveryOpAtRandomPoints) {
  Rng rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = randn({3, 4}, rng, 1.0, true);
    Tensor b = randn({3, 4}, rng, 1.0, true);
    Tensor m = randn({4, 2}, rng, 1.0, true);
    Tensor v = randn({4}, rng, 1.0, true);
    Tensor w = randn({3}, rng, 1.0, true);
    Tensor s = Tensor::scalar(0.7 + 0.1 * trial, true);
    Tensor pos = uniform({3, 4}, rng, 0.5, 2.0, true);
    // Weighted sums keep every output entry in play.
    const Tensor probe3x4 = randn({3, 4}, rng, 1.0);
    const Tensor probe3x2 = randn({3, 2}, rng, 1.0);
    auto wsum = [](const Tensor& t, const Tensor& p) { return sum(mul(t, p)); };

    struct Case {
      const char* name;
      std::function<Tensor()> f;
      std::vector<Tensor> leaves;
    };
    const std::vector<Case> cases = {
        {"matmul", [&] { return wsum(matmul(a, m), probe3x2); }, {a, m}},
        {"transpose", [&] { return wsum(transpose(transpose(a)), probe3x4); }, {a}},
        {"reshape", [&] { return wsum(reshape(reshape(a, {4, 3}), {3, 4}), probe3x4); }, {a}},
        {"add", [&] { return wsum(add(a, b), probe3x4); }, {a, b}},
        {"sub", [&] { return wsum(sub(a, b), probe3x4); }, {a, b}},
        {"mul", [&] { return wsum(mul(a, b), probe3x4); }, {a, b}},
        {"divide", [&] { return wsum(divide(a, pos), probe3x4); }, {a, pos}},
        {"add_bias", [&] { return wsum(add_bias(a, v), probe3x4); }, {a, v}},
        {"scale", [&] { return wsum(scale(a, s), probe3x4); }, {a, s}},
        {"scale_rows", [&] { return wsum(scale_rows(a, w), probe3x4); }, {a, w}},
        {"relu", [&] { return wsum(relu(a), probe3x4); }, {a}},
        {"square", [&] { return wsum(square(a), probe3x4); }, {a}},
        {"sqrt", [&] { return wsum(sqrt(pos), probe3x4); }, {pos}},
        {"exp", [&] { return wsum(exp(a), probe3x4); }, {a}},
        {"sigmoid", [&] { return wsum(sigmoid(a), probe3x4); }, {a}},
        {"softplus", [&] { return wsum(softplus(a), probe3x4); }, {a}},
        {"expm1_over", [&] { return wsum(expm1_over(a), probe3x4); }, {a}},
        {"sum", [&] { return sum(mul(a, a)); }, {a}},
        {"mean", [&] { return mean(mul(a, b)); }, {a, b}},
        {"norm", [&] { return norm(a); }, {a}},
        {"row_norms", [&] { return sum(mul(row_norms(a), w)); }, {a, w}},
        {"rms_norm_rows", [&] { return wsum(rms_norm_rows(a), probe3x4); }, {a}},
        {"element", [&] { return mul(element(a, 5), element(a, 7)); }, {a}},
        {"softmax", [&] { return wsum(softmax(a), probe3x4); }, {a}},
        {"topk_mask+softmax", [&] { return wsum(softmax(topk_mask(a, 2)), probe3x4); }, {a}},
        {"gather_rows", [&] { return wsum(gather_rows(a, {2, 0, 2}), probe3x4); }, {a}},
        {"scatter_rows", [&] { return wsum(scatter_rows(gather_rows(a, {0, 1}), {2, 0}, 3), probe3x4); }, {a}},
        {"gather_column", [&] { return sum(mul(gather_column(a, {0, 2, 1}, 3), w)); }, {a, w}},
        {"cross_entropy", [&] { return cross_entropy(a, {1, 3, 0}); }, {a}},
    };
    for (const auto& c : cases) {
      const auto r = check_gradients(c.f, c.leaves);
      EXPECT_LT(r.max_rel_error, 1e-5) << c.name << " trial " << trial << " worst " << r.worst;
    }
  }
}

TEST(Ops, RejectNonFiniteInputs) {
  const Tensor bad = Tensor::vector({1.0, std::nan("")});
  EXPECT_THROW(relu(bad), NonFiniteError);
  EXPECT_THROW(add(bad, bad), NonFiniteError);
  EXPECT_THROW(topk_mask(Tensor::vector({1.0, -kInf}), 1), NonFiniteError);
  EXPECT_THROW(sqrt(Tensor::vector({-1.0})), NonFiniteError);
  EXPECT_THROW(divide(Tensor::vector({1.0}), Tensor::vector({0.0})), NonFiniteError);
}

TEST(Ops, SqrtGradientAtZeroIsZero) {
  Tensor x = Tensor::vector({0.0, 4.0}, true);
  backward(sum(sqrt(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.25);
}

TEST(Ops, Expm1OverSmallArguments) {
  EXPECT_DOUBLE_EQ(expm1_over_value(0.0), 1.0);
  EXPECT_NEAR(expm1_over_value(1e-8), 1.0 + 5e-9, 1e-15);
  EXPECT_NEAR(expm1_over_value(std::log(2.0)), 1.0 / std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus_value(0.0), std::log(2.0), 1e-15);
}

TEST(TopK, Examples) {
  const auto m = vals(topk_mask(Tensor::vector({3, 1, 2}), 2));
  EXPECT_EQ(m[0], 3.0);
  EXPECT_EQ(m[1], -kInf);
  EXPECT_EQ(m[2], 2.0);
  EXPECT_EQ(vals(topk_mask(Tensor::vector({3, 1, 2}), 3)), (std::vector<double>{3, 1, 2}));
  const auto t = vals(topk_mask(Tensor::vector({1, 1, 0}), 1));
  EXPECT_EQ(t[0], 1.0);
  EXPECT_EQ(t[1], -kInf);
  EXPECT_EQ(t[2], -kInf);
  EXPECT_THROW(topk_mask(Tensor::vector({1, 2}), 0), ContractError);
  EXPECT_THROW(topk_mask(Tensor::vector({1, 2}), 3), ContractError);
}

// Exhaustive 3-element enumeration against the rule "an entry is kept iff
// fewer than K entries beat it, counting equal entries at lower indices".
TEST(TopK, TieBreakExhaustive) {
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c)
        for (std::size_t k = 1; k <= 3; ++k) {
          const double g[3] = {double(a), double(b), double(c)};
          const auto out = vals(topk_mask(Tensor::vector({g[0], g[1], g[2]}), k));
          std::size_t kept = 0;
          for (int i = 0; i < 3; ++i) {
            std::size_t ahead = 0;
            for (int j = 0; j < 3; ++j)
              if (g[j] > g[i] || (g[j] == g[i] && j < i)) ++ahead;
            const bool expect = ahead < k;
            EXPECT_EQ(out[i] != -kInf, expect) << a << b << c << " K=" << k << " i=" << i;
            kept += out[i] != -kInf;
          }
          EXPECT_EQ(kept, k);
        }
}

TEST(Optim, SgdStep) {
  Tensor p = Tensor::scalar(0.0, true);
  backward(p);  // d p / d p = 1
  std::vector<Tensor> params{p};
  sgd_step(params, 0.1);
  EXPECT_DOUBLE_EQ(p.item(), -0.1);
}

TEST(Optim, AdamZeroGradsOnlyDecay) {
  Tensor p = Tensor::vector({1.0, -2.0}, true);
  std::vector<Tensor> params{p};
  Adam plain(AdamOptions{});
  for (int i = 0; i < 5; ++i) plain.step(params);
  EXPECT_EQ(p.values(), (std::vector<double>{1.0, -2.0}));
  AdamOptions o;
  o.weight_decay = 0.1;
  Adam decay(o);
  decay.step(params);
  EXPECT_NEAR(p[0], 1.0 * (1.0 - o.lr * 0.1), 1e-15);
}

TEST(Optim, AdamFirstStepIsLr) {
  Tensor p = Tensor::scalar(0.5, true);
  backward(p);
  std::vector<Tensor> params{p};
  Adam adam(AdamOptions{});
  adam.step(params);
  // m_hat = 1, v_hat = 1: the step is lr / (1 + eps).
  EXPECT_NEAR(p.item(), 0.5 - 1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(Optim, NanGradientIsADivergence) {
  Tensor p = Tensor::scalar(0.0, true);
  backward(p);
  std::vector<Tensor> params{p};
  params[0].node()->grad[0] = std::nan("");
  EXPECT_THROW(sgd_step(params, 0.1), TrainingDivergence);
  Adam adam(AdamOptions{});
  EXPECT_THROW(adam.step(params), TrainingDivergence);
}

TEST(Optim, DeterministicUpdates) {
  auto run = [] {
    Rng rng(3);
    Tensor w = randn({4, 4}, rng, 1.0, true);
    std::vector<Tensor> params{w};
    Adam adam(AdamOptions{});
    for (int i = 0; i < 10; ++i) {
      backward(sum(square(matmul(w, w))));
      adam.step(params);
      zero_grads(params);
    }
    return w.values();
  };
  EXPECT_EQ(run(), run());
}
