#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <numbers>

#include "frami/grad_check.hpp"
#include "frami/losses.hpp"
#include "frami/optim.hpp"
#include "frami/rng.hpp"

using namespace frami;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, bool rg = true, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(shape, std::move(v), rg);
}

Parameter param(std::string name, Tensor t) { return {std::move(name), std::move(t)}; }

void expect_values(const Tensor& t, std::initializer_list<double> expected, double tol = 1e-12) {
  ASSERT_EQ(t.size(), expected.size());
  std::size_t i = 0;
  for (double e : expected) EXPECT_NEAR(t[i++], e, tol);
}

}  // namespace

TEST(Ops, ReluSoftmaxAndConvExamples) {
  expect_values(relu(Tensor({3}, {-1, 0, 2})), {0, 0, 2});
  expect_values(softmax(Tensor({2}, {0, 0})), {0.5, 0.5});

  // 1x1x3x3 ones convolved with a 1x1x2x2 ones kernel: every window sums 4 ones.
  const Tensor y = conv2d(Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 2, 2}, 1.0));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  expect_values(y, {4, 4, 4, 4});
}

TEST(Tensor, ValuesOfTemporaryAreOwned) {
  const Tensor a({3}, {1.0, 2.0, 3.0});
  std::vector<double> seen;
  for (double v : mul_scalar(a, 2.0).values()) seen.push_back(v);
  EXPECT_EQ(seen, (std::vector<double>{2.0, 4.0, 6.0}));
}

TEST(Backward, LinearGradientsIndependentOfBufferAddress) {
  Rng rng(5);
  const std::size_t rows = 32, in = 11, out = 19;
  std::vector<double> xv(rows * in), wv(out * in), bv(out), dyv(rows * out);
  for (auto* v : {&xv, &wv, &bv, &dyv})
    for (auto& e : *v) e = rng.normal();
  std::set<std::vector<double>> results;
  std::vector<std::vector<double>> shift;
  for (std::size_t attempt = 0; attempt < 32; ++attempt) {
    shift.emplace_back(1 + attempt % 7);
    Tensor x({rows, in}, xv, true), w({out, in}, wv, true), b({out}, bv, true);
    backward(sum(mul(linear(x, w, b), Tensor({rows, out}, dyv))));
    std::vector<double> grads(x.grad().begin(), x.grad().end());
    grads.insert(grads.end(), w.grad().begin(), w.grad().end());
    grads.insert(grads.end(), b.grad().begin(), b.grad().end());
    results.insert(grads);
  }
  EXPECT_EQ(results.size(), 1u);
}

TEST(Ops, ShapeAndDomainErrors) {
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(std_axis(Tensor::zeros({4, 1}), 1), DomainError);
  EXPECT_THROW(slice(Tensor::zeros({4}), 0, 3, 2), ShapeError);
  EXPECT_THROW(mse(Tensor::zeros({2}), Tensor::zeros({2, 1})), ShapeError);
}

TEST(Ops, ConvStrideAndPadding) {
  // 1x1x1x5 ramp, kernel [1, 0, -1] with zero padding 1 and stride 2.
  const Tensor x({1, 1, 1, 5}, {1, 2, 3, 4, 5});
  const Tensor w({1, 1, 1, 3}, {1, 0, -1});
  const Tensor y = conv2d(x, w, {.stride_h = 1, .stride_w = 2, .pad_h = 0, .pad_w = 1});
  // windows centered at 0, 2, 4: [0,1,2] -> -2, [2,3,4] -> -2, [4,5,0] -> 4
  expect_values(y, {-2, -2, 4});
}

TEST(Ops, PadReplicateAndUpsample) {
  const Tensor x({1, 3}, {1, 2, 3});
  expect_values(pad_replicate(x, 1, 2, 1), {1, 1, 1, 2, 3, 3});
  expect_values(upsample_nearest(x, 1, 2), {1, 1, 2, 2, 3, 3});
  expect_values(gather_last(x, {{2, 0}}), {3, 1});
}

TEST(Backward, SimpleExamples) {
  Tensor w({1}, {3.0}, true);
  backward(sum(mul(w, w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);

  // repeated backward calls accumulate
  backward(sum(mul(w, w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 12.0);

  Tensor a({3}, {1.0, -2.0, 0.5}, true);
  backward(mse(a, a));
  for (double g : a.grad()) EXPECT_EQ(g, 0.0);

  EXPECT_THROW(backward(Tensor::zeros({2}, true)), ContractError);
}

TEST(Losses, CosineExamples) {
  EXPECT_DOUBLE_EQ(cosine_sim(Tensor({2}, {1, 0}), Tensor({2}, {1, 0})).value.item(), 1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(Tensor({2}, {1, 0}), Tensor({2}, {0, 1})).value.item(), 0.0);
  EXPECT_NEAR(cosine_sim(Tensor({2}, {1, 0}), Tensor({2}, {1, 1})).value.item(), 1.0 / std::sqrt(2.0), 1e-15);

  const auto degenerate = cosine_sim(Tensor({2}, {0, 0}), Tensor({2}, {1, 1}));
  EXPECT_TRUE(degenerate.degenerate);
  EXPECT_EQ(degenerate.value.item(), 0.0);
}

TEST(Losses, CosineSymmetricAndScaleInvariant) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = random_tensor(rng, {6}, false), b = random_tensor(rng, {6}, false);
    const double ab = cosine_sim(a, b).value.item();
    EXPECT_NEAR(ab, cosine_sim(b, a).value.item(), 1e-12);
    EXPECT_NEAR(ab, cosine_sim(mul_scalar(a, 2.0), b).value.item(), 1e-12);
    EXPECT_LE(std::abs(ab), 1.0);
  }
}

TEST(Losses, KldExamples) {
  const Tensor p({1, 2}, {std::log(2.0), 0.0});
  const Tensor q({1, 2}, {0.0, 0.0});
  EXPECT_NEAR(kld(p, p, 1.0).item(), 0.0, 1e-15);
  // KL([2/3, 1/3] || [1/2, 1/2]) in closed form
  const double expected = (2.0 / 3.0) * std::log(4.0 / 3.0) + (1.0 / 3.0) * std::log(2.0 / 3.0);
  EXPECT_NEAR(kld(p, q, 1.0).item(), expected, 1e-14);
  EXPECT_NEAR(expected, 0.0566330, 1e-6);
  EXPECT_THROW(kld(p, q, 0.0), ConfigError);
}

TEST(Losses, KldNonNegativeAndZeroOnSelf) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor p = random_tensor(rng, {3, 5}, false, 3.0), q = random_tensor(rng, {3, 5}, false, 3.0);
    const double tau = rng.uniform(0.1, 5.0);
    EXPECT_GE(kld(p, q, tau).item(), 0.0);
    EXPECT_EQ(kld(p, p, tau).item(), 0.0);
  }
}

TEST(Losses, MseExamples) {
  EXPECT_EQ(mse(Tensor({2}, {0, 0}), Tensor({2}, {1, 1})).item(), 1.0);
  EXPECT_EQ(mse(Tensor({2}, {1, 2}), Tensor({2}, {3, 5})).item(), 6.5);
}

TEST(Losses, CrossEntropyExamples) {
  EXPECT_NEAR(cross_entropy(Tensor({1, 2}, {0, 0}), {0}).item(), std::numbers::ln2, 1e-15);
  const double saturated = cross_entropy(Tensor({1, 2}, {1000, 0}), {0}).item();
  EXPECT_TRUE(std::isfinite(saturated));
  EXPECT_NEAR(saturated, 0.0, 1e-12);
  // hand softmax: -log(e^3 / (e + e^2 + e^3))
  const double hand = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  EXPECT_NEAR(cross_entropy(Tensor({1, 3}, {1, 2, 3}), {2}).item(), hand, 1e-14);
  EXPECT_NEAR(hand, 0.40761, 1e-5);
  EXPECT_THROW(cross_entropy(Tensor({1, 2}, {0, 0}), {2}), IndexError);
}

TEST(Losses, SoftmaxSumsToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor s = softmax(random_tensor(rng, {4, 7}, false, 10.0));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) total += s[r * 7 + j];
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Adam, Examples) {
  Parameter w = param("w", Tensor({1}, {1.0}, true));
  Adam opt({w}, {.lr = 0.1});
  w.tensor.mutable_grad()[0] = 1.0;
  opt.step();
  // bias-corrected first step moves by lr * 1 / (1 + eps)
  EXPECT_NEAR(w.tensor[0], 0.9, 1e-8);
  EXPECT_EQ(w.tensor.grad()[0], 0.0);

  Parameter z = param("z", Tensor({3}, {1.0, 2.0, 3.0}, true));
  Adam opt_z({z}, {.lr = 0.1});
  z.tensor.mutable_grad();
  opt_z.step();
  expect_values(z.tensor, {1.0, 2.0, 3.0}, 0.0);

  Parameter bad = param("layer.weight", Tensor({1}, {1.0}, true));
  bad.tensor.mutable_grad()[0] = std::nan("");
  Adam opt_bad({bad});
  try {
    opt_bad.step();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
}

TEST(Adam, SeededRunsAreBitIdentical) {
  auto run = [] {
    Rng rng(42);
    Parameter w = param("w", random_tensor(rng, {4, 3}));
    const Tensor x = random_tensor(rng, {5, 3}, false);
    Adam opt({w}, {.lr = 0.05});
    std::vector<double> trace;
    for (int i = 0; i < 20; ++i) {
      const Tensor loss = mean(square(matmul(x, transpose(w.tensor))));
      trace.push_back(loss.item());
      backward(loss);
      opt.step();
    }
    trace.insert(trace.end(), w.tensor.values().begin(), w.tensor.values().end());
    return trace;
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------- finite-difference oracle

class GradCheck : public ::testing::TestWithParam<int> {};

TEST_P(GradCheck, ElementwiseAndReductions) {
  Rng rng(100 + GetParam());
  Parameter a = param("a", random_tensor(rng, {3, 4}));
  Parameter b = param("b", random_tensor(rng, {3, 4}));
  std::vector<double> shifted(12);
  for (std::size_t i = 0; i < 12; ++i) shifted[i] = 1.5 + std::abs(b.tensor[i]);
  Parameter c = param("c", Tensor({3, 4}, shifted, true));
  auto build = [&] {
    Tensor t = add(mul(a.tensor, b.tensor), div(a.tensor, c.tensor));
    t = sub(t, exp(mul_scalar(b.tensor, 0.3)));
    t = add(t, log(c.tensor));
    t = add(square(t), relu(add_scalar(a.tensor, 0.1)));
    Tensor r = add(sum_axis(t, 1), mean_axis(t, 1));
    r = add(r, std_axis(t, 1));
    return add(sum(square(r)), mean(expand_last(mean_axis(t, 0), 3)));
  };
  EXPECT_LT(grad_check(build, {a, b, c}).max_rel_error, 1e-5);
}

TEST_P(GradCheck, LinearAlgebra) {
  Rng rng(200 + GetParam());
  Parameter x = param("x", random_tensor(rng, {4, 5}));
  Parameter w = param("w", random_tensor(rng, {3, 5}));
  Parameter bias = param("bias", random_tensor(rng, {3}));
  Parameter m = param("m", random_tensor(rng, {3, 2}));
  Parameter mix = param("mix", random_tensor(rng, {3, 2}));
  Parameter h = param("h", random_tensor(rng, {2, 2, 4}));
  auto build = [&] {
    const Tensor y = linear(x.tensor, w.tensor, bias.tensor);
    const Tensor z = matmul(y, m.tensor);
    const Tensor zt = transpose(z);
    const Tensor mixed = channel_mix(mix.tensor, h.tensor);
    return add(add(sum(square(z)), mean(mul(zt, zt))), sum(square(mixed)));
  };
  EXPECT_LT(grad_check(build, {x, w, bias, m, mix, h}).max_rel_error, 1e-5);
}

TEST_P(GradCheck, LinearLayer) {
  Rng rng(250 + GetParam());
  Parameter x = param("x", random_tensor(rng, {3, 4}));
  Parameter w = param("w", random_tensor(rng, {2, 4}));
  Parameter bias = param("bias", random_tensor(rng, {2}));
  const std::vector<std::size_t> labels{0, 1, 1};
  auto build = [&] { return cross_entropy(linear(x.tensor, w.tensor, bias.tensor), labels); };
  EXPECT_LT(grad_check(build, {x, w, bias}).max_rel_error, 1e-5);
}

TEST_P(GradCheck, Convolution) {
  Rng rng(300 + GetParam());
  Parameter x = param("x", random_tensor(rng, {2, 3, 2, 7}));
  Parameter w = param("w", random_tensor(rng, {4, 3, 2, 3}));
  auto build = [&] {
    const Tensor y = conv2d(x.tensor, w.tensor, {.stride_h = 1, .stride_w = 2, .pad_h = 1, .pad_w = 1});
    return sum(square(y));
  };
  EXPECT_LT(grad_check(build, {x, w}).max_rel_error, 1e-5);
}

TEST_P(GradCheck, BatchNormTrainAndEval) {
  Rng rng(400 + GetParam());
  Parameter x = param("x", random_tensor(rng, {3, 2, 1, 5}));
  Parameter gamma = param("gamma", random_tensor(rng, {2}));
  Parameter beta = param("beta", random_tensor(rng, {2}));
  const Tensor weights = random_tensor(rng, {3, 2, 1, 5}, false);
  auto train = [&] { return sum(mul(batch_norm_train(x.tensor, gamma.tensor, beta.tensor, 1e-5), weights)); };
  EXPECT_LT(grad_check(train, {x, gamma, beta}).max_rel_error, 1e-4);

  const std::vector<double> rm{0.3, -0.2}, rv{1.5, 0.7};
  auto eval = [&] {
    return sum(square(batch_norm_eval(x.tensor, gamma.tensor, beta.tensor, rm, rv, 1e-5)));
  };
  EXPECT_LT(grad_check(eval, {x, gamma, beta}).max_rel_error, 1e-5);

  auto stats = [&] { return add(sum(square(channel_mean(x.tensor))), l2_norm(channel_std(x.tensor, 1e-5))); };
  EXPECT_LT(grad_check(stats, {x}).max_rel_error, 1e-5);
}

TEST_P(GradCheck, SoftmaxFamilyAndLosses) {
  Rng rng(500 + GetParam());
  Parameter p = param("p", random_tensor(rng, {3, 4}));
  Parameter q = param("q", random_tensor(rng, {3, 4}));
  const Tensor w = random_tensor(rng, {3, 4}, false);
  auto build = [&] {
    Tensor t = add(sum(mul(softmax(p.tensor), w)), sum(mul(log_softmax(q.tensor), w)));
    t = add(t, sum(logsumexp_last(p.tensor)));
    t = add(t, kld(p.tensor, q.tensor, 2.0));
    t = add(t, mse(p.tensor, q.tensor));
    return add(t, cross_entropy(q.tensor, {0, 3, 1}));
  };
  EXPECT_LT(grad_check(build, {p, q}).max_rel_error, 1e-5);
}

TEST_P(GradCheck, LayoutAndNormalization) {
  Rng rng(600 + GetParam());
  Parameter a = param("a", random_tensor(rng, {2, 3, 4}));
  Parameter b = param("b", random_tensor(rng, {2, 3, 2}));
  Parameter u = param("u", random_tensor(rng, {5}));
  Parameter v = param("v", random_tensor(rng, {5}));
  const Tensor w = random_tensor(rng, {2, 3, 9}, false);
  auto build = [&] {
    Tensor c = concat({a.tensor, b.tensor, slice(a.tensor, 2, 1, 3)}, 2);
    Tensor t = sum(mul(c, w));
    t = add(t, sum(square(pad_replicate(a.tensor, 2, 2, 1))));
    t = add(t, sum(square(upsample_nearest(b.tensor, 1, 2))));
    t = add(t, sum(square(gather_last(a.tensor, {{3, 0, 0}, {1, 2, 3}}))));
    const Tensor rows = reshape(a.tensor, {4, 6});
    const Tensor n = normalize_rows(rows);
    t = add(t, sum(rowwise_dot(n, reshape(mul_scalar(rows, 0.5), {4, 6}))));
    t = add(t, cosine_sim(u.tensor, v.tensor).value);
    return add(t, l2_norm(b.tensor));
  };
  EXPECT_LT(grad_check(build, {a, b, u, v}).max_rel_error, 1e-5);
}

TEST_P(GradCheck, ThreeLayerNet) {
  Rng rng(700 + GetParam());
  Parameter x = param("x", random_tensor(rng, {4, 3}, false));
  Parameter w1 = param("w1", random_tensor(rng, {6, 3}));
  Parameter b1 = param("b1", random_tensor(rng, {6}));
  Parameter w2 = param("w2", random_tensor(rng, {5, 6}));
  Parameter b2 = param("b2", random_tensor(rng, {5}));
  Parameter w3 = param("w3", random_tensor(rng, {2, 5}));
  Parameter b3 = param("b3", random_tensor(rng, {2}));
  auto build = [&] {
    Tensor h = relu(linear(x.tensor, w1.tensor, b1.tensor));
    h = relu(linear(h, w2.tensor, b2.tensor));
    return cross_entropy(linear(h, w3.tensor, b3.tensor), {0, 1, 1, 0});
  };
  EXPECT_LT(grad_check(build, {w1, b1, w2, b2, w3, b3}).max_rel_error, 1e-5);
}

INSTANTIATE_TEST_SUITE_P(RandomInstances, GradCheck, ::testing::Range(0, 10));

TEST(GradCheckLimits, RejectsLargeGraphs) {
  Parameter big = param("big", Tensor::zeros({10001}, true));
  EXPECT_THROW(grad_check([&] { return sum(big.tensor); }, {big}), ContractError);
}
