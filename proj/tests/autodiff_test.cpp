// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <memory>

#include "support.hpp"

using namespace legoflow;
using lftest::gradcheck;
using lftest::random_tensor;

namespace {

constexpr double kTol = 1e-4;

// Reduces any output to a scalar through an MSE against a fixed target, so
// every output element receives a distinct upstream gradient.
Var reduce(Tape<double>& t, Var y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return mse(t, y, random_tensor(t.value(y).shape(), rng));
}

}  // namespace

TEST(Matmul, MatchesEigenProduct) {
  Rng rng(1);
  auto a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  Tape<double> t;
  const auto& c = t.value(matmul(t, t.constant(a), t.constant(b)));
  Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> A(a.data().data(), 5, 7), B(b.data().data(), 7, 3);
  Eigen::Matrix<double, -1, -1, Eigen::RowMajor> C = A * B;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(c(i, j), C(i, j), 1e-12);
}

TEST(Matmul, RejectsInnerMismatch) {
  Tape<double> t;
  EXPECT_THROW(matmul(t, t.constant(BasicTensor<double>({2, 3})), t.constant(BasicTensor<double>({2, 3}))),
               DimensionError);
}

TEST(Gradients, Matmul) {
  Rng rng(2);
  auto r = gradcheck({random_tensor({4, 5}, rng), random_tensor({5, 3}, rng)},
                     [](Tape<double>& t, const std::vector<Var>& v) { return reduce(t, matmul(t, v[0], v[1])); });
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_EQ(r.checked, 35u);
}

TEST(Gradients, AddBiasAndAdd) {
  Rng rng(3);
  auto r = gradcheck({random_tensor({4, 3}, rng), random_tensor({3}, rng), random_tensor({4, 3}, rng)},
                     [](Tape<double>& t, const std::vector<Var>& v) {
                       return reduce(t, add(t, add_bias(t, v[0], v[1]), v[2]));
                     });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradients, ReluAwayFromKink) {
  Rng rng(4);
  auto r = gradcheck({random_tensor({6, 4}, rng)},
                     [](Tape<double>& t, const std::vector<Var>& v) { return reduce(t, relu(t, v[0])); });
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_GT(r.checked, 20u);
}

TEST(Gradients, ScaleAndReshape) {
  Rng rng(5);
  auto r = gradcheck({random_tensor({3, 4}, rng)}, [](Tape<double>& t, const std::vector<Var>& v) {
    return reduce(t, reshape(t, scale(t, v[0], 2.5), {6, 2}));
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradients, WeightedByRoutingWeight) {
  Rng rng(6);
  auto r = gradcheck({random_tensor({3, 4}, rng), random_tensor({3}, rng)},
                     [](Tape<double>& t, const std::vector<Var>& v) { return reduce(t, weighted(t, v[0], v[1], 1)); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradients, BatchNormWithConstantStatistics) {
  Rng rng(7);
  const std::vector<double> mean{0.1, -0.3, 0.5}, var{1.2, 0.4, 2.0};
  auto r = gradcheck({random_tensor({5, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)},
                     [&](Tape<double>& t, const std::vector<Var>& v) {
                       return reduce(t, bn_apply<double>(t, v[0], mean, var, v[1], v[2], 1e-5));
                     });
  EXPECT_LT(r.max_rel_error, kTol);
}

// Statistics recomputed from the perturbed input inside the function, so the
// finite differences see the full dependence on the batch.
TEST(Gradients, BatchNormThroughBatchStatistics) {
  Rng rng(12);
  const auto target = random_tensor({6, 3}, rng);
  auto r = gradcheck({random_tensor({6, 3}, rng, 2.0), random_tensor({3}, rng), random_tensor({3}, rng)},
                     [&](Tape<double>& t, const std::vector<Var>& v) {
                       const BnMoments m = moments_of(bn_local_stats(t.value(v[0])));
                       return mse(t, bn_apply<double>(t, v[0], m.mean, m.var, v[1], v[2], 1e-5, BnBackward::exact),
                                  target);
                     }, 1e-5);
  EXPECT_EQ(r.skipped, 0u);
  EXPECT_LT(r.max_rel_error, kTol);
}

// Rows split over two tapes: with the means of dY and dY * xhat reduced over
// both, each tape's input gradient equals that of the concatenated batch.
TEST(Gradients, BatchNormSharedAcrossTapes) {
  Rng rng(13);
  const auto xa = random_tensor({3, 2}, rng, 2.0), xb = random_tensor({5, 2}, rng, 2.0);
  const auto all = concat_rows(xa, xb);
  const BnMoments m = moments_of(bn_local_stats(all));
  const auto gamma = random_tensor({2}, rng), beta = random_tensor({2}, rng);
  Rng tr(14);
  const auto target = random_tensor({8, 2}, tr);

  Tape<double> whole;
  Var xw = whole.variable(all);
  Var yw = bn_apply<double>(whole, xw, m.mean, m.var, whole.constant(gamma), whole.constant(beta), 1e-5,
                            BnBackward::exact);
  // Sum of squared errors so the split halves add up to the whole.
  whole.backward(scale(whole, mse(whole, yw, target), 16.0));
  const auto expected = whole.grad(xw);

  std::vector<BnGradSums> sums;
  std::vector<std::unique_ptr<Tape<double>>> tapes;
  std::vector<Var> xs, losses;
  std::vector<std::shared_ptr<BnGradMoments>> slots;
  std::size_t offset = 0;
  for (const auto* part : {&xa, &xb}) {
    auto& t = *tapes.emplace_back(std::make_unique<Tape<double>>());
    auto slot = slots.emplace_back(std::make_shared<BnGradMoments>());
    Var x = xs.emplace_back(t.variable(*part));
    Var y = bn_apply<double>(t, x, m.mean, m.var, t.constant(gamma), t.constant(beta), 1e-5, BnBackward::exact, slot);
    BasicTensor<double> tgt({part->rows(), 2});
    for (std::size_t i = 0; i < part->rows(); ++i)
      for (std::size_t j = 0; j < 2; ++j) tgt(i, j) = target(offset + i, j);
    offset += part->rows();
    Var loss = scale(t, mse(t, y, tgt), static_cast<double>(2 * part->rows()));
    t.backward_begin(loss);
    t.backward_until(y.id + 1);
    BasicTensor<double> xhat(part->shape());
    for (std::size_t i = 0; i < part->rows(); ++i)
      for (std::size_t j = 0; j < 2; ++j) xhat(i, j) = ((*part)(i, j) - m.mean[j]) / std::sqrt(m.var[j] + 1e-5);
    sums.push_back(bn_grad_sums(xhat, t.grad_at(y.id).data().data()));
  }
  const BnGradMoments global = syncbn_grad_reduce(sums);
  for (std::size_t p = 0; p < 2; ++p) {
    *slots[p] = global;
    tapes[p]->backward_until(0);
  }
  const auto ga = tapes[0]->grad(xs[0]), gb = tapes[1]->grad(xs[1]);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(ga(i, j), expected(i, j), 1e-12);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(gb(i, j), expected(3 + i, j), 1e-12);
}

TEST(Gradients, GumbelSoftmax) {
  Rng rng(8);
  std::vector<double> noise{0.3, -0.2, 1.1, 0.0};
  for (double tau : {5.0, 1.0, 0.3}) {
    auto r = gradcheck({random_tensor({4}, rng)}, [&](Tape<double>& t, const std::vector<Var>& v) {
      return reduce(t, gumbel_softmax<double>(t, v[0], noise, tau));
    });
    EXPECT_LT(r.max_rel_error, kTol) << "tau " << tau;
  }
}

TEST(Gradients, SoftmaxCrossEntropy) {
  Rng rng(9);
  const std::vector<int> labels{0, 2, 1, 2};
  auto r = gradcheck({random_tensor({4, 3}, rng)}, [&](Tape<double>& t, const std::vector<Var>& v) {
    return softmax_cross_entropy<double>(t, v[0], labels);
  });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradients, MeanSquaredError) {
  Rng rng(10);
  auto r = gradcheck({random_tensor({4, 2}, rng)},
                     [](Tape<double>& t, const std::vector<Var>& v) { return reduce(t, v[0]); });
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(CrossEntropy, MatchesLogSumExp) {
  Tape<double> t;
  auto logits = BasicTensor<double>::matrix({{1.0, 2.0, 3.0}});
  const std::vector<int> label{2};
  const double got = t.value(softmax_cross_entropy<double>(t, t.constant(logits), label))[0];
  EXPECT_NEAR(got, std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0, 1e-12);
}

TEST(CrossEntropy, RejectsOutOfRangeLabel) {
  Tape<double> t;
  const std::vector<int> label{3};
  EXPECT_THROW(softmax_cross_entropy<double>(t, t.constant(BasicTensor<double>({1, 3})), label), ValueError);
}

TEST(Tape, BackwardTwiceIsAnError) {
  Tape<double> t;
  Var x = t.variable(BasicTensor<double>::vector({1.0, 2.0}));
  Var y = mse(t, x, BasicTensor<double>::vector({0.0, 0.0}));
  t.backward(y);
  EXPECT_THROW(t.backward(y), StateError);
}

TEST(Tape, StagedBackwardEqualsOneShot) {
  Rng rng(15);
  auto a = random_tensor({4, 3}, rng), b = random_tensor({3, 2}, rng);
  auto run = [&](bool staged) {
    Tape<double> t;
    Var x = t.variable(a);
    Var h = relu(t, matmul(t, x, t.constant(b)));
    Var loss = reduce(t, h);
    if (staged) {
      t.backward_begin(loss);
      t.backward_until(h.id);
      t.backward_until(0);
    } else {
      t.backward(loss);
    }
    return t.grad(x);
  };
  EXPECT_EQ(max_abs_diff(run(true), run(false)), 0.0);
  Tape<double> t;
  EXPECT_THROW(t.backward_until(0), StateError);
}

TEST(Tape, BackwardNeedsScalarRoot) {
  Tape<double> t;
  Var x = t.variable(BasicTensor<double>::vector({1.0, 2.0}));
  EXPECT_THROW(t.backward(scale(t, x, 2.0)), DimensionError);
}

TEST(Tape, NonFiniteOutputIsReported) {
  Tape<double> t;
  Var x = t.variable(BasicTensor<double>::vector({1e308, 1e308}));
  EXPECT_THROW(scale(t, x, 10.0), NonFiniteError);
}

TEST(Tape, ConstantsReceiveNoGradientFunction) {
  Tape<double> t;
  Var c = t.constant(BasicTensor<double>::vector({1.0}));
  Var y = scale(t, c, 3.0);
  EXPECT_FALSE(t.requires_grad(y));
}

TEST(Tape, FloatAndDoubleAgree) {
  Rng rng(11);
  auto a = random_tensor({3, 3}, rng), b = random_tensor({3, 2}, rng);
  Tape<double> td;
  Tape<float> tf;
  const auto& yd = td.value(relu(td, matmul(td, td.constant(a), td.constant(b))));
  const auto& yf = tf.value(relu(tf, matmul(tf, tf.constant(a.cast<float>()), tf.constant(b.cast<float>()))));
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-5);
}

// End-to-end: every trainable parameter of small networks, under both BN
// backward variants.
class EndToEnd : public ::testing::TestWithParam<std::tuple<int, BnBackward>> {};

TEST_P(EndToEnd, ParameterGradientsMatchFiniteDifferences) {
  const auto [which, mode] = GetParam();
  const auto r = lftest::toy_network_gradcheck(which, mode);
  EXPECT_LE(r.params, 5000u);
  EXPECT_LT(r.report.max_rel_error, kTol);
  EXPECT_GT(r.report.checked, r.report.skipped * 4);
}

INSTANTIATE_TEST_SUITE_P(ToyNetworks, EndToEnd,
                         ::testing::Combine(::testing::Range(0, lftest::kToyNetworks),
                                            ::testing::Values(BnBackward::exact, BnBackward::constant)));
