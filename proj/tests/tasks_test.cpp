// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <set>

#include "support.hpp"

using namespace legoflow;

namespace {

Eigen::MatrixXd as_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
  return m;
}

Eigen::MatrixXd latent(const TaskSpec& t) {
  const auto& ds = t.dataset;
  return Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(ds.latent_map.data(), ds.map_rows,
                                                                           ds.input_dim);
}

}  // namespace

TEST(ConflictSuite, NamesGroupsAndSizes) {
  auto tasks = lftest::small_conflict_suite(1);
  ASSERT_EQ(tasks.size(), 4u);
  EXPECT_EQ(tasks[0].name, "g0t0");
  EXPECT_EQ(tasks[3].name, "g1t1");
  EXPECT_EQ(tasks[2].dataset.group, 1u);
  EXPECT_EQ(tasks[0].dataset.inputs.rows(), 256u + 64u);
  EXPECT_EQ(tasks[0].dataset.values.cols(), 12u);
}

TEST(ConflictSuite, GroupsShareMapsAndDifferAcross) {
  auto tasks = lftest::small_conflict_suite(2);
  EXPECT_EQ(tasks[0].dataset.latent_map, tasks[1].dataset.latent_map);
  EXPECT_NE(tasks[0].dataset.shift.offset, tasks[1].dataset.shift.offset);
  // Rows of the two groups' maps are mutually orthonormal.
  const Eigen::MatrixXd a = latent(tasks[0]), b = latent(tasks[2]);
  EXPECT_LT((a * b.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a * a.transpose() - Eigen::MatrixXd::Identity(12, 12)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ConflictSuite, TargetsAreLinearUpToNoise) {
  auto tasks = lftest::small_conflict_suite(3, 1024, 64);
  const auto& ds = tasks[1].dataset;
  Eigen::MatrixXd X = as_eigen(ds.inputs), Y = as_eigen(ds.values);
  Eigen::MatrixXd Xa(X.rows(), X.cols() + 1);
  Xa << X, Eigen::VectorXd::Ones(X.rows());
  Eigen::MatrixXd coef = Xa.colPivHouseholderQr().solve(Y);
  const double resid = (Xa * coef - Y).squaredNorm() / static_cast<double>(Y.size());
  EXPECT_NEAR(resid, ds.noise * ds.noise, 0.2 * ds.noise * ds.noise);
  EXPECT_LT((coef.topRows(X.cols()).transpose() - latent(tasks[1])).cwiseAbs().maxCoeff(), 0.05);
}

TEST(ConflictSuite, DeterministicInSeed) {
  auto a = lftest::small_conflict_suite(5), b = lftest::small_conflict_suite(5), c = lftest::small_conflict_suite(6);
  EXPECT_EQ(max_abs_diff(a[2].dataset.inputs, b[2].dataset.inputs), 0.0f);
  EXPECT_GT(max_abs_diff(a[2].dataset.inputs, c[2].dataset.inputs), 0.0f);
}

TEST(ConflictSuite, RejectsDegenerateShapes) {
  ConflictSuiteOptions o;
  o.num_groups = 1;
  EXPECT_THROW(make_conflict_suite(o), ValueError);
  o.num_groups = 4;
  o.outputs = 12;  // 48 orthonormal rows do not fit in 32 dimensions
  EXPECT_THROW(make_conflict_suite(o), ValueError);
}

TEST(RelatedTask, KeepsTheLatentMap) {
  auto tasks = lftest::small_conflict_suite(4);
  TaskSpec same = related_task(tasks[0], "copy");
  EXPECT_EQ(same.name, "copy");
  EXPECT_EQ(max_abs_diff(same.dataset.values, tasks[0].dataset.values), 0.0f);
  TaskSpec shifted = related_task(tasks[0], "new", 77, 1.0);
  EXPECT_EQ(shifted.dataset.latent_map, tasks[0].dataset.latent_map);
  EXPECT_NE(shifted.dataset.shift.offset, tasks[0].dataset.shift.offset);
  EXPECT_GT(max_abs_diff(shifted.dataset.inputs, tasks[0].dataset.inputs), 0.0f);
}

TEST(ShapeSuite, HeterogeneousWidthsAndHeads) {
  auto tasks = make_shape_suite(ShapeSuiteOptions{});
  ASSERT_EQ(tasks.size(), 3u);
  EXPECT_EQ(tasks[0].dataset.input_dim, 16u);
  EXPECT_EQ(tasks[1].dataset.input_dim, 32u);
  EXPECT_EQ(tasks[2].dataset.input_dim, 64u);
  EXPECT_EQ(tasks[0].head.kind, HeadKind::classifier);
  EXPECT_EQ(tasks[2].head.kind, HeadKind::per_position);
  EXPECT_EQ(tasks[2].dataset.labels.size(), (1024u + 256u) * 4u);
  for (const auto& t : tasks) EXPECT_TRUE(t.use_adapter);
  std::set<int> classes(tasks[0].dataset.labels.begin(), tasks[0].dataset.labels.end());
  EXPECT_EQ(classes.size(), 4u);
}

TEST(Batches, NextBatchDrawsDistinctRowsFromTheSplit) {
  auto tasks = lftest::small_conflict_suite(1);
  Rng rng(3);
  for (Split s : {Split::train, Split::val}) {
    Batch b = next_batch(tasks[0], s, rng);
    EXPECT_EQ(b.x.rows(), 32u);
    std::set<std::size_t> idx(b.indices.begin(), b.indices.end());
    EXPECT_EQ(idx.size(), 32u);
    for (std::size_t i : idx) {
      EXPECT_GE(i, tasks[0].dataset.split_begin(s));
      EXPECT_LT(i, tasks[0].dataset.split_begin(s) + tasks[0].dataset.split_size(s));
    }
  }
}

TEST(Batches, GatherCopiesRowsAndTargets) {
  auto tasks = make_shape_suite(ShapeSuiteOptions{});
  const std::vector<std::size_t> idx{5, 2};
  Batch b = gather(tasks[2], idx);
  EXPECT_EQ(b.x(1, 3), tasks[2].dataset.inputs(2, 3));
  ASSERT_EQ(b.y.labels.size(), 8u);
  EXPECT_EQ(b.y.labels[4], tasks[2].dataset.labels[2 * 4]);
}

TEST(Batches, OversizedBatchIsRejected) {
  auto tasks = lftest::small_conflict_suite(1);
  tasks[0].batch_size = 65;
  Rng rng(1);
  EXPECT_THROW(next_batch(tasks[0], Split::val, rng), ValueError);
}

TEST(Batches, EpochStreamVisitsEveryRowOncePerEpoch) {
  auto tasks = lftest::small_conflict_suite(1);
  EpochStream stream(tasks[0], Split::val, 9, 16);
  std::multiset<std::size_t> seen;
  for (int i = 0; i < 4; ++i)
    for (std::size_t j : stream.next().indices) seen.insert(j);
  EXPECT_EQ(seen.size(), 64u);
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 64u);
  EXPECT_EQ(stream.epoch(), 0u);
  stream.next();
  EXPECT_EQ(stream.epoch(), 1u);
}

TEST(ConstantPredictor, RegressionLossIsTargetVariance) {
  auto tasks = lftest::small_conflict_suite(1);
  const auto& ds = tasks[0].dataset;
  Eigen::MatrixXd Y = as_eigen(ds.values).bottomRows(ds.val_size);
  const Eigen::RowVectorXd mean = Y.colwise().mean();
  const double expected = (Y.rowwise() - mean).squaredNorm() / static_cast<double>(Y.size());
  EXPECT_NEAR(constant_predictor_loss(tasks[0], Split::val), expected, 1e-6);
}
