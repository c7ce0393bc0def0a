#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "fnsm/local_opt.hpp"
#include "test_util.hpp"

namespace fnsm {
namespace {

void expect_near(const ParamVector& a, const ParamVector& b, double tol) {
  ASSERT_EQ(a.dim(), b.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "coord " << i;
}

TEST(SamPerturbation, Examples) {
  expect_near(sam_perturbation({3, 4}, 0.1), {0.06, 0.08}, 1e-15);
  EXPECT_EQ(sam_perturbation({0, 0}, 0.1), (ParamVector{0, 0}));
  expect_near(sam_perturbation({1, 0}, 0.05), {0.05, 0}, 1e-15);
  EXPECT_THROW(sam_perturbation({1, 0}, -1.0), ContractViolation);
}

TEST(NsamPerturbation, Examples) {
  expect_near(nsam_perturbation({0, -2}, 0.1), {0, 0.1}, 1e-15);
  EXPECT_EQ(nsam_perturbation({0, 0}, 0.7), (ParamVector{0, 0}));
  expect_near(nsam_perturbation({3, 4}, 1.0), {-0.6, -0.8}, 1e-15);
}

BroadcastState broadcast(ParamVector theta, double eta, int k, int round = 1) {
  const auto d = theta.dim();
  return {std::move(theta), ParamVector(d), ParamVector(d), eta, k, round};
}

struct MlpFixture : ::testing::Test {
  std::shared_ptr<Dataset> ds = std::make_shared<Dataset>(synth_gaussian_mixture(3, 4, 90, 1.0, 21));
  Objective obj{Mlp1{4, 6, 3}, ds, testing::iota(60)};
  ParamVector theta0 = init_params(obj.spec(), 3);

  LocalResult run(const LocalRule& r, const BroadcastState& bs) {
    ClientState c{4, 8, 99, std::nullopt};
    return *local_round(r, bs, c, obj);
  }
};

TEST(LocalRound, SgdOneStepOnQuadratic) {
  const ParamVector c{1, -2, 0.5};
  Objective q(Quadratic{Matrix::identity(3), c});
  const ParamVector theta0{0.3, 0.1, -0.4};
  ClientState client{0, 1, 1, std::nullopt};
  const auto res = local_round(rule::Sgd{}, broadcast(theta0, 0.1, 1), client, q);
  ASSERT_TRUE(res);
  expect_near(res->delta, -0.1 * (theta0 - c), 1e-15);
  EXPECT_EQ(res->steps_taken, 1);
}

TEST_F(MlpFixture, ZeroRadiusSamIsBitIdenticalToSgd) {
  const auto bs = broadcast(theta0, 0.05, 15);
  const auto sgd = run(rule::Sgd{}, bs);
  EXPECT_EQ(run(rule::Sam{0.0}, bs).final_theta, sgd.final_theta);
  EXPECT_EQ(run(rule::Sam{0.0}, bs).delta, sgd.delta);
}

TEST_F(MlpFixture, NsamWithoutRadiusOrMomentumIsBitIdenticalToSgd) {
  auto bs = broadcast(theta0, 0.05, 15);
  bs.momentum = init_params(obj.spec(), 77);  // nonzero momentum is ignored when lambda = rho = 0
  const auto sgd = run(rule::Sgd{}, bs);
  EXPECT_EQ(run(rule::Nsam{0.0, 0.0, true}, bs).final_theta, sgd.final_theta);
  EXPECT_EQ(run(rule::Nsam{0.0, 0.0, false}, bs).final_theta, sgd.final_theta);
}

TEST(LocalRound, OneDimensionalSamStep) {
  Objective q(Quadratic{Matrix::identity(1), {0}});
  ClientState client{0, 1, 1, std::nullopt};
  const auto res = local_round(rule::Sam{0.1}, broadcast({1.0}, 0.1, 1), client, q);
  EXPECT_NEAR(res->final_theta[0], 0.89, 1e-15);
}

// Hand-coded recurrence theta <- theta - eta A (theta + offset - c), with the
// offset lambda m - rho m/|m| held fixed.
TEST(LocalRound, NsamUsesRoundConstantProbeOffset) {
  const Matrix a = Matrix::diagonal({2.0, 0.5, 1.0});
  const ParamVector c{1, 2, -1};
  Objective q(Quadratic{a, c});
  BroadcastState bs = broadcast({0.2, -0.3, 0.9}, 0.1, 7);
  bs.momentum = {0.3, -0.1, 0.2};
  const double rho = 0.05, lambda = 0.85;

  for (bool extrapolate : {true, false}) {
    const double mn = std::sqrt(0.09 + 0.01 + 0.04);
    double theta[3] = {0.2, -0.3, 0.9};
    const double m[3] = {0.3, -0.1, 0.2};
    const double diag[3] = {2.0, 0.5, 1.0};
    const double cc[3] = {1, 2, -1};
    for (int k = 0; k < 7; ++k)
      for (int j = 0; j < 3; ++j) {
        const double probe = theta[j] + (extrapolate ? lambda * m[j] : 0.0) - rho * m[j] / mn;
        theta[j] -= 0.1 * diag[j] * (probe - cc[j]);
      }
    ClientState client{0, 1, 1, std::nullopt};
    const auto res = local_round(rule::Nsam{rho, lambda, extrapolate}, bs, client, q);
    expect_near(res->final_theta, {theta[0], theta[1], theta[2]}, 1e-14);
  }
}

TEST(LocalRound, NsamColdStartHasNoPerturbation) {
  Objective q(Quadratic{Matrix::identity(2), {1, 1}});
  const auto bs = broadcast({0, 0}, 0.1, 3);
  ClientState a{0, 1, 1, std::nullopt}, b{0, 1, 1, std::nullopt};
  EXPECT_EQ(local_round(rule::Nsam{0.1, 0.85, true}, bs, a, q)->final_theta,
            local_round(rule::Sgd{}, bs, b, q)->final_theta);
}

TEST(LocalRound, MoSamBlendsPseudoGradient) {
  const ParamVector c{1, -1};
  Objective q(Quadratic{Matrix::identity(2), c});
  BroadcastState bs = broadcast({0.5, 0.5}, 0.1, 4);
  bs.last_delta = {-0.2, 0.1};
  const double rho = 0.05, lambda = 0.85;
  ParamVector theta = bs.theta;
  const ParamVector pseudo = (-1.0 / (0.1 * 4)) * bs.last_delta;
  for (int k = 0; k < 4; ++k) {
    const ParamVector g = theta - c;
    const ParamVector probe = theta + (rho / g.norm()) * g;
    const ParamVector gs = probe - c;
    theta = theta - 0.1 * (lambda * gs + (1.0 - lambda) * pseudo);
  }
  ClientState client{0, 1, 1, std::nullopt};
  expect_near(local_round(rule::MoSam{rho, lambda}, bs, client, q)->final_theta, theta, 1e-14);
}

TEST(LocalRound, LesamPerturbsAlongGlobalDrift) {
  const ParamVector c{0, 0};
  Objective q(Quadratic{Matrix::identity(2), c});
  ClientState client{0, 1, 1, std::nullopt};

  // First participation: no memory, behaves like SGD, then remembers theta.
  const auto bs1 = broadcast({1.0, 1.0}, 0.1, 1, 1);
  ClientState plain{0, 1, 1, std::nullopt};
  EXPECT_EQ(local_round(rule::Lesam{0.1}, bs1, client, q)->final_theta,
            local_round(rule::Sgd{}, bs1, plain, q)->final_theta);
  ASSERT_TRUE(client.old_global);
  EXPECT_EQ(*client.old_global, bs1.theta);

  // Second participation: delta = rho (old - new)/|old - new| = 0.1 * (0.6, 0.8).
  const auto bs2 = broadcast({0.4, 0.2}, 0.1, 1, 5);
  const auto res = local_round(rule::Lesam{0.1}, bs2, client, q);
  const ParamVector probe{0.4 + 0.06, 0.2 + 0.08};
  expect_near(res->final_theta, bs2.theta - 0.1 * (probe - c), 1e-15);
  EXPECT_EQ(*client.old_global, bs2.theta);
}

TEST_F(MlpFixture, DeltaBookkeepingIsExact) {
  Rng rng(5, 5);
  const LocalRule rules[] = {rule::Sgd{}, rule::Sam{0.1}, rule::Nsam{0.1, 0.85, true}, rule::MoSam{0.1, 0.85},
                             rule::Lesam{0.1}};
  for (int trial = 0; trial < 10; ++trial) {
    auto bs = broadcast(testing::random_vector(rng, obj.dim(), 0.3), 0.05, 5, trial + 1);
    bs.momentum = testing::random_vector(rng, obj.dim(), 0.1);
    bs.last_delta = testing::random_vector(rng, obj.dim(), 0.1);
    for (const auto& r : rules) {
      const auto res = run(r, bs);
      EXPECT_EQ(res.delta + bs.theta, res.final_theta);
    }
  }
}

TEST(LocalRound, SgdDescendsOnQuadraticsBelowStabilityStep) {
  Rng rng(8, 8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ens = random_quadratic_ensemble(1, 4, 0.1, 2.0, 1.0, static_cast<std::uint64_t>(trial));
    Objective q(ens.front());
    const auto bs = broadcast(testing::random_vector(rng, 4), 0.9 / 2.0, 5);
    ClientState client{0, 1, 1, std::nullopt};
    const auto res = local_round(rule::Sgd{}, bs, client, q);
    EXPECT_LT(eval_loss(q, res->final_theta, q.full_batch()), eval_loss(q, bs.theta, q.full_batch()));
  }
}

TEST(LocalRound, EmptyShardSignalsSkip) {
  auto ds = std::make_shared<Dataset>(synth_gaussian_mixture(2, 2, 10, 1.0, 1));
  Objective obj(SoftmaxLinear{2, 2}, ds, {});
  ClientState client{0, 4, 1, std::nullopt};
  EXPECT_FALSE(local_round(rule::Sgd{}, broadcast(ParamVector(6), 0.1, 3), client, obj));
}

TEST(LocalRound, DivergenceCarriesContext) {
  Objective q(Quadratic{Matrix::identity(1) , {0}});
  ClientState client{6, 1, 1, std::nullopt};
  try {
    local_round(rule::Sgd{}, broadcast({1.0}, 1e200, 5, 12), client, q);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.round(), 12);
    EXPECT_EQ(e.client(), 6);
    EXPECT_GE(e.step(), 0);
    EXPECT_LT(e.step(), 5);
  }
}

TEST(LocalRound, RejectsInvalidRules) {
  Objective q(Quadratic{Matrix::identity(1), {0}});
  ClientState client{0, 1, 1, std::nullopt};
  EXPECT_THROW(local_round(rule::Nsam{0.1, 1.0, true}, broadcast({1.0}, 0.1, 1), client, q), ContractViolation);
  EXPECT_THROW(local_round(rule::Sam{-0.1}, broadcast({1.0}, 0.1, 1), client, q), ContractViolation);
  EXPECT_THROW(local_round(rule::Sgd{}, broadcast({1.0, 2.0}, 0.1, 1), client, q), ContractViolation);
}

TEST(BatchStream, EpochsCoverTheShardOnceAndKeepShortBatch) {
  const std::vector<std::size_t> shard{3, 5, 8, 13, 21, 34, 55};
  BatchStream s(shard, 3, 1, 2, 3);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    std::vector<std::size_t> sizes;
    while (seen.size() < shard.size()) {
      const auto b = s.next();
      sizes.push_back(b.indices.size());
      seen.insert(b.indices.begin(), b.indices.end());
    }
    EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 1}));
    EXPECT_EQ(seen, std::multiset<std::size_t>(shard.begin(), shard.end()));
  }
}

TEST(BatchStream, SeededPerClientAndRound) {
  const auto shard = testing::iota(50);
  auto first = [&](int client, int round) { return BatchStream(shard, 10, 7, client, round).next().indices; };
  EXPECT_EQ(first(1, 1), first(1, 1));
  EXPECT_NE(first(1, 1), first(2, 1));
  EXPECT_NE(first(1, 1), first(1, 2));
}

}  // namespace
}  // namespace fnsm
