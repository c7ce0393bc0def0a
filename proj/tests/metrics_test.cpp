#include <gtest/gtest.h>

#include <sstream>

#include "fnsm/metrics.hpp"
#include "test_util.hpp"

namespace fnsm {
namespace {

TEST(FlatnessDistance, HandCases) {
  const std::vector<ParamVector> pair{{1, 0}, {0, 1}};
  EXPECT_EQ(flatness_distance(pair, {0.5, 0.5}), 0.5);
  const std::vector<ParamVector> same{{0.3, 0.7}, {0.3, 0.7}, {0.3, 0.7}};
  EXPECT_EQ(flatness_distance(same, {0.3, 0.7}), 0.0);
  EXPECT_THROW(flatness_distance(std::vector<ParamVector>{}, {0, 0}), ContractViolation);
  const std::vector<ParamVector> wrong{{1, 2, 3}};
  EXPECT_THROW(flatness_distance(wrong, {0, 0}), ContractViolation);
}

// Loop-accumulation oracle written independently of the implementation.
double flatness_oracle(const std::vector<ParamVector>& locals, const ParamVector& g) {
  double total = 0.0;
  for (const auto& l : locals) total += (l - g).squared_norm();
  return total / static_cast<double>(locals.size());
}

TEST(FlatnessDistance, MatchesOracleOnRandomInstances) {
  Rng rng(4, 4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ParamVector> locals;
    const std::size_t d = 1 + rng.below(6);
    for (int i = 0; i < 5; ++i) locals.push_back(testing::random_vector(rng, d));
    const auto g = testing::random_vector(rng, d);
    EXPECT_NEAR(flatness_distance(locals, g), flatness_oracle(locals, g), 1e-12);
  }
}

TEST(FlatnessDistance, TranslationInvariantAndQuadraticScaling) {
  Rng rng(5, 5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ParamVector> locals;
    for (int i = 0; i < 4; ++i) locals.push_back(testing::random_vector(rng, 3));
    const auto g = testing::random_vector(rng, 3);
    const double base = flatness_distance(locals, g);
    const auto shift = testing::random_vector(rng, 3);
    std::vector<ParamVector> shifted, scaled;
    for (const auto& l : locals) {
      shifted.push_back(l + shift);
      scaled.push_back(2.5 * l);
    }
    EXPECT_NEAR(flatness_distance(shifted, g + shift), base, 1e-12);
    EXPECT_NEAR(flatness_distance(scaled, 2.5 * g), 6.25 * base, 1e-12 * (1 + base));
  }
}

std::vector<Objective> quad(Matrix a, ParamVector c) {
  std::vector<Objective> v;
  v.emplace_back(Quadratic{std::move(a), std::move(c)});
  return v;
}

TEST(GlobalSharpness, OneDimensionalQuadratic) {
  const auto f = quad(Matrix::identity(1), {0});
  // 0.5 * 1.1^2 - 0.5
  EXPECT_NEAR(global_sharpness(f, {1.0}, 0.1), 0.105, 1e-15);
  EXPECT_EQ(global_sharpness(f, {0.0}, 0.1), 0.0);
  EXPECT_THROW(global_sharpness(f, {1.0}, 0.0), ContractViolation);
}

TEST(GlobalSharpness, NonNegativeOnConvexQuadratics) {
  Rng rng(6, 6);
  for (int trial = 0; trial < 30; ++trial) {
    const auto ens = random_quadratic_ensemble(3, 4, 0.05, 3.0, 1.0, static_cast<std::uint64_t>(trial));
    std::vector<Objective> objs(ens.begin(), ens.end());
    EXPECT_GE(global_sharpness(objs, testing::random_vector(rng, 4), rng.uniform(0.01, 1.0)), 0.0);
  }
}

TEST(GlobalLoss, AveragesClientObjectives) {
  std::vector<Objective> objs;
  objs.emplace_back(Quadratic{Matrix::identity(1), {0}});
  objs.emplace_back(Quadratic{Matrix::identity(1), {2}});
  ParamVector g;
  EXPECT_DOUBLE_EQ(global_loss(objs, {1.0}, &g), 0.5);
  EXPECT_DOUBLE_EQ(g[0], 0.0);
}

TEST(ExtrapolatedGradNorm, Examples) {
  const auto f = quad(Matrix::identity(2), {0, 0});
  EXPECT_EQ(extrapolated_grad_norm(f, {3, 4}, {0, 0}, 0.85), 5.0);
  EXPECT_EQ(extrapolated_grad_norm(f, {3, 4}, {-6, -8}, 0.5), 0.0);
  const auto g = quad(Matrix::diagonal({2, 1}), {0, 0});
  EXPECT_NEAR(extrapolated_grad_norm(g, {1, 1}, {1, 0}, 0.5), std::sqrt(10.0), 1e-15);
}

TEST(LossSurface, ForcedAxisDirections) {
  const auto f = quad(Matrix::identity(2), {0, 0});
  const auto grid = loss_surface_with_directions(f, {0, 0}, {1, 0}, {0, 1}, 1.0, 3);
  EXPECT_EQ(grid.at(0, 0), 1.0);
  EXPECT_EQ(grid.at(2, 2), 1.0);
  EXPECT_EQ(grid.at(0, 2), 1.0);
  EXPECT_EQ(grid.at(1, 1), 0.0);
  EXPECT_EQ(grid.at(1, 0), 0.5);
}

TEST(LossSurface, CenterMatchesFullDataLossAndGridIsSymmetric) {
  const auto ens = random_quadratic_ensemble(4, 6, 0.1, 2.0, 0.0, 3);  // centred at the origin
  std::vector<Objective> objs(ens.begin(), ens.end());
  const ParamVector theta{0.4, -0.2, 0.3, 0.0, 0.1, 1.0};
  const auto grid = loss_surface_slice(objs, theta, 17, 0.5, 7);
  EXPECT_NEAR(grid.at(3, 3), global_loss(objs, theta), 1e-10);

  const auto at_origin = loss_surface_slice(objs, ParamVector(6), 17, 0.5, 7);
  for (int a = 0; a < 7; ++a)
    for (int b = 0; b < 7; ++b) EXPECT_NEAR(at_origin.at(a, b), at_origin.at(6 - a, 6 - b), 1e-10);
}

TEST(LossSurface, DirectionsAreOrthogonalAndFilterNormalized) {
  auto ds = std::make_shared<Dataset>(synth_gaussian_mixture(3, 4, 30, 1.0, 1));
  std::vector<Objective> objs;
  objs.emplace_back(Mlp1{4, 5, 3}, ds, testing::iota(30));
  const ParamVector theta = init_params(objs.front().spec(), 2);
  const auto grid = loss_surface_slice(objs, theta, 9, 1.0, 3);
  const auto blocks = parameter_blocks(objs.front().spec());
  std::size_t from = 0;
  for (std::size_t len : blocks) {
    double tn = 0, un = 0, vn = 0;
    for (std::size_t j = from; j < from + len; ++j) {
      tn += theta[j] * theta[j];
      un += grid.u[j] * grid.u[j];
      vn += grid.v[j] * grid.v[j];
    }
    EXPECT_NEAR(std::sqrt(un), std::sqrt(tn), 1e-12);
    EXPECT_NEAR(std::sqrt(vn), std::sqrt(tn), 1e-12);
    from += len;
  }
  // Deterministic in the seed, and parallel evaluation matches serial.
  const auto again = loss_surface_slice(objs, theta, 9, 1.0, 3, 4);
  EXPECT_EQ(again.values, grid.values);
}

TEST(LossSurface, RejectsEvenResolution) {
  const auto f = quad(Matrix::identity(1), {0});
  EXPECT_THROW(loss_surface_slice(f, {0}, 1, 1.0, 4), ContractViolation);
  EXPECT_THROW(loss_surface_slice(f, {0}, 1, 0.0, 5), ContractViolation);
}

TEST(SurfaceFile, RoundTripsThroughText) {
  const auto ens = random_quadratic_ensemble(2, 3, 0.1, 1.0, 1.0, 5);
  std::vector<Objective> objs(ens.begin(), ens.end());
  const auto grid = loss_surface_slice(objs, {0.1, 0.2, 0.3}, 4, 0.75, 5);
  std::stringstream ss;
  write_surface(ss, grid, "version=1.0.0");
  std::string first;
  std::getline(std::stringstream(ss.str()), first);
  EXPECT_EQ(first.rfind("# fnsm-surface v1 res=5 range=0.75", 0), 0u);
  const auto back = read_surface(ss);
  EXPECT_EQ(back.res, 5);
  EXPECT_EQ(back.range, 0.75);
  EXPECT_EQ(back.values, grid.values);

  std::stringstream bad("# fnsm-surface v1 res=2 range=1\n1 2\n3\n");
  EXPECT_THROW(read_surface(bad), ParseError);
}

}  // namespace
}  // namespace fnsm
