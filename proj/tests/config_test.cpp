#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace fnsm;

namespace {

ExperimentFile parse(const std::string& text, const std::vector<std::string>& overrides = {}) {
  std::istringstream is(text);
  return parse_experiment(is, overrides);
}

std::size_t error_line(const std::string& text) {
  try {
    parse(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  ADD_FAILURE() << "no ParseError for:\n" << text;
  return 0;
}

std::string error_message(const std::string& text, const std::vector<std::string>& overrides = {}) {
  try {
    parse(text, overrides);
  } catch (const ParseError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no ParseError for:\n" << text;
  return {};
}

}  // namespace

TEST(Config, DefaultsWhenEmpty) {
  const auto e = parse("");
  EXPECT_EQ(e.fed.algorithm, Algorithm::FedNsam);
  EXPECT_EQ(e.fed.n_clients, 20);
  EXPECT_EQ(e.fed.participation, 2);
  EXPECT_DOUBLE_EQ(e.fed.eta_decay, 0.998);
  EXPECT_DOUBLE_EQ(e.fed.rho, 0.1);
  EXPECT_DOUBLE_EQ(e.fed.lambda, 0.85);
  EXPECT_EQ(e.data.kind, DataKind::Synthetic);
  EXPECT_EQ(e.model, ModelKind::Mlp);
  EXPECT_EQ(e.seeds, std::vector<std::uint64_t>{1});
}

TEST(Config, ParsesEveryKind) {
  const auto e = parse(R"(# comment line
fed.algorithm = fednsam
fed.clients = 8      # trailing comment
fed.participation = 3
fed.rounds = 40
fed.extrapolate = false
fed.eta0 = 0.05
metrics.full_flatness = true
data.alpha = 0.1
data.seed = 9
model.kind = softmax
run.seeds = 1, 2, 3
run.out = results
)");
  EXPECT_EQ(e.fed.algorithm, Algorithm::FedNsam);
  EXPECT_EQ(e.fed.n_clients, 8);
  EXPECT_EQ(e.fed.participation, 3);
  EXPECT_EQ(e.fed.rounds, 40);
  EXPECT_FALSE(e.fed.extrapolate);
  EXPECT_DOUBLE_EQ(e.fed.eta0, 0.05);
  EXPECT_TRUE(e.fed.full_flatness);
  EXPECT_DOUBLE_EQ(e.data.alpha, 0.1);
  ASSERT_TRUE(e.data.seed.has_value());
  EXPECT_EQ(*e.data.seed, 9u);
  EXPECT_EQ(e.model, ModelKind::Softmax);
  EXPECT_EQ(e.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(e.out, "results");
}

TEST(Config, OverridesWinOverFile) {
  const auto e = parse("fed.rounds = 40\nfed.algorithm = fedsam\n", {"fed.rounds=7", "fed.rho = 0.2"});
  EXPECT_EQ(e.fed.rounds, 7);
  EXPECT_DOUBLE_EQ(e.fed.rho, 0.2);
  EXPECT_EQ(e.fed.algorithm, Algorithm::FedSam);
}

TEST(Config, UnknownKeyIsRejectedWithLine) {
  EXPECT_EQ(error_line("fed.rounds = 3\nfed.round = 4\n"), 2u);
  EXPECT_NE(error_message("fed.round = 4\n").find("fed.round"), std::string::npos);
  EXPECT_THROW(parse("", {"bogus.key=1"}), ParseError);
}

TEST(Config, DuplicateKeyIsRejected) {
  EXPECT_EQ(error_line("fed.rounds = 3\n\nfed.rounds = 4\n"), 3u);
}

TEST(Config, MalformedValuesAreRejected) {
  EXPECT_EQ(error_line("fed.rounds = three\n"), 1u);
  EXPECT_EQ(error_line("fed.rounds\n"), 1u);
  EXPECT_EQ(error_line("\nfed.extrapolate = maybe\n"), 2u);
  EXPECT_EQ(error_line("fed.algorithm = fedfoo\n"), 1u);
  EXPECT_EQ(error_line("fed.eta0 = 0.1x\n"), 1u);
}

TEST(Config, ParticipationAboveClientsNamesTheKey) {
  const auto msg = error_message("fed.clients = 4\nfed.participation = 5\n");
  EXPECT_NE(msg.find("fed.participation"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(error_message("", {"fed.participation=0"}).find("fed.participation"), std::string::npos);
}

TEST(Config, RangeChecks) {
  for (const char* bad : {"fed.lambda = 1.0", "fed.lambda = -0.1", "fed.rho = -1", "fed.eta_decay = 0",
                          "fed.eta_decay = 1.5", "fed.eta0 = 0", "fed.local_steps = 0", "fed.rounds = 0",
                          "data.alpha = 0", "data.test_fraction = 1", "run.threads = 0",
                          "metrics.sharpness_rho = 0", "model.hidden = 0"}) {
    const std::string text = std::string(bad) + "\n";
    const std::string key = text.substr(0, text.find(' '));
    EXPECT_NE(error_message(text).find(key), std::string::npos) << bad;
  }
}

TEST(Config, QuadraticModelRequiresQuadraticData) {
  EXPECT_THROW(parse("model.kind = quadratic\n"), ParseError);
  EXPECT_THROW(parse("data.kind = quadratic\n"), ParseError);
  EXPECT_NO_THROW(parse("data.kind = quadratic\nmodel.kind = quadratic\n"));
  EXPECT_THROW(parse("data.kind = csv\n"), ParseError);
}

TEST(Config, HashIsDeterministicAndSensitive) {
  const auto a = parse("fed.rounds = 10\nfed.algorithm = fedsam\n");
  const auto b = parse("fed.algorithm = fedsam\n\nfed.rounds = 10   # same\n");
  EXPECT_EQ(config_hash(a, 1), config_hash(b, 1));
  EXPECT_EQ(config_hash(a, 1).size(), 16u);
  EXPECT_NE(config_hash(a, 1), config_hash(a, 2));
  EXPECT_NE(config_hash(a, 1), config_hash(parse("fed.rounds = 11\nfed.algorithm = fedsam\n"), 1));
}

TEST(Config, HashIgnoresThreadsSeedsAndOutput) {
  const auto a = parse("fed.rounds = 10\n");
  const auto b = parse("fed.rounds = 10\nrun.threads = 4\nrun.seeds = 1,2\nrun.out = elsewhere\n");
  EXPECT_EQ(config_hash(a, 1), config_hash(b, 1));
}

TEST(Config, SplitAssignment) {
  const auto [k, v] = split_assignment("  fed.rho =  0.3 ", 0);
  EXPECT_EQ(k, "fed.rho");
  EXPECT_EQ(v, "0.3");
  EXPECT_THROW(split_assignment("novalue", 4), ParseError);
}

TEST(Config, LoadFromFile) {
  fnsm::testing::TempDir dir("config");
  fnsm::testing::spit(dir.file("exp.cfg"), "fed.algorithm = fedlesam\n");
  EXPECT_EQ(load_experiment(dir.file("exp.cfg")).fed.algorithm, Algorithm::FedLesam);
  EXPECT_THROW(load_experiment(dir.file("missing.cfg")), ParseError);
}
