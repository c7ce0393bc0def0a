#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fnsm/data.hpp"
#include "fnsm/errors.hpp"
#include "fnsm/local_opt.hpp"
#include "fnsm/metrics.hpp"
#include "fnsm/objective.hpp"
#include "fnsm/param_vector.hpp"
#include "fnsm/rng.hpp"

namespace fnsm {

enum class Algorithm { FedAvg, FedAvgM, FedSam, MoFedSam, FedLesam, FedNsam };

inline constexpr std::string_view algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::FedAvg: return "fedavg";
    case Algorithm::FedAvgM: return "fedavgm";
    case Algorithm::FedSam: return "fedsam";
    case Algorithm::MoFedSam: return "mofedsam";
    case Algorithm::FedLesam: return "fedlesam";
    case Algorithm::FedNsam: return "fednsam";
  }
  return "?";
}

inline std::optional<Algorithm> parse_algorithm(std::string_view s) {
  for (auto a : {Algorithm::FedAvg, Algorithm::FedAvgM, Algorithm::FedSam, Algorithm::MoFedSam,
                 Algorithm::FedLesam, Algorithm::FedNsam})
    if (algorithm_name(a) == s) return a;
  return std::nullopt;
}

// Whether the server keeps a momentum buffer (m <- lambda m + delta, theta <- theta + m).
inline constexpr bool uses_server_momentum(Algorithm a) {
  return a == Algorithm::FedAvgM || a == Algorithm::MoFedSam || a == Algorithm::FedNsam;
}

struct FedConfig {
  Algorithm algorithm = Algorithm::FedNsam;
  int n_clients = 20;
  int participation = 2;
  int rounds = 300;
  int local_steps = 20;
  std::size_t batch = 32;
  double eta0 = 0.1;
  double eta_decay = 0.998;
  double rho = 0.1;
  double lambda = 0.85;
  bool extrapolate = true;
  std::uint64_t seed = 1;
  int eval_every = 1;
  bool full_flatness = false;
  double sharpness_rho = 0.1;
  bool weighted_aggregation = false;
  bool timing = false;
  int threads = 1;
};

// Throws ContractViolation naming the first violated constraint.
inline void validate(const FedConfig& c) {
  require(c.n_clients >= 1, "fed.clients must be >= 1");
  require(c.participation >= 1 && c.participation <= c.n_clients,
          "fed.participation must satisfy 1 <= S <= N");
  require(c.rounds >= 1, "fed.rounds must be >= 1");
  require(c.local_steps >= 1, "fed.local_steps must be >= 1");
  require(c.batch >= 1, "fed.batch must be >= 1");
  require(c.eta0 > 0.0 && std::isfinite(c.eta0), "fed.eta0 must be > 0");
  require(c.eta_decay > 0.0 && c.eta_decay <= 1.0, "fed.eta_decay must be in (0, 1]");
  require(c.rho >= 0.0, "fed.rho must be >= 0");
  require(c.lambda >= 0.0 && c.lambda < 1.0, "fed.lambda must be in [0, 1)");
  require(c.eval_every >= 1, "fed.eval_every must be >= 1");
  require(c.sharpness_rho > 0.0, "metrics.sharpness_rho must be > 0");
  require(c.threads >= 1, "threads must be >= 1");
}

inline LocalRule local_rule_for(const FedConfig& c) {
  switch (c.algorithm) {
    case Algorithm::FedAvg:
    case Algorithm::FedAvgM: return rule::Sgd{};
    case Algorithm::FedSam: return rule::Sam{c.rho};
    case Algorithm::MoFedSam: return rule::MoSam{c.rho, c.lambda};
    case Algorithm::FedLesam: return rule::Lesam{c.rho};
    case Algorithm::FedNsam: return rule::Nsam{c.rho, c.lambda, c.extrapolate};
  }
  return rule::Sgd{};
}

struct ServerState {
  ParamVector theta;
  ParamVector momentum;
  ParamVector last_delta;
  int round = 0;
  double eta = 0.1;

  static ServerState initial(ParamVector theta0, double eta0) {
    const auto d = theta0.dim();
    return {std::move(theta0), ParamVector(d), ParamVector(d), 0, eta0};
  }
};

struct RoundRecord {
  int round = 0;
  std::optional<double> train_loss;
  std::optional<double> test_accuracy;
  std::optional<double> grad_norm_extrapolated;
  std::optional<double> flatness_distance;
  std::optional<double> global_sharpness;
  std::optional<double> wall_time_ms;

  // Compares everything but wall time.
  bool same_metrics(const RoundRecord& o) const {
    return round == o.round && train_loss == o.train_loss && test_accuracy == o.test_accuracy &&
           grad_norm_extrapolated == o.grad_norm_extrapolated &&
           flatness_distance == o.flatness_distance && global_sharpness == o.global_sharpness;
  }
};

// S distinct ids from [0, N), uniform without replacement, sorted ascending.
inline std::vector<int> sample_clients(int n, int s, int round, std::uint64_t seed) {
  require(s >= 1 && s <= n, "sample_clients: need 1 <= S <= N");
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
  if (s < n) {
    Rng rng(seed, tag::kSample, static_cast<std::uint64_t>(round));
    for (std::size_t i = 0; i < static_cast<std::size_t>(s); ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n) - i));
      std::swap(ids[i], ids[j]);
    }
    ids.resize(static_cast<std::size_t>(s));
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

// Coordinate-wise mean, summed in list order. nullopt when the list is empty.
inline std::optional<ParamVector> aggregate(std::span<const ParamVector> deltas) {
  if (deltas.empty()) return std::nullopt;
  ParamVector sum(deltas.front().dim());
  for (const auto& d : deltas) sum += d;
  const auto n = static_cast<double>(deltas.size());
  for (double& x : sum) x /= n;
  return sum;
}

// Mean weighted by `weights` (e.g. shard sizes).
inline std::optional<ParamVector> aggregate_weighted(std::span<const ParamVector> deltas,
                                                     std::span<const double> weights) {
  require(deltas.size() == weights.size(), "aggregate_weighted: size mismatch");
  if (deltas.empty()) return std::nullopt;
  double total = 0.0;
  for (double w : weights) total += w;
  require(total > 0.0, "aggregate_weighted: weights sum to zero");
  ParamVector sum(deltas.front().dim());
  for (std::size_t i = 0; i < deltas.size(); ++i) sum.axpy(weights[i] / total, deltas[i]);
  return sum;
}

inline ServerState server_update(const ServerState& state, const ParamVector& mean_delta,
                                 const FedConfig& cfg) {
  require(mean_delta.dim() == state.theta.dim(), "server_update: dimension mismatch");
  ServerState next = state;
  if (uses_server_momentum(cfg.algorithm)) {
    next.momentum *= cfg.lambda;
    next.momentum += mean_delta;
    next.theta += next.momentum;
  } else {
    next.theta += mean_delta;
  }
  next.last_delta = mean_delta;
  next.round += 1;
  next.eta *= cfg.eta_decay;
  return next;
}

// --- Checkpoint: "FNSM", u32 version, u32 round, u64 d, then theta, m, delta as f64, all LE.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& os, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw ParseError("truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ServerState& s) {
  os.write("FNSM", 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.round));
  detail::put_le<std::uint64_t>(os, s.theta.dim());
  for (const auto* v : {&s.theta, &s.momentum, &s.last_delta})
    for (double x : *v) detail::put_le<double>(os, x);
}

inline void write_checkpoint(const std::string& path, const ServerState& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  write_checkpoint(os, s);
}

// Restores round, theta, m and delta; eta is recomputed from the config so the
// decay schedule matches an uninterrupted run exactly.
inline ServerState read_checkpoint(std::istream& is, const FedConfig& cfg) {
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "FNSM") throw ParseError("not an FNSM checkpoint");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  ServerState s;
  s.round = static_cast<int>(detail::get_le<std::uint32_t>(is));
  const auto d = detail::get_le<std::uint64_t>(is);
  for (auto* v : {&s.theta, &s.momentum, &s.last_delta}) {
    *v = ParamVector(d);
    for (double& x : *v) x = detail::get_le<double>(is);
  }
  s.eta = cfg.eta0;
  for (int r = 0; r < s.round; ++r) s.eta *= cfg.eta_decay;
  return s;
}

inline ServerState read_checkpoint(const std::string& path, const FedConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint " + path);
  return read_checkpoint(is, cfg);
}

// --- Experiment loop ---------------------------------------------------------

// Everything a run needs besides the config: one objective per client, the
// starting point, and an optional held-out set for accuracy.
struct Problem {
  std::vector<Objective> clients;
  ParamVector theta0;
  std::shared_ptr<const Dataset> test;
};

inline Problem make_problem(const Dataset& train, std::span<const ClientShard> shards, const ModelSpec& spec,
                            std::uint64_t seed, std::shared_ptr<const Dataset> test = nullptr) {
  auto data = std::make_shared<const Dataset>(train);
  Problem p;
  for (const auto& s : shards) p.clients.emplace_back(spec, data, s.indices);
  p.theta0 = init_params(spec, seed);
  p.test = std::move(test);
  return p;
}

struct RunOptions {
  std::optional<ServerState> resume;
  int checkpoint_every = 0;  // 0 disables
  std::function<void(const ServerState&)> on_checkpoint;
  ServerState* final_state = nullptr;  // receives the state after the last round
};

namespace detail {

// Runs local_round for each listed client, on up to `threads` workers. Results
// are returned in list order; the first error in list order is rethrown.
inline std::vector<std::optional<LocalResult>> run_clients(const LocalRule& rule, const BroadcastState& bs,
                                                           std::span<const int> ids,
                                                           std::vector<ClientState>& states,
                                                           std::span<const Objective> objectives,
                                                           int threads) {
  std::vector<std::optional<LocalResult>> out(ids.size());
  std::vector<std::exception_ptr> errors(ids.size());
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < ids.size(); i += stride) {
      const auto c = static_cast<std::size_t>(ids[i]);
      try {
        out[i] = local_round(rule, bs, states[c], objectives[c]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), ids.size());
  if (n <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work, t, n);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace detail

// T communication rounds. Deterministic in (cfg, problem) whatever the thread count.
inline std::vector<RoundRecord> run_experiment(const FedConfig& cfg, const Problem& problem,
                                               const RunOptions& opts = {}) {
  validate(cfg);
  require(problem.clients.size() == static_cast<std::size_t>(cfg.n_clients),
          "number of client objectives must equal fed.clients");
  const std::size_t d = problem.theta0.dim();
  for (const auto& o : problem.clients) require(o.dim() == d, "client objective dimension mismatch");

  const LocalRule rule = local_rule_for(cfg);
  ServerState state = opts.resume ? *opts.resume : ServerState::initial(problem.theta0, cfg.eta0);
  require(state.theta.dim() == d, "resume state dimension does not match the problem");

  std::vector<ClientState> clients(problem.clients.size());
  for (std::size_t i = 0; i < clients.size(); ++i)
    clients[i] = ClientState{static_cast<int>(i), cfg.batch, cfg.seed, std::nullopt};

  const ModelSpec& spec = problem.clients.front().spec();
  const double metric_lambda = uses_server_momentum(cfg.algorithm) ? cfg.lambda : 0.0;
  std::vector<RoundRecord> records;

  while (state.round < cfg.rounds) {
    const auto started = std::chrono::steady_clock::now();
    const int t = state.round + 1;
    const auto ids = sample_clients(cfg.n_clients, cfg.participation, t, cfg.seed);
    const BroadcastState bs{state.theta, state.momentum, state.last_delta, state.eta, cfg.local_steps, t};

    const bool evaluate = t % cfg.eval_every == 0 || t == cfg.rounds;
    std::optional<std::vector<ClientState>> before;
    if (evaluate && cfg.full_flatness) before = clients;  // LESAM memory as of the broadcast
    const auto results = detail::run_clients(rule, bs, ids, clients, problem.clients, cfg.threads);
    std::vector<ParamVector> deltas, finals;
    std::vector<double> weights;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!results[i]) continue;
      deltas.push_back(results[i]->delta);
      finals.push_back(results[i]->final_theta);
      weights.push_back(static_cast<double>(problem.clients[static_cast<std::size_t>(ids[i])].shard().size()));
    }
    auto mean = cfg.weighted_aggregation ? aggregate_weighted(deltas, weights) : aggregate(deltas);
    state = server_update(state, mean ? *mean : ParamVector(d), cfg);

    RoundRecord rec;
    rec.round = t;
    if (evaluate) {
      rec.train_loss = global_loss(problem.clients, state.theta);
      if (problem.test && problem.test->size() > 0)
        rec.test_accuracy = accuracy(spec, state.theta, *problem.test);
      rec.grad_norm_extrapolated =
          extrapolated_grad_norm(problem.clients, state.theta, state.momentum, metric_lambda);
      rec.global_sharpness = global_sharpness(problem.clients, state.theta, cfg.sharpness_rho);
      if (cfg.full_flatness) {
        std::vector<int> all(static_cast<std::size_t>(cfg.n_clients));
        for (int i = 0; i < cfg.n_clients; ++i) all[static_cast<std::size_t>(i)] = i;
        const auto every = detail::run_clients(rule, bs, all, *before, problem.clients, cfg.threads);
        std::vector<ParamVector> locals;
        for (const auto& r : every)
          if (r) locals.push_back(r->final_theta);
        if (!locals.empty()) rec.flatness_distance = flatness_distance(locals, state.theta);
      } else if (!finals.empty()) {
        rec.flatness_distance = flatness_distance(finals, state.theta);
      }
    }
    if (cfg.timing)
      rec.wall_time_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    records.push_back(rec);

    if (opts.checkpoint_every > 0 && opts.on_checkpoint &&
        (state.round % opts.checkpoint_every == 0 || state.round == cfg.rounds))
      opts.on_checkpoint(state);
  }
  if (opts.final_state) *opts.final_state = state;
  return records;
}

inline std::vector<RoundRecord> run_experiment(const FedConfig& cfg, const Dataset& ds,
                                               std::span<const ClientShard> shards, const ModelSpec& spec,
                                               std::shared_ptr<const Dataset> test = nullptr,
                                               const RunOptions& opts = {}) {
  require(shards.size() == static_cast<std::size_t>(cfg.n_clients), "shards length must equal fed.clients");
  return run_experiment(cfg, make_problem(ds, shards, spec, cfg.seed, std::move(test)), opts);
}

}  // namespace fnsm
