#pragma once

// Command implementations behind the `fnsm` tool. Each returns a process exit
// code: 0 ok, 2 config/validation error, 3 numerical divergence.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fnsm/config.hpp"
#include "fnsm/data.hpp"
#include "fnsm/federation.hpp"
#include "fnsm/metrics.hpp"
#include "fnsm/objective.hpp"

namespace fnsm {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDiverged = 3;

inline constexpr std::string_view kRecordHeader =
    "round,train_loss,test_accuracy,grad_norm_extrapolated,flatness_distance,global_sharpness,wall_time_ms";
inline constexpr std::string_view kSummaryHeader =
    "algo,seeds,test_accuracy_mean,test_accuracy_std,flatness_distance_mean,flatness_distance_std,"
    "global_sharpness_mean,global_sharpness_std";

inline constexpr std::size_t kSummaryWindow = 20;

inline std::string provenance_line(const ExperimentFile& e, std::uint64_t seed) {
  return "# fnsm " + std::string(kToolVersion) + " config=" + config_hash(e, seed);
}

// --- Record CSV ----------------------------------------------------------------

inline void write_records(std::ostream& os, std::span<const RoundRecord> records, const std::string& provenance) {
  os << provenance << '\n' << kRecordHeader << '\n';
  auto cell = [&](const std::optional<double>& v) {
    os << ',';
    if (v) os << format_double(*v);
  };
  for (const auto& r : records) {
    os << r.round;
    cell(r.train_loss);
    cell(r.test_accuracy);
    cell(r.grad_norm_extrapolated);
    cell(r.flatness_distance);
    cell(r.global_sharpness);
    cell(r.wall_time_ms);
    os << '\n';
  }
}

inline std::vector<RoundRecord> read_records(std::istream& is) {
  std::vector<RoundRecord> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kRecordHeader) throw ParseError("unexpected record header", lineno);
      header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 7) throw ParseError("expected 7 fields", lineno);
    RoundRecord r;
    r.round = std::stoi(cells[0]);
    std::optional<double>* slots[] = {&r.train_loss,        &r.test_accuracy,    &r.grad_norm_extrapolated,
                                      &r.flatness_distance, &r.global_sharpness, &r.wall_time_ms};
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& s = cells[i + 1];
      if (s.empty()) continue;
      double v = 0.0;
      const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw ParseError("bad number '" + s + "'", lineno);
      *slots[i] = v;
    }
    out.push_back(r);
  }
  if (!header) throw ParseError("missing record header");
  return out;
}

// Mean of the last `window` present values of a metric; nullopt if none.
inline std::optional<double> window_mean(std::span<const RoundRecord> records,
                                         std::optional<double> RoundRecord::*metric,
                                         std::size_t window = kSummaryWindow) {
  double sum = 0.0;
  std::size_t n = 0;
  for (auto it = records.rbegin(); it != records.rend() && n < window; ++it) {
    if (const auto& v = (*it).*metric) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd out;
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return out;
}

// --- Problem construction ------------------------------------------------------

inline ModelSpec model_spec_for(const ExperimentFile& e, std::size_t dim, int classes) {
  switch (e.model) {
    case ModelKind::Softmax: return SoftmaxLinear{classes, dim};
    case ModelKind::Mlp: return Mlp1{dim, e.hidden, classes};
    case ModelKind::Quadratic: break;
  }
  throw ContractViolation("quadratic model has no classification spec");
}

// Dataset for a seed: generated or loaded, before splitting.
inline Dataset source_dataset(const ExperimentFile& e, std::uint64_t seed) {
  const std::uint64_t data_seed = e.data.seed.value_or(seed);
  if (e.data.kind == DataKind::Csv) return load_csv(e.data.path);
  return synth_gaussian_mixture(e.data.classes, e.data.dim, e.data.n, e.data.spread, data_seed);
}

struct BuiltProblem {
  Problem problem;
  std::optional<Dataset> train;  // absent for quadratic ensembles
  std::vector<ClientShard> shards;
  std::vector<Quadratic> quadratics;
};

inline BuiltProblem build_problem(const ExperimentFile& e, std::uint64_t seed) {
  BuiltProblem b;
  const std::uint64_t data_seed = e.data.seed.value_or(seed);
  if (e.data.kind == DataKind::Quadratic) {
    b.quadratics = random_quadratic_ensemble(e.fed.n_clients, e.data.dim, e.data.min_eig, e.data.max_eig,
                                             e.data.center_scale, data_seed);
    for (const auto& q : b.quadratics) b.problem.clients.emplace_back(q);
    b.problem.theta0 = ParamVector(e.data.dim);
    return b;
  }
  const Dataset full = source_dataset(e, seed);
  auto [train, test] = train_test_split(full, e.data.test_fraction, data_seed);
  b.shards = dirichlet_partition(train, {e.data.alpha, e.fed.n_clients, data_seed});
  const auto spec = model_spec_for(e, train.dim, train.classes);
  b.problem = make_problem(train, b.shards, spec, seed, std::make_shared<const Dataset>(std::move(test)));
  b.train = std::move(train);
  return b;
}

// --- Commands --------------------------------------------------------------------

struct RunArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::optional<std::string> resume;
};

inline std::string records_path(const std::string& out, Algorithm a, std::uint64_t seed) {
  return out + "/" + std::string(algorithm_name(a)) + "_seed" + std::to_string(seed) + ".csv";
}

inline std::string checkpoint_path(const std::string& out, Algorithm a, std::uint64_t seed) {
  return out + "/" + std::string(algorithm_name(a)) + "_seed" + std::to_string(seed) + ".ckpt";
}

namespace detail {

inline ExperimentFile load_with(const RunArgs& a) {
  auto e = load_experiment(a.config, a.overrides);
  if (a.out) {
    e.out = *a.out;
    e.resolved["run.out"] = *a.out;
  }
  if (a.threads) {
    if (*a.threads < 1) throw ParseError("--threads must be >= 1");
    e.fed.threads = *a.threads;
  }
  return e;
}

// Runs one (config, seed) and writes its CSV. Returns the records.
inline std::vector<RoundRecord> run_one(const ExperimentFile& e, std::uint64_t seed,
                                        const std::optional<std::string>& resume) {
  FedConfig cfg = e.fed;
  cfg.seed = seed;
  auto built = build_problem(e, seed);
  RunOptions opts;
  if (resume) opts.resume = read_checkpoint(*resume, cfg);
  if (e.checkpoint_every > 0) {
    opts.checkpoint_every = e.checkpoint_every;
    const auto path = checkpoint_path(e.out, cfg.algorithm, seed);
    opts.on_checkpoint = [path](const ServerState& s) { write_checkpoint(path, s); };
  }
  const auto records = run_experiment(cfg, built.problem, opts);
  std::ofstream os(records_path(e.out, cfg.algorithm, seed), std::ios::binary);
  if (!os) throw ParseError("cannot write to output directory " + e.out);
  write_records(os, records, provenance_line(e, seed));
  return records;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const DivergenceError& ex) {
    err << "fnsm: diverged: " << ex.what() << '\n';
    return kExitDiverged;
  } catch (const ParseError& ex) {
    err << "fnsm: config error: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const ContractViolation& ex) {
    err << "fnsm: invalid input: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "fnsm: " << ex.what() << '\n';
    return kExitConfig;
  }
}

}  // namespace detail

inline int cmd_run(const RunArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const auto e = detail::load_with(args);
    std::filesystem::create_directories(e.out);
    for (auto seed : e.seeds) {
      const auto records = detail::run_one(e, seed, args.resume);
      out << records_path(e.out, e.fed.algorithm, seed) << ": " << records.size() << " rounds\n";
    }
    return kExitOk;
  });
}

struct CompareArgs {
  RunArgs base;
  std::vector<std::string> algos;
  std::vector<std::uint64_t> seeds;  // empty: use run.seeds
};

inline int cmd_compare(const CompareArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    auto e = detail::load_with(args.base);
    if (!args.seeds.empty()) e.seeds = args.seeds;
    std::vector<Algorithm> algos;
    for (const auto& name : args.algos) {
      auto a = parse_algorithm(name);
      if (!a) throw ParseError("--algos: unknown algorithm '" + name + "'");
      algos.push_back(*a);
    }
    if (algos.empty()) algos.push_back(e.fed.algorithm);
    std::filesystem::create_directories(e.out);

    std::ostringstream summary;
    summary << "# fnsm " << kToolVersion << " config=" << config_hash(e, e.seeds.front()) << '\n'
            << kSummaryHeader << '\n';
    for (auto algo : algos) {
      ExperimentFile ea = e;
      ea.fed.algorithm = algo;
      ea.resolved["fed.algorithm"] = std::string(algorithm_name(algo));
      std::vector<double> acc, flat, sharp;
      for (auto seed : e.seeds) {
        const auto records = detail::run_one(ea, seed, std::nullopt);
        out << records_path(e.out, algo, seed) << ": " << records.size() << " rounds\n";
        if (auto v = window_mean(records, &RoundRecord::test_accuracy)) acc.push_back(*v);
        if (auto v = window_mean(records, &RoundRecord::flatness_distance)) flat.push_back(*v);
        if (auto v = window_mean(records, &RoundRecord::global_sharpness)) sharp.push_back(*v);
      }
      summary << algorithm_name(algo) << ',' << e.seeds.size();
      for (const auto* xs : {&acc, &flat, &sharp}) {
        if (xs->empty()) {
          summary << ",,";
          continue;
        }
        const auto ms = mean_std(*xs);
        summary << ',' << format_double(ms.mean) << ',' << format_double(ms.stddev);
      }
      summary << '\n';
    }
    std::ofstream os(e.out + "/summary.csv", std::ios::binary);
    if (!os) throw ParseError("cannot write summary to " + e.out);
    os << summary.str();
    out << e.out << "/summary.csv\n";
    return kExitOk;
  });
}

struct SurfaceArgs {
  RunArgs base;
  std::string checkpoint;
  double range = 1.0;
  int res = 21;
  std::optional<std::string> output;
};

inline int cmd_surface(const SurfaceArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const auto e = detail::load_with(args.base);
    if (args.res < 3 || args.res % 2 == 0) throw ParseError("--res must be odd and >= 3");
    if (!(args.range > 0.0)) throw ParseError("--range must be > 0");
    const auto seed = e.seeds.front();
    const auto built = build_problem(e, seed);
    FedConfig cfg = e.fed;
    cfg.seed = seed;
    const auto state = read_checkpoint(args.checkpoint, cfg);
    if (state.theta.dim() != built.problem.theta0.dim())
      throw ParseError("checkpoint dimension " + std::to_string(state.theta.dim()) +
                       " does not match config dimension " + std::to_string(built.problem.theta0.dim()));
    const auto grid =
        loss_surface_slice(built.problem.clients, state.theta, seed, args.range, args.res, e.fed.threads);
    const std::string path = args.output.value_or(e.out + "/surface.txt");
    if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
      std::filesystem::create_directories(parent);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot write " + path);
    write_surface(os, grid, "version=" + std::string(kToolVersion) + " config=" + config_hash(e, seed));
    out << path << '\n';
    return kExitOk;
  });
}

inline int cmd_partition(const RunArgs& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    const auto e = detail::load_with(args);
    if (e.data.kind == DataKind::Quadratic) throw ParseError("data.kind: partition needs a labelled dataset");
    const auto seed = e.seeds.front();
    const auto built = build_problem(e, seed);
    const auto hist = class_histograms(*built.train, built.shards);
    out << provenance_line(e, seed) << '\n' << "client,n";
    for (int c = 0; c < built.train->classes; ++c) out << ",class" << c;
    out << '\n';
    for (std::size_t i = 0; i < hist.size(); ++i) {
      out << i << ',' << built.shards[i].size();
      for (auto n : hist[i]) out << ',' << n;
      out << '\n';
    }
    return kExitOk;
  });
}

}  // namespace fnsm
