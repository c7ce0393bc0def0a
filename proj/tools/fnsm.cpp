#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fnsm/experiment.hpp"

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) seeds.push_back(std::stoull(cell));
  return seeds;
}

void add_common(CLI::App* cmd, fnsm::RunArgs& a) {
  cmd->add_option("--config", a.config, "experiment file")->required();
  cmd->add_option("--set", a.overrides, "override a config key (key=value)");
  cmd->add_option("--out", a.out, "output directory");
  cmd->add_option("--threads", a.threads, "worker threads for client training");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fnsm: federated sharpness-aware optimization lab"};
  app.set_version_flag("--version", std::string(fnsm::kToolVersion));
  app.require_subcommand(1);

  fnsm::RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "train every configured seed and write per-round CSVs");
  add_common(run_cmd, run);
  run_cmd->add_option("--resume", run.resume, "resume from a checkpoint");

  fnsm::CompareArgs compare;
  std::string algos, seeds;
  auto* cmp_cmd = app.add_subcommand("compare", "run several algorithms and seeds, write summary.csv");
  add_common(cmp_cmd, compare.base);
  cmp_cmd->add_option("--algos", algos, "comma-separated algorithms")->required();
  cmp_cmd->add_option("--seeds", seeds, "comma-separated seeds");

  fnsm::SurfaceArgs surface;
  auto* srf_cmd = app.add_subcommand("surface", "2-D loss surface around a checkpointed model");
  add_common(srf_cmd, surface.base);
  srf_cmd->add_option("--ckpt", surface.checkpoint, "checkpoint file")->required();
  srf_cmd->add_option("--range", surface.range, "half-width of the grid");
  srf_cmd->add_option("--res", surface.res, "grid resolution (odd)");
  srf_cmd->add_option("--output", surface.output, "surface file (default <out>/surface.txt)");

  fnsm::RunArgs part;
  auto* part_cmd = app.add_subcommand("partition", "print per-client class histograms");
  add_common(part_cmd, part);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fnsm::kExitConfig;
  }

  if (*run_cmd) return fnsm::cmd_run(run);
  if (*cmp_cmd) {
    std::stringstream ss(algos);
    std::string name;
    while (std::getline(ss, name, ',')) compare.algos.push_back(name);
    try {
      if (!seeds.empty()) compare.seeds = parse_seeds(seeds);
    } catch (const std::exception&) {
      std::cerr << "fnsm: --seeds: expected comma-separated integers\n";
      return fnsm::kExitConfig;
    }
    return fnsm::cmd_compare(compare);
  }
  if (*srf_cmd) return fnsm::cmd_surface(surface);
  if (*part_cmd) return fnsm::cmd_partition(part);
  return fnsm::kExitConfig;
}
