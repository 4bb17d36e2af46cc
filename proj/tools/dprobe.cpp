// dprobe: layer-wise structural probing pipeline.
//
//   dprobe prepare   --config run.json
//   dprobe train     --config run.json [--workers N] [--resume] [--dry-run]
//   dprobe evaluate  --config run.json [--workers N]
//   dprobe agreement --config run.json [--workers N]
//
// Exit codes: 0 ok, 1 validation error, 2 runtime error.

#include <iostream>

#include <CLI11.hpp>

#include "dprobe/error.hpp"
#include "dprobe/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise structural probing and expected-layer analysis"};
  app.require_subcommand(1);

  std::string config_path;
  dprobe::RunOptions opts;

  auto add_common = [&](CLI::App* cmd, bool parallel) {
    cmd->add_option("--config", config_path, "run configuration (JSON)")->required();
    if (parallel) cmd->add_option("--workers", opts.workers, "worker threads")->check(CLI::PositiveNumber);
  };
  auto* prepare = app.add_subcommand("prepare", "filter, group and split a CoNLL-U treebank");
  add_common(prepare, false);
  auto* train = app.add_subcommand("train", "train probes for every (layer, seed)");
  add_common(train, true);
  train->add_flag("--resume", opts.resume, "skip (layer, seed) units that already have checkpoints");
  train->add_flag("--dry-run", opts.dry_run, "print the work plan and exit");
  auto* evaluate = app.add_subcommand("evaluate", "score layers and compute expected layers");
  add_common(evaluate, true);
  auto* agreement = app.add_subcommand("agreement", "generate or analyse the agreement corpus");
  add_common(agreement, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    const auto cfg = dprobe::RunConfig::load(config_path);
    if (*prepare) dprobe::cmd_prepare(cfg, std::cerr);
    if (*train) dprobe::cmd_train(cfg, opts, opts.dry_run ? std::cout : std::cerr);
    if (*evaluate) dprobe::cmd_evaluate(cfg, opts, std::cerr);
    if (*agreement) dprobe::cmd_agreement(cfg, opts, std::cerr);
  } catch (const dprobe::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
