#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dprobe/corpus.hpp"
#include "dprobe/mdsviz.hpp"
#include "dprobe/metrics.hpp"
#include "dprobe/probe.hpp"

namespace dprobe {

struct AgreementConfig {
  std::string stage = "generate";  // "generate" | "analyze"
  std::string lexicon = "data/lexicon";
  GenerateConfig generate;
  std::string items;   // filled manifest; default <output>/agreement/items.json
  std::string bundle;  // embeddings of agreement.conllu
  TiePolicy ties = TiePolicy::Failure;
  std::size_t trace_items = 2;  // per partition
  MdsConfig mds;
  bool procrustes = false;
};

// Single config file driving every subcommand. Relative paths resolve against
// the config file's directory.
struct RunConfig {
  std::string output_dir = "out";
  std::string treebank;
  FilterConfig filter;
  KeyConfig key;
  double group_threshold = 0.10;
  SplitSizes split;
  std::uint64_t split_seed = 0;
  std::string train_bundle;
  std::string dev_bundle;
  std::string test_bundle;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string model_name;
  ScoreOptions scoring;
  bool clamp_negative = false;
  bool svg = true;
  AgreementConfig agreement;

  nlohmann::json raw;  // the parsed file, for hashing

  static RunConfig load(const std::string& path);
  static RunConfig from_json(const nlohmann::json& j, const std::string& base_dir);

  std::string hash() const;        // whole config
  std::string train_hash() const;  // only what changes trained probes

  std::string prepared_dir() const;
  std::string probes_dir() const;
  std::string eval_dir() const;
  std::string agreement_dir() const;
  std::string checkpoint_path(std::size_t layer, std::uint64_t seed) const;
};

// FNV-1a 64 over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

struct RunOptions {
  std::size_t workers = 1;
  bool resume = false;
  bool dry_run = false;
};

// Each command validates its inputs before doing any work (ValidationError)
// and writes progress to `log`.
void cmd_prepare(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, const RunOptions& opts, std::ostream& log);
void cmd_evaluate(const RunConfig& cfg, const RunOptions& opts, std::ostream& log);
void cmd_agreement(const RunConfig& cfg, const RunOptions& opts, std::ostream& log);

// Loads probes for layers 0..num_layers of one seed.
std::vector<ProbeParams> load_probes(const RunConfig& cfg, std::size_t num_layers,
                                     std::uint64_t seed);

}  // namespace dprobe
