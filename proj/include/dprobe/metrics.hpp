#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dprobe/corpus.hpp"
#include "dprobe/decode.hpp"
#include "dprobe/probe.hpp"
#include "dprobe/templates.hpp"

namespace dprobe {

enum class Averaging { Micro, Macro };

struct LayerScoreSeries {
  Category category;
  std::optional<StructureSetKey> key;
  std::vector<double> scores;  // S(0..L); meaningless unless `valid`
  std::size_t sentences = 0;
  std::size_t gold_edges = 0;  // per layer
  bool valid = false;          // false when no sentence has a gold edge in this category
};

// trees[layer][sentence], predicted with the probe for that layer.
using DecodedLayers = std::vector<std::vector<PredictedTree>>;

using EmbeddingLookup = std::function<LayerTensor(std::size_t sentence)>;

// Decodes every sentence with every probe; probes[l] targets layer l.
DecodedLayers decode_layers(std::span<const ProbeParams> probes, std::size_t sentence_count,
                            const EmbeddingLookup& embeddings);

struct ScoreOptions {
  Averaging averaging = Averaging::Micro;
  SubgraphConfig subgraph;
};

// S(l) over the sentences listed in `members` (all sentences when empty is
// not allowed: pass the indices explicitly). Throws ValidationError when
// `members` is empty.
LayerScoreSeries layer_scores(const DecodedLayers& trees, const std::vector<DepSentence>& sents,
                              std::span<const std::size_t> members, const Category& category,
                              const std::optional<StructureSetKey>& key,
                              const ScoreOptions& opts = {});

// Convenience: decode then score all of `sents`.
LayerScoreSeries layer_scores(std::span<const ProbeParams> probes,
                              const std::vector<DepSentence>& sents,
                              const EmbeddingLookup& embeddings, const Category& category,
                              const std::optional<StructureSetKey>& key,
                              const ScoreOptions& opts = {});

struct ExpectedLayerResult {
  double value = 0.0;
  std::vector<double> deltas;  // S(l) - S(l-1), l = 1..L
  double denominator = 0.0;
  bool valid = false;
};

// Delta-weighted mean layer index. Raw deltas by default; `clamp_negative`
// zeroes negative deltas first. Invalid when the deltas sum to zero (within
// 1e-12) or fewer than two scores are given.
ExpectedLayerResult expected_layer(std::span<const double> scores, bool clamp_negative = false);
ExpectedLayerResult expected_layer(const LayerScoreSeries& series, bool clamp_negative = false);

// Mean and population standard deviation over the valid entries.
struct SeedSummary {
  std::vector<std::optional<double>> per_seed;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t valid_seeds = 0;
  bool valid() const { return valid_seeds > 0; }
};

SeedSummary summarize(std::vector<std::optional<double>> per_seed);

struct ExpectedLayerRow {
  std::string group;  // structure-set key, or partition name
  Category category;
  std::size_t sentences = 0;
  SeedSummary expected;
};

// One row per (retained structure set, category) with Macro first, then each
// distinct Micro label of the key. `trees_by_seed[s]` holds the layer-wise
// decodes of `test` for seed s.
std::vector<ExpectedLayerRow> structure_set_report(
    const std::vector<StructureSetKey>& groups, const std::vector<DecodedLayers>& trees_by_seed,
    const std::vector<DepSentence>& test, const ScoreOptions& opts = {},
    const KeyConfig& key_cfg = {}, bool clamp_negative = false);

enum class TiePolicy { Failure, Success, Exclude };

TiePolicy parse_tie_policy(const std::string& text);

struct AgreementPartition {
  std::string name;  // "success" or "failure"
  std::vector<std::size_t> items;
  std::vector<ExpectedLayerRow> rows;
};

struct AgreementAnalysis {
  std::size_t total = 0;
  std::size_t ties = 0;
  std::size_t excluded = 0;
  std::vector<AgreementPartition> partitions;
};

// Splits items by pll_grammatical > pll_ungrammatical and computes expected
// layers for Global, Macro, Micro(nsubj), Micro(dobj) per partition.
// `trees_by_seed[s][l][i]` is the decode of item i's gold sentence. Throws
// ValidationError if an item lacks PLL scores.
AgreementAnalysis agreement_split_analysis(const std::vector<AgreementItem>& items,
                                           const std::vector<DecodedLayers>& trees_by_seed,
                                           TiePolicy ties = TiePolicy::Failure,
                                           const ScoreOptions& opts = {});

nlohmann::json rows_to_json(const std::vector<ExpectedLayerRow>& rows);
std::string rows_to_csv(const std::vector<ExpectedLayerRow>& rows);

}  // namespace dprobe
